fn main() {
    std::process::exit(blrnet::cli::run(std::env::args_os()));
}
