//! End-to-end runs of the `blrnet` binary on synthetic MNIST-format data.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use blrnet::checkpoint;
use blrnet::config::RunConfig;
use blrnet::report::{read_config, read_rows};

const SEED: &str = "3";

fn blrnet(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_blrnet")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

struct Workspace {
    _dir: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    common::write_mnist(&data.join("mnist"), 200, 100);
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "batch_size = 50\nreestimate_batches = 2\n").unwrap();
    let out = dir.path().join("out");
    Workspace { data, out, config, _dir: dir }
}

impl Workspace {
    fn args<'a>(&'a self, cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec![
            cmd,
            "--config",
            self.config.to_str().unwrap(),
            "--data-dir",
            self.data.to_str().unwrap(),
            "--out-dir",
            self.out.to_str().unwrap(),
            "--seed",
            SEED,
            "--arch",
            "4C3-MP2-16FC-SM10",
            "--train-size",
            "200",
            "--pretrain-size",
            "200",
            "--test-size",
            "100",
            "--epochs",
            "2",
            "--pretrain-epochs",
            "1",
        ];
        v.extend_from_slice(extra);
        v
    }

    fn run(&self, cmd: &str, extra: &[&str]) {
        let (code, err) = blrnet(&self.args(cmd, extra));
        assert_eq!(code, 0, "{cmd} failed: {err}");
    }
}

/// Every subcommand whose output is deterministic, in dependency order.
const PIPELINE: &[(&str, &[&str], &str)] = &[
    ("pretrain", &[], "pretrain.csv"),
    ("train", &[], "train.csv"),
    ("export", &[], "export.csv"),
    ("reestimate-bn", &[], "reestimate-bn.csv"),
    ("eval", &["--engine", "bit"], "eval.csv"),
    ("ensemble-eval", &["--ensemble", "3"], "ensemble-eval.csv"),
    ("coverage", &["--ensemble", "3"], "coverage.csv"),
    ("ablate", &["--init", "xavier"], "ablate.csv"),
];

fn run_pipeline(ws: &Workspace) -> Vec<(String, Vec<u8>)> {
    if ws.out.exists() {
        std::fs::remove_dir_all(&ws.out).unwrap();
    }
    PIPELINE
        .iter()
        .map(|(cmd, extra, csv)| {
            ws.run(cmd, extra);
            (csv.to_string(), std::fs::read(ws.out.join(csv)).unwrap())
        })
        .collect()
}

#[test]
fn repeated_runs_are_byte_identical_and_carry_provenance() {
    let ws = workspace();
    let first = run_pipeline(&ws);
    let second = run_pipeline(&ws);
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        assert!(a == b, "{name} differs between runs");
    }

    let cfg = read_config(&ws.out.join("train.csv")).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.batch_size, 50);
    assert_eq!(cfg.train_size, Some(200));
    assert_eq!(cfg.arch, "4C3-MP2-16FC-SM10");
    for (name, _) in &first {
        assert_eq!(read_config(&ws.out.join(name)).unwrap(), cfg, "{name}");
    }
    for ck in ["pretrain.blrn", "model.blrn", "net.blrn", "net-reestimated.blrn"] {
        let c = checkpoint::load(&ws.out.join(ck)).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(RunConfig::from_toml(c.meta("config").unwrap()).unwrap(), cfg, "{ck}");
    }

    let coverage = read_rows(&ws.out.join("coverage.csv")).unwrap();
    assert_eq!(coverage.len(), 100);
    assert_eq!(coverage[0][0].parse::<f64>().unwrap(), 1.0);
    assert_eq!(coverage[99][0].parse::<f64>().unwrap(), 0.01);
    let train = read_rows(&ws.out.join("train.csv")).unwrap();
    assert_eq!(train.iter().filter(|r| r[1] == "val").count(), 2);
    assert_eq!(train.last().unwrap()[1], "test");
}

#[test]
fn bench_reports_every_engine_and_batch() {
    let ws = workspace();
    ws.run("bench", &["--batch", "1,4", "--repeats", "1"]);
    let rows = read_rows(&ws.out.join("bench.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn exit_codes() {
    let ws = workspace();
    assert_eq!(blrnet(&["--help"]).0, 0);
    assert_eq!(blrnet(&["train", "--no-such-flag"]).0, 1);
    assert_eq!(blrnet(&["no-such-command"]).0, 1);
    assert_eq!(blrnet(&ws.args("pretrain", &["--arch", "4Q3-SM10"])).0, 1);
    assert_eq!(blrnet(&ws.args("pretrain", &["--arch", "16FC-SM7"])).0, 1);
    assert_eq!(blrnet(&ws.args("ablate", &[])).0, 1);

    let bad = ws.out.parent().unwrap().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(blrnet(&["pretrain", "--config", bad.to_str().unwrap()]).0, 1);
    std::fs::write(&bad, "lr = -1.0\n").unwrap();
    assert_eq!(blrnet(&["pretrain", "--config", bad.to_str().unwrap()]).0, 1);

    let empty = ws.out.parent().unwrap().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let mut args = ws.args("pretrain", &[]);
    let i = args.iter().position(|a| *a == "--data-dir").unwrap();
    args[i + 1] = empty.to_str().unwrap();
    let (code, err) = blrnet(&args);
    assert_eq!(code, 2);
    assert!(err.contains("train-images-idx3-ubyte"), "{err}");

    let missing = Path::new("/nonexistent/model.blrn");
    assert_eq!(blrnet(&ws.args("export", &["--from", missing.to_str().unwrap()])).0, 2);
}
