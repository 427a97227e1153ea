//! CSV outputs. Every file starts with the full run configuration as `# `
//! comment lines so a result can always be traced to the settings that
//! produced it.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 4] = ["epoch", "split", "loss", "accuracy"];

pub struct CsvOut {
    writer: csv::Writer<File>,
}

impl CsvOut {
    pub fn create(path: &Path, cfg: &RunConfig, header: &[&str]) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut preamble = String::new();
        for line in cfg.to_toml().lines() {
            preamble.push_str("# ");
            preamble.push_str(line);
            preamble.push('\n');
        }
        file.write_all(preamble.as_bytes()).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header)?;
        Ok(Self { writer })
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        self.writer.write_record(fields.iter().map(|f| f.as_ref()))?;
        Ok(())
    }

    /// One `epoch,split,loss,accuracy` row. `epoch` is empty for
    /// evaluations that are not tied to an epoch.
    pub fn metric(&mut self, epoch: Option<usize>, split: &str, loss: Option<f64>, accuracy: f64) -> Result<()> {
        self.row(&[
            epoch.map(|e| e.to_string()).unwrap_or_default(),
            split.to_string(),
            loss.map(|l| l.to_string()).unwrap_or_default(),
            accuracy.to_string(),
        ])
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::Csv(e.into()))
    }
}

/// The configuration embedded in a CSV file's comment preamble.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        match line.strip_prefix("# ") {
            Some(rest) => {
                text.push_str(rest);
                text.push('\n');
            }
            None if line == "#" => text.push('\n'),
            None => break,
        }
    }
    RunConfig::from_toml(&text)
}

/// Data rows of a CSV file, skipping the preamble and the header.
pub fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let mut rows = Vec::new();
    for rec in reader.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preamble_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let cfg = RunConfig {
            seed: 42,
            train_size: None,
            ..RunConfig::default()
        };
        let mut out = CsvOut::create(&path, &cfg, &METRICS_HEADER).unwrap();
        out.metric(Some(1), "train", Some(0.5), 0.75).unwrap();
        out.metric(None, "test", None, 0.5).unwrap();
        out.finish().unwrap();
        assert_eq!(read_config(&path).unwrap(), cfg);
        let rows = read_rows(&path).unwrap();
        assert_eq!(rows, vec![vec!["1", "train", "0.5", "0.75"], vec!["", "test", "", "0.5"]]);
    }
}
