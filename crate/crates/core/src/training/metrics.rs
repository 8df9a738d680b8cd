//! Append-only JSON-lines metrics log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HlmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub header: bool,
    pub seed: u64,
    pub objective: String,
    pub task: String,
    pub stage: String,
    pub config_digest: String,
}

/// One line per `eval_every` steps. `loss` and `aux_acc` average the
/// steps since the previous record; `mem_bytes` is the largest per-step
/// peak of engine allocations in that span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tok_per_s: Option<f64>,
    pub aux_acc: f64,
    pub mem_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub step: u64,
    pub error: String,
}

#[derive(Debug)]
pub struct MetricsLog {
    file: Option<File>,
    pub records: Vec<Record>,
}

impl MetricsLog {
    /// A log that only keeps records in memory.
    pub fn in_memory() -> Self {
        MetricsLog { file: None, records: Vec::new() }
    }

    /// Opens `path` for appending and writes `header` as the first line of this run.
    pub fn create(path: &Path, header: &Header) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut log = MetricsLog { file: Some(file), records: Vec::new() };
        log.write_line(header)?;
        Ok(log)
    }

    fn write_line<S: Serialize>(&mut self, value: &S) -> Result<()> {
        if let Some(f) = &mut self.file {
            let mut line = serde_json::to_string(value).map_err(|e| HlmError::Format(e.to_string()))?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        Ok(())
    }

    pub fn record(&mut self, r: Record) -> Result<()> {
        self.write_line(&r)?;
        self.records.push(r);
        Ok(())
    }

    pub fn failure(&mut self, step: u64, error: &str) -> Result<()> {
        self.write_line(&Failure { step, error: error.to_string() })
    }
}

/// Reads the header and records back from a metrics file.
pub fn read_log(path: &Path) -> Result<(Option<Header>, Vec<Record>)> {
    let mut header = None;
    let mut records = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if let Ok(h) = serde_json::from_str::<Header>(&line) {
            header.get_or_insert(h);
        } else if let Ok(r) = serde_json::from_str::<Record>(&line) {
            records.push(r);
        }
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let h = Header {
            header: true,
            seed: 7,
            objective: "headless_cwt".into(),
            task: "mlm".into(),
            stage: "pretrained_headless".into(),
            config_digest: "d".into(),
        };
        let mut log = MetricsLog::create(&path, &h).unwrap();
        let r = Record { step: 50, loss: 2.5, lr: 1e-3, tok_per_s: None, aux_acc: 0.25, mem_bytes: 10 };
        log.record(r.clone()).unwrap();
        log.failure(51, "non-finite loss").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().contains("\"tok_per_s\":null"));
        let (hb, rs) = read_log(&path).unwrap();
        assert_eq!(hb, Some(h));
        assert_eq!(rs, vec![r]);
    }
}
