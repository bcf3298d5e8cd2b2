use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One line per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub staleness: u64,
    pub index_version: u64,
    /// Mean retrieval utility of each example's top-1 candidate.
    pub ru_top1: f64,
    pub grad_norm: f64,
    /// Examples skipped because `p(y|x) = 0`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skipped: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall_at_k: Option<f64>,
}

/// First line of a metrics file; the only place a wall-clock time appears.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub created_unix: u64,
    pub phase: String,
    pub config_digest: String,
}

/// Append-only JSON-lines metrics file.
#[derive(Debug)]
pub struct MetricsSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsSink {
    /// Start a new file with a header line.
    pub fn create(path: impl AsRef<Path>, phase: &str, config_digest: &str) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut out = BufWriter::new(File::create(&path)?);
        let header = MetricsHeader {
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            phase: phase.to_string(),
            config_digest: config_digest.to_string(),
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )?;
        out.flush()?;
        Ok(MetricsSink { path, out })
    }

    /// Reopen an existing file, dropping records after `step` so a resumed
    /// run does not duplicate them.
    pub fn resume(path: impl AsRef<Path>, step: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut kept = Vec::new();
        {
            let reader = BufReader::new(File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if i == 0 {
                    kept.push(line);
                    continue;
                }
                let rec: StepRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1)))?;
                if rec.step <= step {
                    kept.push(line);
                }
            }
        }
        let mut out = BufWriter::new(OpenOptions::new().write(true).truncate(true).open(&path)?);
        for line in kept {
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(MetricsSink { path, out })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        writeln!(
            self.out,
            "{}",
            serde_json::to_string(rec).expect("record serializes")
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Step records of a metrics file, header skipped.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 2)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> StepRecord {
        StepRecord {
            step,
            loss: 1.5,
            staleness: step,
            index_version: 0,
            ru_top1: 0.0,
            grad_norm: 0.1,
            skipped: None,
            recall_at_k: None,
        }
    }

    #[test]
    fn resume_truncates_later_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut s = MetricsSink::create(&p, "pretrain", "abc").unwrap();
        for i in 1..=5 {
            s.write(&rec(i)).unwrap();
        }
        s.flush().unwrap();
        drop(s);
        let mut s = MetricsSink::resume(&p, 3).unwrap();
        s.write(&rec(4)).unwrap();
        s.flush().unwrap();
        let steps: Vec<u64> = read_metrics(&p).unwrap().iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 2, 3, 4]);
    }
}
