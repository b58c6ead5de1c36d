//! Newline-delimited JSON metrics, one record per policy update.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::hyperrl::StepRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord<'a> {
    pub run_id: &'a str,
    pub seed: u64,
    #[serde(flatten)]
    pub step: &'a StepRecord,
}

/// Writes one JSON object per line and flushes after every line, so a
/// crashed run still leaves a readable prefix.
pub struct MetricsWriter<W: Write> {
    out: W,
    lines: u64,
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, lines: 0 }
    }

    pub fn write(&mut self, run_id: &str, seed: u64, step: &StepRecord) -> Result<()> {
        let rec = MetricsRecord { run_id, seed, step };
        serde_json::to_writer(&mut self.out, &rec).map_err(|e| Error::Corrupt(e.to_string()))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parses every line of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<serde_json::Value>> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Corrupt(format!("metrics line {}: {e}", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn record() -> StepRecord {
        StepRecord {
            update_step: 3,
            learning_episode: 0,
            env_steps: 15,
            action: 2,
            hyperparams: BTreeMap::from([("learning_rate".to_string(), 7e-4)]),
            epsilon: Some(0.9),
            policy_loss: 0.1,
            value_loss: 0.2,
            entropy: 0.69,
            grad_norm: 1.5,
            skipped: false,
            episodes_completed: 0,
            trailing_mean_return: None,
            hyper_return: None,
            encoder_loss: None,
            memory_size: Some(0),
            wall_clock_ms: None,
        }
    }

    #[test]
    fn one_flat_object_per_line() {
        let mut w = MetricsWriter::new(Vec::new());
        w.write("r", 7, &record()).unwrap();
        w.write("r", 7, &record()).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(v["seed"], 7);
        assert_eq!(v["update_step"], 3);
        assert_eq!(v["hyperparams"]["learning_rate"], 7e-4);
        assert!(v.get("wall_clock_ms").is_none());
    }
}
