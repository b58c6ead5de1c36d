use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::memory::EpisodicMemory;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionStats {
    pub action: usize,
    pub count: usize,
    pub mean_value: Option<f64>,
    pub min_value: Option<f64>,
    pub max_value: Option<f64>,
    pub mean_writes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorySummary {
    pub entries: usize,
    pub capacity: usize,
    pub key_dim: usize,
    pub num_actions: usize,
    /// Oldest and newest live sequence numbers.
    pub seq_range: Option<(u64, u64)>,
    pub per_action: Vec<ActionStats>,
}

pub fn summarize_memory(mem: &EpisodicMemory) -> MemorySummary {
    let cfg = mem.config();
    let per_action = (0..cfg.num_actions)
        .map(|a| {
            let vals: Vec<(f64, u64)> = mem
                .entries()
                .filter(|e| e.action == a)
                .map(|e| (e.value, e.writes as u64))
                .collect();
            let n = vals.len();
            let mean = |f: &dyn Fn(&(f64, u64)) -> f64| (n > 0).then(|| vals.iter().map(f).sum::<f64>() / n as f64);
            ActionStats {
                action: a,
                count: n,
                mean_value: mean(&|v| v.0),
                min_value: vals.iter().map(|v| v.0).reduce(f64::min),
                max_value: vals.iter().map(|v| v.0).reduce(f64::max),
                mean_writes: mean(&|v| v.1 as f64),
            }
        })
        .collect();
    // Entries are kept in insertion order.
    let seq_range = mem.entries().next().zip(mem.entries().last()).map(|(a, b)| (a.seq, b.seq));
    MemorySummary {
        entries: mem.len(),
        capacity: cfg.capacity,
        key_dim: cfg.key_dim,
        num_actions: cfg.num_actions,
        seq_range,
        per_action,
    }
}

impl fmt::Display for MemorySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "entries {}/{}  key_dim {}  actions {}",
            self.entries, self.capacity, self.key_dim, self.num_actions
        )?;
        if let Some((lo, hi)) = self.seq_range {
            writeln!(f, "seq {lo}..={hi}")?;
        }
        writeln!(f, "{:>6} {:>7} {:>12} {:>12} {:>12} {:>8}", "action", "count", "mean", "min", "max", "writes")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        for s in &self.per_action {
            writeln!(
                f,
                "{:>6} {:>7} {:>12} {:>12} {:>12} {:>8}",
                s.action,
                s.count,
                opt(s.mean_value),
                opt(s.min_value),
                opt(s.max_value),
                s.mean_writes.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
            )?;
        }
        Ok(())
    }
}

/// One row per entry: `seq,action,value,writes,key_0,...`.
pub fn export_csv<W: Write>(mem: &EpisodicMemory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Corrupt(e.to_string());
    let mut header = vec!["seq".to_string(), "action".into(), "value".into(), "writes".into()];
    header.extend((0..mem.config().key_dim).map(|i| format!("key_{i}")));
    w.write_record(&header).map_err(err)?;
    for e in mem.entries() {
        let mut row = vec![e.seq.to_string(), e.action.to_string(), e.value.to_string(), e.writes.to_string()];
        row.extend(e.key.iter().map(|k| k.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryConfig;

    fn memory() -> EpisodicMemory {
        let mut m = EpisodicMemory::new(MemoryConfig::new(2, 3, 10)).unwrap();
        m.write(&[0.0, 0.0], 0, 1.0).unwrap();
        m.write(&[5.0, 5.0], 0, 3.0).unwrap();
        m.write(&[1.0, 0.0], 2, -1.0).unwrap();
        m
    }

    #[test]
    fn summary_counts_per_action() {
        let s = summarize_memory(&memory());
        assert_eq!(s.entries, 3);
        assert_eq!(s.per_action[0].count, 2);
        assert_eq!(s.per_action[1].count, 0);
        assert_eq!(s.per_action[1].mean_value, None);
        assert_eq!(s.per_action[2].max_value, Some(-1.0));
        assert!(s.to_string().contains("entries 3/10"));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut buf = Vec::new();
        export_csv(&memory(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "seq,action,value,writes,key_0,key_1");
        assert_eq!(lines.len(), 4);
    }
}
