//! Append-only results ledger: one JSON line per completed command, keyed
//! by the resolved-config hash. Records are never rewritten.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use graft::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub timestamp: u64,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl LedgerRecord {
    pub fn new(command: &str, config_hash: &str, seed: u64, out_dir: &Path) -> Self {
        LedgerRecord {
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            out_dir: out_dir.to_path_buf(),
            metrics: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with_metrics(mut self, report: &graft::eval::MetricReport) -> Self {
        self.metrics.insert("map".into(), report.map);
        for (k, v) in &report.rank_hits {
            self.metrics.insert(format!("r{k}"), *v);
        }
        self.metrics
            .insert("excluded_queries".into(), report.excluded_queries as f64);
        self
    }
}

pub struct Ledger {
    path: PathBuf,
}

impl Ledger {
    pub fn at_root(out_root: &Path) -> Self {
        Ledger {
            path: out_root.join("ledger.jsonl"),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &LedgerRecord) -> Result<()> {
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        let line =
            serde_json::to_string(record).map_err(|e| Error::config(format!("ledger encode: {e}")))?;
        writeln!(file, "{line}")?;
        Ok(())
    }

    pub fn read_all(&self) -> Result<Vec<LedgerRecord>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&self.path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::config(format!("ledger decode: {e}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = Ledger::at_root(dir.path());
        let rec = LedgerRecord::new("train", "abc123", 7, &dir.path().join("run"));
        ledger.append(&rec).unwrap();
        ledger.append(&rec).unwrap();
        let all = ledger.read_all().unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].config_hash, "abc123");
    }
}
