//! Per-query run records, persisted as JSON lines.
//!
//! Every row carries exactly the keys
//! `iter, stage, kind, x_or_a, usage, qoe, kl, lambda, beta, seed`;
//! inapplicable values are `null`.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::RegretTracker;
use crate::slicesim::{ACTION_DIM, PARAM_DIM};

pub const KEYS: [&str; 10] = [
    "iter", "stage", "kind", "x_or_a", "usage", "qoe", "kl", "lambda", "beta", "seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    /// A simulator query.
    Offline,
    /// A query against the real network.
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub iter: u64,
    pub stage: u8,
    pub kind: Kind,
    pub x_or_a: Vec<f64>,
    pub usage: Option<f64>,
    pub qoe: Option<f64>,
    pub kl: Option<f64>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub seed: u64,
}

impl LedgerRow {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(1..=3).contains(&self.stage) {
            return Err(format!("stage {} not in 1..=3", self.stage));
        }
        let want = if self.stage == 1 {
            PARAM_DIM
        } else {
            ACTION_DIM
        };
        if self.x_or_a.len() != want {
            return Err(format!(
                "stage {} rows need {want} values in x_or_a, got {}",
                self.stage,
                self.x_or_a.len()
            ));
        }
        if self.x_or_a.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value in x_or_a".into());
        }
        let frac = |name: &str, v: Option<f64>| match v {
            Some(x) if !(0.0..=1.0).contains(&x) => Err(format!("{name} {x} outside [0,1]")),
            _ => Ok(()),
        };
        frac("usage", self.usage)?;
        frac("qoe", self.qoe)?;
        let nonneg = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x >= 0.0 && x.is_finite()) => Err(format!("{name} {x} must be >= 0")),
            _ => Ok(()),
        };
        nonneg("kl", self.kl)?;
        nonneg("lambda", self.lambda)?;
        nonneg("beta", self.beta)?;
        if self.stage == 1 && self.kl.is_none() {
            return Err("stage-1 rows need kl".into());
        }
        if self.stage > 1 && (self.usage.is_none() || self.qoe.is_none()) {
            return Err("stage-2/3 rows need usage and qoe".into());
        }
        Ok(())
    }

    pub fn to_line(&self) -> Result<String> {
        self.validate().map_err(Error::InvalidArgument)?;
        serde_json::to_string(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let obj = v.as_object().ok_or("row is not a JSON object")?;
        for k in KEYS {
            if !obj.contains_key(k) {
                return Err(format!("missing key `{k}`"));
            }
        }
        if let Some(extra) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(format!("unknown key `{extra}`"));
        }
        let row: LedgerRow = serde_json::from_value(v).map_err(|e| e.to_string())?;
        row.validate()?;
        Ok(row)
    }
}

/// Rows of one stage run plus, for online runs, the regret series.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLedger {
    pub rows: Vec<LedgerRow>,
    pub regret: RegretTracker,
}

impl RunLedger {
    pub fn push(&mut self, row: LedgerRow) -> Result<()> {
        row.validate().map_err(Error::InvalidArgument)?;
        self.rows.push(row);
        Ok(())
    }

    pub fn online_rows(&self) -> impl Iterator<Item = &LedgerRow> {
        self.rows.iter().filter(|r| r.kind == Kind::Online)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&r.to_line()?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Read rows back; regrets are not part of the JSONL file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = LedgerRow::parse_line(line)
                .map_err(|m| Error::format(path, format!("line {}: {m}", i + 1)))?;
            rows.push(row);
        }
        Ok(RunLedger {
            rows,
            regret: RegretTracker::default(),
        })
    }
}

/// Appends rows to a JSONL file as they are produced, flushing after each,
/// so an aborted run leaves every completed row on disk.
pub struct LedgerWriter {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl LedgerWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(LedgerWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, row: &LedgerRow) -> Result<()> {
        let mut line = row.to_line()?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}
