//! Per-frame latency traces and their on-disk form.
//!
//! One frame per line, comma separated, all values in ms:
//!
//! ```text
//! # duration_s=60
//! frame_id,t_done_ms,latency_ms,loading,ul_tx,backhaul,queueing,compute,dl_tx
//! ```
//!
//! Lines starting with `#` are metadata/comments. Floats are written in their
//! shortest round-trip form so a reload is sample-for-sample exact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time a frame spent in each hop, in ms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Breakdown {
    pub loading: f64,
    pub ul_tx: f64,
    pub backhaul: f64,
    /// Wait in the edge compute queue.
    pub queueing: f64,
    pub compute: f64,
    pub dl_tx: f64,
}

impl Breakdown {
    pub fn total(&self) -> f64 {
        self.loading + self.ul_tx + self.backhaul + self.queueing + self.compute + self.dl_tx
    }

    pub fn scaled(&self, k: f64) -> Breakdown {
        Breakdown {
            loading: self.loading * k,
            ul_tx: self.ul_tx * k,
            backhaul: self.backhaul * k,
            queueing: self.queueing * k,
            compute: self.compute * k,
            dl_tx: self.dl_tx * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub t_done_ms: f64,
    /// Always `parts.total()`.
    pub latency_ms: f64,
    pub parts: Breakdown,
}

impl FrameRecord {
    pub fn new(frame_id: u64, t_done_ms: f64, parts: Breakdown) -> Self {
        FrameRecord {
            frame_id,
            t_done_ms,
            latency_ms: parts.total(),
            parts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTrace {
    pub duration_s: f64,
    pub frames: Vec<FrameRecord>,
}

impl LatencyTrace {
    pub fn new(duration_s: f64, frames: Vec<FrameRecord>) -> Self {
        LatencyTrace { duration_s, frames }
    }

    pub fn frames_completed(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn samples(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.latency_ms).collect()
    }

    pub fn mean_latency(&self) -> f64 {
        if self.frames.is_empty() {
            return f64::NAN;
        }
        self.frames.iter().map(|f| f.latency_ms).sum::<f64>() / self.frames.len() as f64
    }

    /// Mean of each breakdown component.
    pub fn mean_breakdown(&self) -> Breakdown {
        let n = self.frames.len().max(1) as f64;
        let mut acc = Breakdown::default();
        for f in &self.frames {
            acc.loading += f.parts.loading;
            acc.ul_tx += f.parts.ul_tx;
            acc.backhaul += f.parts.backhaul;
            acc.queueing += f.parts.queueing;
            acc.compute += f.parts.compute;
            acc.dl_tx += f.parts.dl_tx;
        }
        acc.scaled(1.0 / n)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(64 * (self.frames.len() + 2));
        let _ = writeln!(out, "# duration_s={}", self.duration_s);
        let _ = writeln!(
            out,
            "# frame_id,t_done_ms,latency_ms,loading,ul_tx,backhaul,queueing,compute,dl_tx"
        );
        for f in &self.frames {
            let p = &f.parts;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                f.frame_id,
                f.t_done_ms,
                f.latency_ms,
                p.loading,
                p.ul_tx,
                p.backhaul,
                p.queueing,
                p.compute,
                p.dl_tx
            );
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut duration_s = None;
        let mut frames = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(v) = meta.trim().strip_prefix("duration_s=") {
                    duration_s = Some(v.trim().parse::<f64>().map_err(|e| {
                        Error::format(origin, format!("line {}: duration_s: {e}", lineno + 1))
                    })?);
                }
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 9 {
                return Err(Error::format(
                    origin,
                    format!(
                        "line {}: expected 9 columns, got {}",
                        lineno + 1,
                        cols.len()
                    ),
                ));
            }
            let bad = |e: &dyn std::fmt::Display| {
                Error::format(origin, format!("line {}: {e}", lineno + 1))
            };
            let frame_id = cols[0].parse::<u64>().map_err(|e| bad(&e))?;
            let mut v = [0.0f64; 8];
            for (slot, c) in v.iter_mut().zip(&cols[1..]) {
                *slot = c.parse::<f64>().map_err(|e| bad(&e))?;
            }
            let parts = Breakdown {
                loading: v[2],
                ul_tx: v[3],
                backhaul: v[4],
                queueing: v[5],
                compute: v[6],
                dl_tx: v[7],
            };
            frames.push(FrameRecord {
                frame_id,
                t_done_ms: v[0],
                latency_ms: v[1],
                parts,
            });
        }
        let duration_s =
            duration_s.ok_or_else(|| Error::format(origin, "missing `# duration_s=` header"))?;
        Ok(LatencyTrace { duration_s, frames })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
