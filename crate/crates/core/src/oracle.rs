//! Brute-force reference optimum over a 4-level-per-dimension action grid.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::metrics::{qoe, resource_usage, ReferenceOptimum};
use crate::seed::{self, purpose, stage};
use crate::slicesim::{ConfigAction, NetworkState, ACTION_DIM};

/// Normalized levels of every action coordinate.
pub const GRID_LEVELS: [f64; 4] = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];

/// All `4^6 = 4096` grid actions, first coordinate varying slowest.
pub fn grid_actions() -> Vec<ConfigAction> {
    let n = GRID_LEVELS.len();
    (0..n.pow(ACTION_DIM as u32))
        .map(|mut k| {
            let mut u = [0.0; ACTION_DIM];
            for slot in u.iter_mut().rev() {
                *slot = GRID_LEVELS[k % n];
                k /= n;
            }
            ConfigAction::from_normalized(&u)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub action: ConfigAction,
    pub usage: f64,
    pub qoe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub action: ConfigAction,
    pub usage: f64,
    pub qoe: f64,
    pub traffic: u32,
    pub requirement: f64,
    pub threshold_ms: f64,
    pub feasible: usize,
    pub evaluated: usize,
}

impl OracleResult {
    pub fn reference(&self) -> ReferenceOptimum {
        ReferenceOptimum {
            usage: self.usage,
            qoe: self.qoe,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Measure every grid action once (common random numbers: one seed for
/// all) and return the minimum-usage action meeting `qoe >= requirement`.
pub fn grid_oracle(
    env: &dyn Environment,
    state: &NetworkState,
    requirement: f64,
    threshold_ms: f64,
    duration_s: f64,
    run_seed: u64,
) -> Result<(OracleResult, Vec<GridPoint>)> {
    let seed = seed::derive(
        run_seed,
        stage::ORACLE,
        state.traffic as u64,
        0,
        purpose::ORACLE,
    );
    let points: Vec<GridPoint> = grid_actions()
        .par_iter()
        .map(|a| {
            let trace = env.measure(a, state, duration_s, seed)?;
            Ok(GridPoint {
                action: *a,
                usage: resource_usage(a),
                qoe: qoe(&trace, threshold_ms)?,
            })
        })
        .collect::<Result<_>>()?;
    let feasible: Vec<&GridPoint> = points.iter().filter(|p| p.qoe >= requirement).collect();
    let best = feasible
        .iter()
        .copied()
        .min_by(|a, b| a.usage.total_cmp(&b.usage).then(b.qoe.total_cmp(&a.qoe)))
        .ok_or_else(|| Error::Infeasible {
            best_qoe: points.iter().map(|p| p.qoe).fold(0.0, f64::max),
            requirement,
        })?;
    Ok((
        OracleResult {
            action: best.action,
            usage: best.usage,
            qoe: best.qoe,
            traffic: state.traffic,
            requirement,
            threshold_ms,
            feasible: feasible.len(),
            evaluated: points.len(),
        },
        points,
    ))
}
