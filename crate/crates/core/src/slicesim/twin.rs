//! Stand-in for the physical network: the same engine run with hidden
//! parameters, plus per-frame multiplicative log-normal noise that no
//! simulator parameter can reproduce.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use super::engine::Engine;
use super::params::{ConfigAction, NetworkState, SimulationParams};
use super::trace::{FrameRecord, LatencyTrace};
use crate::error::{Error, Result};
use crate::seed;

const STREAM_RESIDUAL: u64 = 0x61;

pub const DEFAULT_SIGMA_RES: f64 = 0.05;

/// Query-only handle on the "real" network. The hidden parameters are not
/// exposed; stage algorithms can only observe traces.
#[derive(Debug, Clone)]
pub struct RealTwin {
    engine: Engine,
    hidden: SimulationParams,
    sigma_res: f64,
}

impl RealTwin {
    pub fn new(engine: Engine, hidden: SimulationParams, sigma_res: f64) -> Result<Self> {
        engine.bounds.check(&hidden)?;
        if !(sigma_res >= 0.0 && sigma_res.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_res must be non-negative, got {sigma_res}"
            )));
        }
        Ok(RealTwin {
            engine,
            hidden,
            sigma_res,
        })
    }

    /// The default twin: hidden parameters from the best searched set and
    /// 5% residual noise.
    pub fn default_twin() -> Self {
        Self::new(
            Engine::default(),
            SimulationParams::DEFAULT_TWIN,
            DEFAULT_SIGMA_RES,
        )
        .expect("default twin is valid")
    }

    pub fn sigma_res(&self) -> f64 {
        self.sigma_res
    }

    /// One measurement of the real network.
    pub fn query(
        &self,
        action: &ConfigAction,
        state: &NetworkState,
        duration_s: f64,
        seed: u64,
    ) -> Result<LatencyTrace> {
        let base = self
            .engine
            .simulate(&self.hidden, action, state, duration_s, seed)?;
        if self.sigma_res == 0.0 {
            return Ok(base);
        }
        let mut rng = seed::substream(seed, STREAM_RESIDUAL);
        let frames = base
            .frames
            .into_iter()
            .map(|f| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let k = (self.sigma_res * z).exp();
                FrameRecord::new(f.frame_id, f.t_done_ms, f.parts.scaled(k))
            })
            .collect();
        Ok(LatencyTrace::new(base.duration_s, frames))
    }

    /// Collect the frozen reference trace used by the parameter search and
    /// persist it to `path`.
    pub fn collect_reference(
        &self,
        state: &NetworkState,
        action: &ConfigAction,
        duration_s: f64,
        seed: u64,
        path: Option<&Path>,
    ) -> Result<LatencyTrace> {
        let trace = self.query(action, state, duration_s, seed)?;
        if let Some(p) = path {
            trace.save(p)?;
        }
        Ok(trace)
    }

    /// Hidden parameters, for harness-side reporting only.
    pub fn reveal(&self) -> SimulationParams {
        self.hidden
    }
}
