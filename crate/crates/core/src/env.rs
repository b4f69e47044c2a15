//! The query interface shared by every stage and baseline.

use crate::error::Result;
use crate::slicesim::{
    ConfigAction, Engine, LatencyTrace, NetworkState, RealTwin, SimulationParams,
};

/// Anything that turns a configuration into a latency trace.
pub trait Environment: Sync {
    fn measure(
        &self,
        action: &ConfigAction,
        state: &NetworkState,
        duration_s: f64,
        seed: u64,
    ) -> Result<LatencyTrace>;
}

impl Environment for RealTwin {
    fn measure(
        &self,
        action: &ConfigAction,
        state: &NetworkState,
        duration_s: f64,
        seed: u64,
    ) -> Result<LatencyTrace> {
        self.query(action, state, duration_s, seed)
    }
}

/// The simulator pinned to one parameter vector.
#[derive(Debug, Clone)]
pub struct SimEnv {
    pub engine: Engine,
    pub params: SimulationParams,
}

impl SimEnv {
    pub fn new(engine: Engine, params: SimulationParams) -> Self {
        SimEnv { engine, params }
    }
}

impl Environment for SimEnv {
    fn measure(
        &self,
        action: &ConfigAction,
        state: &NetworkState,
        duration_s: f64,
        seed: u64,
    ) -> Result<LatencyTrace> {
        self.engine
            .simulate(&self.params, action, state, duration_s, seed)
    }
}
