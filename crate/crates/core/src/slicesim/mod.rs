//! Slice simulator and the hidden-parameter real twin.

pub mod engine;
pub mod params;
pub mod trace;
pub mod twin;

pub use engine::{Engine, EngineConfig};
pub use params::{
    ConfigAction, NetworkState, ParamBox, SimulationParams, ACTION_DIM, ACTION_MAX, MAX_TRAFFIC,
    PARAM_DIM,
};
pub use trace::{Breakdown, FrameRecord, LatencyTrace};
pub use twin::RealTwin;
