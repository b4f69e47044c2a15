//! Simulator parameters, slice configuration actions and network state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PARAM_DIM: usize = 7;
pub const ACTION_DIM: usize = 6;

pub const PARAM_NAMES: [&str; PARAM_DIM] = [
    "baseline_loss",
    "enb_noise_figure",
    "ue_noise_figure",
    "backhaul_bw_extra",
    "backhaul_delay_extra",
    "compute_time_extra",
    "loading_time_extra",
];

pub const ACTION_NAMES: [&str; ACTION_DIM] = [
    "bandwidth_ul",
    "bandwidth_dl",
    "mcs_offset_ul",
    "mcs_offset_dl",
    "backhaul_bw",
    "cpu_ratio",
];

/// Upper bounds `A` of the configuration space; every lower bound is 0.
pub const ACTION_MAX: [f64; ACTION_DIM] = [50.0, 50.0, 10.0, 10.0, 100.0, 1.0];

/// Minimum PRBs granted regardless of the configured share.
pub const MIN_PRB_UL: f64 = 6.0;
pub const MIN_PRB_DL: f64 = 3.0;

/// The seven tunable simulator parameters.
///
/// Loss and noise figures are in dB; the four `*_extra` fields are additive
/// offsets (Mbps for the backhaul bandwidth, ms otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationParams {
    pub baseline_loss: f64,
    pub enb_noise_figure: f64,
    pub ue_noise_figure: f64,
    pub backhaul_bw_extra: f64,
    pub backhaul_delay_extra: f64,
    pub compute_time_extra: f64,
    pub loading_time_extra: f64,
}

impl SimulationParams {
    /// Stock simulator settings before any search.
    pub const ORIGINAL: SimulationParams = SimulationParams {
        baseline_loss: 38.57,
        enb_noise_figure: 5.0,
        ue_noise_figure: 9.0,
        backhaul_bw_extra: 0.0,
        backhaul_delay_extra: 0.0,
        compute_time_extra: 0.0,
        loading_time_extra: 0.0,
    };

    /// Hidden parameters of the default real twin.
    pub const DEFAULT_TWIN: SimulationParams = SimulationParams {
        baseline_loss: 38.76,
        enb_noise_figure: 0.68,
        ue_noise_figure: 8.93,
        backhaul_bw_extra: 5.03,
        backhaul_delay_extra: 8.93,
        compute_time_extra: 2.16,
        loading_time_extra: 3.10,
    };

    pub fn from_array(v: [f64; PARAM_DIM]) -> Self {
        SimulationParams {
            baseline_loss: v[0],
            enb_noise_figure: v[1],
            ue_noise_figure: v[2],
            backhaul_bw_extra: v[3],
            backhaul_delay_extra: v[4],
            compute_time_extra: v[5],
            loading_time_extra: v[6],
        }
    }

    pub fn to_array(&self) -> [f64; PARAM_DIM] {
        [
            self.baseline_loss,
            self.enb_noise_figure,
            self.ue_noise_figure,
            self.backhaul_bw_extra,
            self.backhaul_delay_extra,
            self.compute_time_extra,
            self.loading_time_extra,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; PARAM_DIM] = v.try_into().map_err(|_| {
            Error::InvalidArgument(format!(
                "simulation params need {PARAM_DIM} values, got {}",
                v.len()
            ))
        })?;
        Ok(Self::from_array(arr))
    }
}

/// Box bounds on [`SimulationParams`], used for validation and for the
/// affine map onto `[0,1]^7`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lo: [f64; PARAM_DIM],
    pub hi: [f64; PARAM_DIM],
}

impl Default for ParamBox {
    fn default() -> Self {
        ParamBox {
            lo: [30.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            hi: [50.0, 13.0, 13.0, 20.0, 20.0, 20.0, 20.0],
        }
    }
}

impl ParamBox {
    pub fn new(lo: [f64; PARAM_DIM], hi: [f64; PARAM_DIM]) -> Result<Self> {
        for i in 0..PARAM_DIM {
            if !(lo[i].is_finite() && hi[i].is_finite() && lo[i] < hi[i]) {
                return Err(Error::InvalidArgument(format!(
                    "bad bounds for {}: [{}, {}]",
                    PARAM_NAMES[i], lo[i], hi[i]
                )));
            }
        }
        Ok(ParamBox { lo, hi })
    }

    pub fn check(&self, p: &SimulationParams) -> Result<()> {
        for (i, v) in p.to_array().into_iter().enumerate() {
            if !(v >= self.lo[i] && v <= self.hi[i]) {
                return Err(Error::Range {
                    field: PARAM_NAMES[i],
                    value: v,
                    lo: self.lo[i],
                    hi: self.hi[i],
                });
            }
        }
        Ok(())
    }

    pub fn normalize(&self, p: &SimulationParams) -> [f64; PARAM_DIM] {
        let v = p.to_array();
        std::array::from_fn(|i| (v[i] - self.lo[i]) / (self.hi[i] - self.lo[i]))
    }

    pub fn denormalize(&self, u: &[f64; PARAM_DIM]) -> SimulationParams {
        SimulationParams::from_array(std::array::from_fn(|i| {
            self.lo[i] + u[i] * (self.hi[i] - self.lo[i])
        }))
    }

    /// Euclidean distance between two parameter vectors in normalized units.
    pub fn distance(&self, a: &SimulationParams, b: &SimulationParams) -> f64 {
        let (ua, ub) = (self.normalize(a), self.normalize(b));
        ua.iter()
            .zip(ub.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

/// One slice configuration. PRB counts and MCS offsets are kept continuous;
/// the engine's rate model is linear in them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigAction {
    pub bandwidth_ul: f64,
    pub bandwidth_dl: f64,
    pub mcs_offset_ul: f64,
    pub mcs_offset_dl: f64,
    pub backhaul_bw: f64,
    pub cpu_ratio: f64,
}

impl ConfigAction {
    pub const FULL: ConfigAction = ConfigAction {
        bandwidth_ul: 50.0,
        bandwidth_dl: 50.0,
        mcs_offset_ul: 0.0,
        mcs_offset_dl: 0.0,
        backhaul_bw: 100.0,
        cpu_ratio: 1.0,
    };

    pub fn new(v: [f64; ACTION_DIM]) -> Result<Self> {
        let a = Self::from_array(v);
        a.check()?;
        Ok(a)
    }

    pub fn from_array(v: [f64; ACTION_DIM]) -> Self {
        ConfigAction {
            bandwidth_ul: v[0],
            bandwidth_dl: v[1],
            mcs_offset_ul: v[2],
            mcs_offset_dl: v[3],
            backhaul_bw: v[4],
            cpu_ratio: v[5],
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; ACTION_DIM] = v.try_into().map_err(|_| {
            Error::InvalidArgument(format!("actions need {ACTION_DIM} values, got {}", v.len()))
        })?;
        Self::new(arr)
    }

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [
            self.bandwidth_ul,
            self.bandwidth_dl,
            self.mcs_offset_ul,
            self.mcs_offset_dl,
            self.backhaul_bw,
            self.cpu_ratio,
        ]
    }

    pub fn check(&self) -> Result<()> {
        for (i, v) in self.to_array().into_iter().enumerate() {
            if !(v >= 0.0 && v <= ACTION_MAX[i]) {
                return Err(Error::Range {
                    field: ACTION_NAMES[i],
                    value: v,
                    lo: 0.0,
                    hi: ACTION_MAX[i],
                });
            }
        }
        Ok(())
    }

    /// `a / A`, each coordinate in `[0,1]`.
    pub fn normalized(&self) -> [f64; ACTION_DIM] {
        let v = self.to_array();
        std::array::from_fn(|i| v[i] / ACTION_MAX[i])
    }

    pub fn from_normalized(u: &[f64; ACTION_DIM]) -> Self {
        Self::from_array(std::array::from_fn(|i| {
            (u[i] * ACTION_MAX[i]).clamp(0.0, ACTION_MAX[i])
        }))
    }

    pub fn effective_prb_ul(&self) -> f64 {
        self.bandwidth_ul.max(MIN_PRB_UL)
    }

    pub fn effective_prb_dl(&self) -> f64 {
        self.bandwidth_dl.max(MIN_PRB_DL)
    }
}

/// Network state observed at the start of a configuration interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    /// Concurrent on-the-fly frames, 1..=4.
    pub traffic: u32,
    /// UE to eNB line-of-sight distance in meters.
    pub distance_m: f64,
}

pub const MAX_TRAFFIC: u32 = 4;

impl NetworkState {
    pub fn new(traffic: u32) -> Self {
        NetworkState {
            traffic,
            distance_m: 1.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.traffic < 1 || self.traffic > MAX_TRAFFIC {
            return Err(Error::Range {
                field: "traffic",
                value: self.traffic as f64,
                lo: 1.0,
                hi: MAX_TRAFFIC as f64,
            });
        }
        if !(self.distance_m > 0.0 && self.distance_m.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "distance_m must be positive, got {}",
                self.distance_m
            )));
        }
        Ok(())
    }
}

impl Default for NetworkState {
    fn default() -> Self {
        Self::new(1)
    }
}
