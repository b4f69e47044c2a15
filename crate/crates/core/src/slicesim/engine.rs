//! Discrete-event model of one end-to-end slice.
//!
//! A closed population of `traffic` frames circulates through
//! loading (UE) -> uplink radio -> backhaul -> edge compute -> downlink radio.
//! Radio links, the backhaul link and the edge CPU are single FIFO servers;
//! loading and backhaul propagation are pure delays. When a frame's result
//! arrives back at the UE the next frame is generated at the same instant,
//! so the number of frames in flight never changes.
//!
//! Randomness is drawn per frame, in frame-id order, from one stream per
//! purpose. Two runs with the same seed therefore see the same frame sizes
//! and compute demands even when their parameters differ.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{ConfigAction, NetworkState, ParamBox, SimulationParams};
use super::trace::{Breakdown, FrameRecord, LatencyTrace};
use crate::error::{Error, Result};
use crate::seed;

const STREAM_SIZE: u64 = 0x51;
const STREAM_COMPUTE: u64 = 0x52;

/// Fixed engine conventions (not searched).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub tx_power_dbm: f64,
    /// Thermal noise over one PRB, dBm.
    pub noise_floor_dbm: f64,
    pub pathloss_exponent: f64,
    pub prb_bandwidth_hz: f64,
    pub min_efficiency: f64,
    pub max_efficiency: f64,
    /// An MCS offset of `mcs_span` would zero the spectral efficiency.
    pub mcs_span: f64,
    pub ul_size_mean_kb: f64,
    pub ul_size_std_kb: f64,
    pub ul_size_min_kb: f64,
    pub dl_size_kb: f64,
    /// Bits per "kb" of payload. Frame sizes are kilobytes.
    pub bits_per_kb: f64,
    pub backhaul_base_delay_ms: f64,
    pub backhaul_min_rate_mbps: f64,
    pub backhaul_max_mbps: f64,
    pub compute_mean_ms: f64,
    pub compute_std_ms: f64,
    pub compute_min_ms: f64,
    pub cpu_ratio_floor: f64,
    pub loading_base_ms: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            tx_power_dbm: 23.0,
            noise_floor_dbm: -101.4,
            pathloss_exponent: 3.0,
            prb_bandwidth_hz: 180e3,
            min_efficiency: 0.15,
            max_efficiency: 5.55,
            mcs_span: 15.0,
            ul_size_mean_kb: 28.8,
            ul_size_std_kb: 9.9,
            ul_size_min_kb: 1.0,
            dl_size_kb: 4.0,
            bits_per_kb: 8000.0,
            backhaul_base_delay_ms: 1.0,
            backhaul_min_rate_mbps: 1.0,
            backhaul_max_mbps: 100.0,
            compute_mean_ms: 81.0,
            compute_std_ms: 35.0,
            compute_min_ms: 1.0,
            cpu_ratio_floor: 0.05,
            loading_base_ms: 5.0,
        }
    }
}

/// Per-query constants derived from (params, action, state).
#[derive(Debug, Clone, Copy)]
pub struct LinkBudget {
    pub ul_rate_bps: f64,
    pub dl_rate_bps: f64,
    pub backhaul_rate_bps: f64,
    pub backhaul_delay_ms: f64,
    pub loading_ms: f64,
    pub cpu_ratio: f64,
    pub compute_extra_ms: f64,
}

impl EngineConfig {
    pub fn pathloss_db(&self, params: &SimulationParams, distance_m: f64) -> f64 {
        params.baseline_loss + 10.0 * self.pathloss_exponent * distance_m.max(1.0).log10()
    }

    /// Spectral efficiency in bits/s/Hz.
    pub fn efficiency(&self, snr_db: f64, mcs_offset: f64) -> f64 {
        let snr = 10f64.powf(snr_db / 10.0);
        let eff = (1.0 + snr).log2() * (1.0 - mcs_offset / self.mcs_span);
        eff.clamp(self.min_efficiency, self.max_efficiency)
    }

    pub fn link_budget(
        &self,
        params: &SimulationParams,
        action: &ConfigAction,
        state: &NetworkState,
    ) -> LinkBudget {
        let pl = self.pathloss_db(params, state.distance_m);
        let snr_ul = self.tx_power_dbm - pl - self.noise_floor_dbm - params.enb_noise_figure;
        let snr_dl = self.tx_power_dbm - pl - self.noise_floor_dbm - params.ue_noise_figure;
        let ul_rate_bps = action.effective_prb_ul()
            * self.prb_bandwidth_hz
            * self.efficiency(snr_ul, action.mcs_offset_ul);
        let dl_rate_bps = action.effective_prb_dl()
            * self.prb_bandwidth_hz
            * self.efficiency(snr_dl, action.mcs_offset_dl);
        let bh_mbps = (action.backhaul_bw.min(self.backhaul_max_mbps) + params.backhaul_bw_extra)
            .max(self.backhaul_min_rate_mbps);
        LinkBudget {
            ul_rate_bps,
            dl_rate_bps,
            backhaul_rate_bps: bh_mbps * 1e6,
            backhaul_delay_ms: self.backhaul_base_delay_ms + params.backhaul_delay_extra,
            loading_ms: self.loading_base_ms + params.loading_time_extra,
            cpu_ratio: action.cpu_ratio.max(self.cpu_ratio_floor),
            compute_extra_ms: params.compute_time_extra,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Hop {
    Loading,
    Uplink,
    Backhaul,
    Compute,
    Downlink,
    Done,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    t: f64,
    seq: u64,
    frame: usize,
    hop: Hop,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Frame {
    ul_bits: f64,
    compute_demand_ms: f64,
    parts: Breakdown,
}

/// The slice simulator. Stateless between queries.
#[derive(Debug, Clone, Default)]
pub struct Engine {
    pub config: EngineConfig,
    pub bounds: ParamBox,
}

impl Engine {
    pub fn new(config: EngineConfig, bounds: ParamBox) -> Self {
        Engine { config, bounds }
    }

    /// Run one closed-loop query of `duration_s` simulated seconds.
    pub fn simulate(
        &self,
        params: &SimulationParams,
        action: &ConfigAction,
        state: &NetworkState,
        duration_s: f64,
        seed: u64,
    ) -> Result<LatencyTrace> {
        self.bounds.check(params)?;
        action.check()?;
        state.check()?;
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "duration_s must be positive, got {duration_s}"
            )));
        }
        let cfg = &self.config;
        let budget = cfg.link_budget(params, action, state);
        let horizon_ms = duration_s * 1000.0;

        let mut size_rng = seed::substream(seed, STREAM_SIZE);
        let mut compute_rng = seed::substream(seed, STREAM_COMPUTE);
        let dl_bits = cfg.dl_size_kb * cfg.bits_per_kb;

        let mut frames: Vec<Frame> = Vec::new();
        let mut heap = BinaryHeap::new();
        let mut seq = 0u64;
        let mut push = |heap: &mut BinaryHeap<Event>, t: f64, frame: usize, hop: Hop| {
            heap.push(Event { t, seq, frame, hop });
            seq += 1;
        };
        let mut spawn = |frames: &mut Vec<Frame>| -> usize {
            let kb = truncated_normal(
                &mut size_rng,
                cfg.ul_size_mean_kb,
                cfg.ul_size_std_kb,
                cfg.ul_size_min_kb,
            );
            let demand = {
                let z: f64 = compute_rng.sample(StandardNormal);
                (cfg.compute_mean_ms + cfg.compute_std_ms * z).max(cfg.compute_min_ms)
            };
            frames.push(Frame {
                ul_bits: kb * cfg.bits_per_kb,
                compute_demand_ms: demand,
                parts: Breakdown::default(),
            });
            frames.len() - 1
        };

        for _ in 0..state.traffic {
            let id = spawn(&mut frames);
            push(&mut heap, 0.0, id, Hop::Loading);
        }

        let (mut ul_busy, mut bh_busy, mut cpu_busy, mut dl_busy) =
            (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut done = Vec::new();

        while let Some(ev) = heap.pop() {
            if ev.t > horizon_ms {
                break;
            }
            let t = ev.t;
            let f = ev.frame;
            match ev.hop {
                Hop::Loading => {
                    frames[f].parts.loading = budget.loading_ms;
                    push(&mut heap, t + budget.loading_ms, f, Hop::Uplink);
                }
                Hop::Uplink => {
                    let tx = frames[f].ul_bits / budget.ul_rate_bps * 1000.0;
                    let end = t.max(ul_busy) + tx;
                    ul_busy = end;
                    frames[f].parts.ul_tx = end - t;
                    push(&mut heap, end, f, Hop::Backhaul);
                }
                Hop::Backhaul => {
                    let ser = frames[f].ul_bits / budget.backhaul_rate_bps * 1000.0;
                    let sent = t.max(bh_busy) + ser;
                    bh_busy = sent;
                    let arrive = sent + budget.backhaul_delay_ms;
                    frames[f].parts.backhaul = arrive - t;
                    push(&mut heap, arrive, f, Hop::Compute);
                }
                Hop::Compute => {
                    let service =
                        frames[f].compute_demand_ms / budget.cpu_ratio + budget.compute_extra_ms;
                    let start = t.max(cpu_busy);
                    let end = start + service;
                    cpu_busy = end;
                    frames[f].parts.queueing = start - t;
                    frames[f].parts.compute = service;
                    push(&mut heap, end, f, Hop::Downlink);
                }
                Hop::Downlink => {
                    let tx = dl_bits / budget.dl_rate_bps * 1000.0;
                    let end = t.max(dl_busy) + tx;
                    dl_busy = end;
                    frames[f].parts.dl_tx = end - t;
                    push(&mut heap, end, f, Hop::Done);
                }
                Hop::Done => {
                    done.push(FrameRecord::new(f as u64, t, frames[f].parts));
                    let id = spawn(&mut frames);
                    push(&mut heap, t, id, Hop::Loading);
                }
            }
        }

        Ok(LatencyTrace::new(duration_s, done))
    }
}

/// Normal(mean, std) truncated below at `min`, by rejection.
fn truncated_normal(rng: &mut seed::Rng, mean: f64, std: f64, min: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let v = mean + std * z;
        if v >= min {
            return v;
        }
    }
}
