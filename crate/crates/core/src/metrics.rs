//! Scalar objectives: sim-to-real discrepancy, QoE, resource usage, the
//! Lagrangian and its multiplier update, and regret bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slicesim::{ConfigAction, LatencyTrace, ParamBox, SimulationParams, ACTION_DIM};

/// Shared-bin histogram estimator of `KL(real || sim)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimator {
    pub bins: usize,
    /// Upper edge of the last regular bin; larger samples land in the last bin.
    pub latency_cap_ms: f64,
    /// Added to every bin's probability mass before renormalizing.
    pub smoothing: f64,
}

impl Default for KlEstimator {
    fn default() -> Self {
        KlEstimator {
            bins: 60,
            latency_cap_ms: 2000.0,
            smoothing: 1e-6,
        }
    }
}

impl KlEstimator {
    pub fn histogram(&self, samples: &[f64]) -> Vec<f64> {
        let width = self.latency_cap_ms / self.bins as f64;
        let mut counts = vec![0.0; self.bins];
        for &x in samples {
            let idx = if x.is_finite() && x > 0.0 {
                ((x / width) as usize).min(self.bins - 1)
            } else if x.is_finite() {
                0
            } else {
                self.bins - 1
            };
            counts[idx] += 1.0;
        }
        let n = samples.len() as f64;
        let total = 1.0 + self.smoothing * self.bins as f64;
        counts
            .into_iter()
            .map(|c| (c / n + self.smoothing) / total)
            .collect()
    }

    pub fn divergence_samples(&self, real: &[f64], sim: &[f64]) -> Result<f64> {
        if real.is_empty() {
            return Err(Error::Empty("real trace"));
        }
        if sim.is_empty() {
            return Err(Error::Empty("simulated trace"));
        }
        let p = self.histogram(real);
        let q = self.histogram(sim);
        let kl: f64 = p
            .iter()
            .zip(q.iter())
            .map(|(&pi, &qi)| pi * (pi / qi).ln())
            .sum();
        Ok(kl.max(0.0))
    }

    pub fn divergence(&self, real: &LatencyTrace, sim: &LatencyTrace) -> Result<f64> {
        self.divergence_samples(&real.samples(), &sim.samples())
    }
}

/// `KL(real || sim)` with the default estimator.
pub fn kl_divergence(real: &LatencyTrace, sim: &LatencyTrace) -> Result<f64> {
    KlEstimator::default().divergence(real, sim)
}

/// KL plus `alpha` times the normalized parameter distance from `x_hat`.
pub fn weighted_discrepancy(
    kl: f64,
    x: &SimulationParams,
    x_hat: &SimulationParams,
    alpha: f64,
    bounds: &ParamBox,
) -> f64 {
    kl + alpha * bounds.distance(x, x_hat)
}

/// Fraction of frames whose latency is at or below `threshold_ms`.
pub fn qoe(trace: &LatencyTrace, threshold_ms: f64) -> Result<f64> {
    qoe_samples(&trace.samples(), threshold_ms)
}

pub fn qoe_samples(samples: &[f64], threshold_ms: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("trace"));
    }
    let ok = samples.iter().filter(|&&x| x <= threshold_ms).count();
    Ok(ok as f64 / samples.len() as f64)
}

/// Mean normalized allocation, `(1/6) * sum(a_i / A_i)`.
pub fn resource_usage(action: &ConfigAction) -> f64 {
    action.normalized().iter().sum::<f64>() / ACTION_DIM as f64
}

/// `usage - lambda * (qoe - E)`.
pub fn lagrangian(usage: f64, qoe_est: f64, lambda: f64, requirement: f64) -> f64 {
    usage - lambda * (qoe_est - requirement)
}

/// Projected sub-gradient step on the multiplier:
/// `[lambda - eps * (qoe - E)]^+`.
///
/// A step smaller than half an ulp of `lambda` would round away, so the
/// result is nudged one ulp in the step's direction to keep the sign law.
pub fn dual_update(lambda: f64, qoe: f64, requirement: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0);
    let next = (lambda - eps * (qoe - requirement)).max(0.0);
    if qoe < requirement && next <= lambda {
        lambda.next_up()
    } else if qoe > requirement && lambda > 0.0 && next >= lambda {
        lambda.next_down().max(0.0)
    } else {
        next
    }
}

/// Usage and QoE of the reference (optimal) policy regrets are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptimum {
    pub usage: f64,
    pub qoe: f64,
}

/// Cumulative usage and QoE regret of one online run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretTracker {
    pub reference: Option<ReferenceOptimum>,
    /// Cumulative usage regret after each online iteration.
    pub usage: Vec<f64>,
    /// Cumulative QoE regret after each online iteration.
    pub qoe: Vec<f64>,
}

impl RegretTracker {
    pub fn new(reference: ReferenceOptimum) -> Self {
        RegretTracker {
            reference: Some(reference),
            usage: Vec::new(),
            qoe: Vec::new(),
        }
    }

    /// Record one online iteration.
    pub fn update(&mut self, usage: f64, qoe: f64) -> Result<()> {
        let r = self.reference.ok_or_else(|| {
            Error::InvalidArgument("regret update without a reference optimum".into())
        })?;
        let gu = self.usage.last().copied().unwrap_or(0.0) + (usage - r.usage);
        let gp = self.qoe.last().copied().unwrap_or(0.0) + (r.qoe - qoe).max(0.0);
        self.usage.push(gu);
        self.qoe.push(gp);
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.usage.len()
    }

    /// Average usage regret after the latest iteration.
    pub fn average_usage(&self) -> f64 {
        self.usage
            .last()
            .map_or(0.0, |g| g / self.usage.len() as f64)
    }

    pub fn average_qoe(&self) -> f64 {
        self.qoe.last().map_or(0.0, |g| g / self.qoe.len() as f64)
    }

    /// `(iteration, avg usage regret, avg QoE regret)` for every iteration.
    pub fn averages(&self) -> Vec<(usize, f64, f64)> {
        self.usage
            .iter()
            .zip(self.qoe.iter())
            .enumerate()
            .map(|(i, (gu, gp))| (i, gu / (i + 1) as f64, gp / (i + 1) as f64))
            .collect()
    }
}
