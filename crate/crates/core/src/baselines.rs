//! Comparison methods for the online stage. All of them query the real
//! network directly through [`Environment`], write the same ledger rows as
//! the online stage and measure regret against the same reference optimum.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::bnn::BnnModel;
use crate::candidates::{self, PoolSpec};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::gp::{GpHyper, GpModel};
use crate::ledger::{Kind, LedgerRow, LedgerWriter, RunLedger};
use crate::metrics::{dual_update, qoe, resource_usage, ReferenceOptimum, RegretTracker};
use crate::seed::{self, purpose, stage};
use crate::slicesim::{ConfigAction, NetworkState, ACTION_DIM};
use crate::stage2::{policy_input, POLICY_DIM};
use crate::stage3::residual_input;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    GpEi,
    GpUcb,
    OfflineFilter,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GpEi => "gp-ei",
            Method::GpUcb => "gp-ucb",
            Method::OfflineFilter => "offline-filter",
        }
    }

    /// Numeric tag mixed into seeds so methods never share streams.
    fn tag(self) -> u64 {
        match self {
            Method::GpEi => 1,
            Method::GpUcb => 2,
            Method::OfflineFilter => 3,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp-ei" => Ok(Method::GpEi),
            "gp-ucb" => Ok(Method::GpUcb),
            "offline-filter" => Ok(Method::OfflineFilter),
            other => Err(Error::InvalidArgument(format!(
                "unknown baseline `{other}` (expected gp-ei, gp-ucb or offline-filter)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub iterations: usize,
    pub requirement: f64,
    pub threshold_ms: f64,
    pub y_max_ms: f64,
    pub eps: f64,
    pub traffic: u32,
    pub duration_s: f64,
    pub pool: PoolSpec,
    pub gp: GpHyper,
    pub top_k: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            iterations: 100,
            requirement: 0.9,
            threshold_ms: 300.0,
            y_max_ms: 2000.0,
            eps: 0.1,
            traffic: 1,
            duration_s: 60.0,
            pool: PoolSpec::default(),
            gp: GpHyper::default(),
            top_k: 5,
        }
    }
}

impl BaselineConfig {
    pub fn check(&self) -> Result<()> {
        if self.iterations == 0 || self.pool.size == 0 {
            return Err(Error::Config(
                "baseline iterations and pool size must be >= 1".into(),
            ));
        }
        if !(self.eps > 0.0) || !(self.threshold_ms > 0.0) || !(self.duration_s > 0.0) {
            return Err(Error::Config(
                "baseline needs eps, threshold_ms and duration_s > 0".into(),
            ));
        }
        NetworkState::new(self.traffic)
            .check()
            .map_err(|e| Error::Config(format!("baseline traffic: {e}")))?;
        self.gp.check()
    }
}

/// Expected improvement of a minimization candidate with predictive
/// `(mean, std)` over the incumbent value `best`.
pub fn expected_improvement(best: f64, mean: f64, std: f64) -> f64 {
    let gain = best - mean;
    if std <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / std;
    let n = Normal::standard();
    (gain * n.cdf(z) + std * n.pdf(z)).max(0.0)
}

/// Deterministic GP-UCB exploration weight `2 ln(n^2 pi^2 / (6 delta))`
/// with `delta = 0.1`.
pub fn ucb_beta(n: usize) -> f64 {
    let n = n.max(1) as f64;
    2.0 * (n * n * std::f64::consts::PI.powi(2) / 6.0 / 0.1).ln()
}

/// Acquisition rule of [`gp_minimize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acquisition {
    ExpectedImprovement,
    /// Lower confidence bound with the [`ucb_beta`] schedule.
    LowerBound,
}

/// Plain GP minimization of a black box on `[0,1]^d`, for checking the
/// acquisition machinery on synthetic problems. The first point is uniform.
pub fn gp_minimize(
    f: &mut dyn FnMut(&[f64]) -> f64,
    dim: usize,
    iterations: usize,
    pool_size: usize,
    hyper: GpHyper,
    acquisition: Acquisition,
    seed_: u64,
) -> Result<(Vec<f64>, f64)> {
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for it in 0..iterations {
        let mut rng = seed::rng(seed::derive(
            seed_,
            stage::BASELINE,
            it as u64,
            0,
            purpose::CANDIDATES,
        ));
        let pool: Vec<Vec<f64>> = (0..pool_size.max(1))
            .map(|_| {
                (0..dim)
                    .map(|_| rand::Rng::random_range(&mut rng, 0.0..=1.0))
                    .collect()
            })
            .collect();
        let x = if xs.is_empty() {
            pool[0].clone()
        } else {
            let gp = GpModel::fit(&xs, &ys, hyper)?;
            let best = ys.iter().copied().fold(f64::INFINITY, f64::min);
            let score = |p: &Vec<f64>| {
                let (m, s) = gp.predict(p);
                match acquisition {
                    Acquisition::ExpectedImprovement => expected_improvement(best, m, s),
                    Acquisition::LowerBound => -(m - ucb_beta(it).sqrt() * s),
                }
            };
            pool.iter()
                .map(|p| (score(p), p))
                .fold(
                    (f64::NEG_INFINITY, &pool[0]),
                    |a, b| if b.0 > a.0 { b } else { a },
                )
                .1
                .clone()
        };
        ys.push(f(&x));
        xs.push(x);
    }
    let i = (0..ys.len())
        .min_by(|&a, &b| ys[a].total_cmp(&ys[b]))
        .ok_or(Error::Empty("GP run"))?;
    Ok((xs[i].clone(), ys[i]))
}

/// What a baseline run leaves behind.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub method: Method,
    pub actions: Vec<ConfigAction>,
    pub qoes: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub ledger: RunLedger,
}

impl BaselineRun {
    /// Mean usage over iterations whose QoE met `requirement`.
    pub fn feasible_mean_usage(&self, requirement: f64) -> Option<f64> {
        let u: Vec<f64> = self
            .actions
            .iter()
            .zip(&self.qoes)
            .filter(|(_, q)| **q >= requirement)
            .map(|(a, _)| resource_usage(a))
            .collect();
        (!u.is_empty()).then(|| u.iter().sum::<f64>() / u.len() as f64)
    }
}

struct Runner<'a> {
    env: &'a dyn Environment,
    cfg: &'a BaselineConfig,
    method: Method,
    run_seed: u64,
    run: BaselineRun,
    sink: Option<&'a mut LedgerWriter>,
}

impl Runner<'_> {
    fn derive(&self, iter: usize, tag: u64) -> u64 {
        seed::derive(
            self.run_seed,
            stage::BASELINE,
            iter as u64,
            self.method.tag(),
            tag,
        )
    }

    fn pool(&self, iter: usize, centers: &[[f64; ACTION_DIM]]) -> Vec<[f64; ACTION_DIM]> {
        let mut rng = seed::rng(self.derive(iter, purpose::CANDIDATES));
        candidates::box_pool(&self.cfg.pool, centers, &mut rng)
    }

    /// Apply `action` to the network and record the result.
    fn apply(
        &mut self,
        iter: usize,
        action: ConfigAction,
        lambda: f64,
        beta: Option<f64>,
    ) -> Result<f64> {
        let cfg = self.cfg;
        let s = self.derive(iter, purpose::REAL);
        let trace = self
            .env
            .measure(&action, &NetworkState::new(cfg.traffic), cfg.duration_s, s)
            .map_err(|e| Error::Query {
                context: format!(
                    "{} query at action {:?}",
                    self.method.name(),
                    action.to_array()
                ),
                source: Box::new(e),
            })?;
        let q = qoe(&trace, cfg.threshold_ms)?;
        let usage = resource_usage(&action);
        self.run.ledger.regret.update(usage, q)?;
        let row = LedgerRow {
            iter: iter as u64,
            stage: 3,
            kind: Kind::Online,
            x_or_a: action.to_array().to_vec(),
            usage: Some(usage),
            qoe: Some(q),
            kl: None,
            lambda: Some(lambda),
            beta,
            seed: s,
        };
        if let Some(w) = self.sink.as_deref_mut() {
            w.append(&row)?;
        }
        self.run.ledger.push(row)?;
        self.run.actions.push(action);
        self.run.qoes.push(q);
        self.run.lambdas.push(lambda);
        Ok(q)
    }

    /// Observed actions ranked by the current Lagrangian, best first.
    fn centers(&self, lambda: f64) -> Vec<[f64; ACTION_DIM]> {
        let cfg = self.cfg;
        let mut idx: Vec<usize> = (0..self.run.actions.len()).collect();
        let l = |i: usize| {
            resource_usage(&self.run.actions[i]) - lambda * (self.run.qoes[i] - cfg.requirement)
        };
        idx.sort_by(|&a, &b| l(a).total_cmp(&l(b)));
        idx.iter()
            .take(cfg.top_k)
            .map(|&i| self.run.actions[i].normalized())
            .collect()
    }
}

fn start(method: Method, cfg: &BaselineConfig, reference: ReferenceOptimum) -> Result<BaselineRun> {
    cfg.check()?;
    Ok(BaselineRun {
        method,
        actions: Vec::new(),
        qoes: Vec::new(),
        lambdas: Vec::new(),
        ledger: RunLedger {
            rows: Vec::new(),
            regret: RegretTracker::new(reference),
        },
    })
}

/// GP over `(traffic, action) -> QoE`, scored on the Lagrangian
/// `F - lambda (Q - E)` whose posterior is `N(F - lambda (mu - E), (lambda sigma)^2)`.
fn run_gp(
    method: Method,
    env: &dyn Environment,
    cfg: &BaselineConfig,
    reference: ReferenceOptimum,
    run_seed: u64,
    sink: Option<&mut LedgerWriter>,
) -> Result<BaselineRun> {
    let run = start(method, cfg, reference)?;
    let mut r = Runner {
        env,
        cfg,
        method,
        run_seed,
        run,
        sink,
    };
    let mut lambda = 0.0;
    for it in 0..cfg.iterations {
        let (action, beta) = if it == 0 {
            let mut rng = seed::rng(r.derive(0, purpose::WARMUP));
            (
                ConfigAction::from_normalized(&candidates::uniform_box(1, &mut rng)[0]),
                None,
            )
        } else {
            let xs: Vec<Vec<f64>> = r
                .run
                .actions
                .iter()
                .map(|a| residual_input(cfg.traffic, &a.normalized()))
                .collect();
            let gp = GpModel::fit(&xs, &r.run.qoes, cfg.gp)?;
            let pool = r.pool(it, &r.centers(lambda));
            let beta = (method == Method::GpUcb).then(|| ucb_beta(it));
            let best_l = r
                .run
                .actions
                .iter()
                .zip(&r.run.qoes)
                .map(|(a, q)| resource_usage(a) - lambda * (q - cfg.requirement))
                .fold(f64::INFINITY, f64::min);
            let scores: Vec<f64> = pool
                .par_iter()
                .map(|u| {
                    let (mu, sd) = gp.predict(&residual_input(cfg.traffic, u));
                    let usage = u.iter().sum::<f64>() / ACTION_DIM as f64;
                    let mean = usage - lambda * (mu - cfg.requirement);
                    let std = lambda * sd;
                    match beta {
                        // Lower confidence bound, negated so larger is better.
                        Some(b) => -(mean - b.sqrt() * std),
                        None => expected_improvement(best_l, mean, std),
                    }
                })
                .collect();
            let i = (0..pool.len())
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
                .expect("non-empty pool");
            (ConfigAction::from_normalized(&pool[i]), beta)
        };
        let q = r.apply(it, action, lambda, beta)?;
        lambda = dual_update(lambda, q, cfg.requirement, cfg.eps);
    }
    Ok(r.run)
}

/// GP-EI on the Lagrangian, learning online from scratch.
pub fn run_gp_ei(
    env: &dyn Environment,
    cfg: &BaselineConfig,
    reference: ReferenceOptimum,
    run_seed: u64,
    sink: Option<&mut LedgerWriter>,
) -> Result<BaselineRun> {
    run_gp(Method::GpEi, env, cfg, reference, run_seed, sink)
}

/// GP-UCB (lower bound on the Lagrangian) with the deterministic schedule
/// [`ucb_beta`].
pub fn run_gp_ucb(
    env: &dyn Environment,
    cfg: &BaselineConfig,
    reference: ReferenceOptimum,
    run_seed: u64,
    sink: Option<&mut LedgerWriter>,
) -> Result<BaselineRun> {
    run_gp(Method::GpUcb, env, cfg, reference, run_seed, sink)
}

/// Offline QoE predictor used by the filter baseline: batch of normalized
/// actions in, predicted QoE out.
pub type Predictor<'a> = dyn Fn(&[[f64; ACTION_DIM]]) -> Result<Vec<f64>> + Sync + 'a;

/// Predictor backed by the offline policy's weight-mean forward pass.
pub fn policy_predictor<'a>(
    policy: &'a BnnModel,
    cfg: &'a BaselineConfig,
) -> impl Fn(&[[f64; ACTION_DIM]]) -> Result<Vec<f64>> + Sync + 'a {
    move |pool: &[[f64; ACTION_DIM]]| {
        let x = Array2::from_shape_fn((pool.len(), POLICY_DIM), |(i, j)| {
            policy_input(cfg.traffic, cfg.threshold_ms, cfg.y_max_ms, &pool[i])[j]
        });
        policy.predict_mean(x.view())
    }
}

/// Random-sampling filter: each iteration scores a candidate pool with the
/// offline predictor plus the mean observed prediction error, and applies
/// the cheapest action predicted feasible (the highest predicted QoE if
/// none is). `pool` overrides the random candidates.
pub fn run_offline_surrogate_filter(
    env: &dyn Environment,
    cfg: &BaselineConfig,
    predictor: &Predictor,
    pool: Option<&[[f64; ACTION_DIM]]>,
    reference: ReferenceOptimum,
    run_seed: u64,
    sink: Option<&mut LedgerWriter>,
) -> Result<BaselineRun> {
    let method = Method::OfflineFilter;
    let run = start(method, cfg, reference)?;
    let mut r = Runner {
        env,
        cfg,
        method,
        run_seed,
        run,
        sink,
    };
    let mut errors: Vec<f64> = Vec::new();
    for it in 0..cfg.iterations {
        let drawn;
        let cands: &[[f64; ACTION_DIM]] = match pool {
            Some(p) if !p.is_empty() => p,
            Some(_) => return Err(Error::Empty("candidate pool")),
            None => {
                let mut rng = seed::rng(r.derive(it, purpose::CANDIDATES));
                drawn = candidates::uniform_box(cfg.pool.size, &mut rng);
                &drawn
            }
        };
        let correction = if errors.is_empty() {
            0.0
        } else {
            errors.iter().sum::<f64>() / errors.len() as f64
        };
        let pred: Vec<f64> = predictor(cands)?
            .into_iter()
            .map(|q| q + correction)
            .collect();
        let usage = |u: &[f64; ACTION_DIM]| u.iter().sum::<f64>() / ACTION_DIM as f64;
        let feasible = (0..cands.len())
            .filter(|&i| pred[i] >= cfg.requirement)
            .min_by(|&a, &b| {
                usage(&cands[a])
                    .total_cmp(&usage(&cands[b]))
                    .then(a.cmp(&b))
            });
        let i = feasible.unwrap_or_else(|| {
            (0..cands.len())
                .max_by(|&a, &b| pred[a].total_cmp(&pred[b]).then(b.cmp(&a)))
                .expect("non-empty pool")
        });
        let action = ConfigAction::from_normalized(&cands[i]);
        let q = r.apply(it, action, 0.0, None)?;
        errors.push(q - (pred[i] - correction));
    }
    Ok(r.run)
}
