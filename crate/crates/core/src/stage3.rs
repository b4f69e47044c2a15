//! Online learning against the real network.
//!
//! The offline policy predicts simulator QoE; a GP learns the residual
//! between real and simulated QoE. Each online step first runs `N` serial
//! rounds in the augmented simulator that pick the Lagrangian argmin under
//! an optimistic QoE estimate and move the multiplier, then applies the
//! last pick to the real network once. Between online steps the policy
//! can be refit on every simulator query made so far.

use ndarray::Array2;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{BnnModel, BnnTrainer, TrainOptions};
use crate::candidates::{self, PoolSpec};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::gp::{GpHyper, GpModel};
use crate::ledger::{Kind, LedgerRow, LedgerWriter, RunLedger};
use crate::metrics::{
    dual_update, lagrangian, qoe, resource_usage, ReferenceOptimum, RegretTracker,
};
use crate::seed::{self, purpose, stage};
use crate::slicesim::{ConfigAction, NetworkState, ACTION_DIM, MAX_TRAFFIC};
use crate::stage2::{policy_input, ActionObs, POLICY_DIM};

/// Width of the residual-model input: traffic, then the action.
pub const RESIDUAL_DIM: usize = ACTION_DIM + 1;

/// Floor on the Gamma shape, which the schedule makes negative at `n = 1`.
pub const KAPPA_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Config {
    /// Online iterations, the first of which applies the offline best action.
    pub iterations: usize,
    /// Simulator rounds `N` before each online action.
    pub inner: usize,
    /// Gamma scale `rho`.
    pub rho: f64,
    /// Clip `B` on the exploration weight.
    pub beta_clip: f64,
    pub requirement: f64,
    pub threshold_ms: f64,
    pub y_max_ms: f64,
    pub eps: f64,
    pub traffic: u32,
    pub duration_s: f64,
    pub pool: PoolSpec,
    /// Monte Carlo draws for the policy's predictive std.
    pub n_mc: usize,
    pub gp: GpHyper,
    /// Learn the sim-to-real residual; when off the residual is taken as 0.
    pub residual: bool,
    pub top_k: usize,
    /// Policy refit epochs before each online step; 0 keeps the offline
    /// policy fixed.
    pub refine_epochs: usize,
    pub refine: TrainOptions,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            iterations: 100,
            inner: 20,
            rho: 0.1,
            beta_clip: 10.0,
            requirement: 0.9,
            threshold_ms: 300.0,
            y_max_ms: 2000.0,
            eps: 0.1,
            traffic: 1,
            duration_s: 60.0,
            pool: PoolSpec::default(),
            n_mc: 30,
            gp: GpHyper::default(),
            residual: true,
            top_k: 5,
            refine_epochs: 3,
            refine: TrainOptions::default(),
        }
    }
}

impl Stage3Config {
    pub fn check(&self) -> Result<()> {
        if self.iterations == 0 || self.inner == 0 || self.pool.size == 0 {
            return Err(Error::Config(
                "stage3 iterations, inner and pool size must be >= 1".into(),
            ));
        }
        if !(self.rho > 0.0) || !(self.beta_clip > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(
                "stage3 needs rho, beta_clip and eps > 0".into(),
            ));
        }
        if self.n_mc < 2 {
            return Err(Error::Config("stage3 n_mc must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.requirement)
            || !(self.threshold_ms > 0.0)
            || !(self.duration_s > 0.0)
        {
            return Err(Error::Config(
                "stage3 needs requirement in [0,1], threshold_ms > 0 and duration_s > 0".into(),
            ));
        }
        NetworkState::new(self.traffic)
            .check()
            .map_err(|e| Error::Config(format!("stage3 traffic: {e}")))?;
        self.gp.check()
    }

    fn state(&self) -> NetworkState {
        NetworkState::new(self.traffic)
    }
}

/// Gamma shape of the randomized exploration weight at online step `n`.
pub fn crgpucb_kappa(n: usize, rho: f64) -> f64 {
    let n = n as f64;
    let raw = ((n * n + 1.0) / (2.0 * std::f64::consts::PI).sqrt()).ln() / (1.0 + rho / 2.0).ln();
    raw.max(KAPPA_MIN)
}

/// Unclipped law of the exploration weight: Gamma with shape `kappa` and
/// scale `rho`.
pub fn beta_distribution(n: usize, rho: f64) -> Result<Gamma<f64>> {
    if n == 0 || !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta schedule needs n >= 1 and rho > 0, got n = {n}, rho = {rho}"
        )));
    }
    Gamma::new(crgpucb_kappa(n, rho), rho).map_err(|e| Error::Numerical(e.to_string()))
}

/// One clipped draw of the exploration weight, in `[0, clip]`.
pub fn crgpucb_beta(n: usize, rho: f64, clip: f64, seed: u64) -> Result<f64> {
    if !(clip > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta clip must be > 0, got {clip}"
        )));
    }
    let draw = beta_distribution(n, rho)?.sample(&mut seed::rng(seed));
    Ok(draw.clamp(0.0, clip))
}

/// Posterior summary of real QoE at one action: simulator QoE from the
/// policy plus the learned residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QoeEstimate {
    pub sim_mean: f64,
    pub sim_std: f64,
    pub residual_mean: f64,
    pub residual_std: f64,
}

impl QoeEstimate {
    pub fn mean(&self) -> f64 {
        self.sim_mean + self.residual_mean
    }

    pub fn std(&self) -> f64 {
        (self.sim_std * self.sim_std + self.residual_std * self.residual_std).sqrt()
    }
}

/// Optimistic QoE used for scoring: mean plus `sqrt(beta)` combined stds,
/// clamped to `[0, 1.5]`.
pub fn acquisition_qoe(est: &QoeEstimate, beta: f64) -> f64 {
    (est.mean() + beta.max(0.0).sqrt() * est.std()).clamp(0.0, 1.5)
}

/// Residual-model input `(traffic/4, a/A)`.
pub fn residual_input(traffic: u32, u: &[f64; ACTION_DIM]) -> Vec<f64> {
    let mut v = Vec::with_capacity(RESIDUAL_DIM);
    v.push(traffic as f64 / MAX_TRAFFIC as f64);
    v.extend_from_slice(u);
    v
}

/// Estimates at every pool action. The simulator mean is the weight-mean
/// forward pass; its std comes from `n_mc` posterior draws.
pub fn estimate_qoe(
    policy: &BnnModel,
    gp: Option<&GpModel>,
    pool: &[[f64; ACTION_DIM]],
    cfg: &Stage3Config,
    seed: u64,
) -> Result<Vec<QoeEstimate>> {
    let rows: Vec<[f64; POLICY_DIM]> = pool
        .iter()
        .map(|u| policy_input(cfg.traffic, cfg.threshold_ms, cfg.y_max_ms, u))
        .collect();
    let x = Array2::from_shape_fn((rows.len(), POLICY_DIM), |(i, j)| rows[i][j]);
    let mean = policy.predict_mean(x.view())?;
    let (_, std) = policy.posterior(x.view(), cfg.n_mc, seed)?;
    let res: Vec<(f64, f64)> = match gp {
        Some(g) => pool
            .par_iter()
            .map(|u| g.predict(&residual_input(cfg.traffic, u)))
            .collect(),
        None => vec![(0.0, 0.0); pool.len()],
    };
    Ok((0..pool.len())
        .map(|i| QoeEstimate {
            sim_mean: mean[i],
            sim_std: std[i],
            residual_mean: res[i].0,
            residual_std: res[i].1,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub iter: usize,
    pub traffic: u32,
    pub action: ConfigAction,
    pub q_real: f64,
    pub q_sim: f64,
    /// `q_real - q_sim`.
    pub residual: f64,
    /// Residual predicted by the GP before this measurement.
    pub predicted: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct OnlineState {
    pub lambda: f64,
    /// Refit copy of the offline policy, once refinement has run.
    pub policy: Option<BnnModel>,
    trainer: Option<BnnTrainer>,
    /// Simulator queries made online, as policy training data.
    pub sim_obs: Vec<ActionObs>,
    /// `None` while residual learning is off.
    pub gp: Option<GpModel>,
    pub transitions: Vec<Transition>,
    /// Online iterations completed.
    pub n: usize,
    pub betas: Vec<Option<f64>>,
    pub ledger: RunLedger,
}

impl OnlineState {
    pub fn new(lambda: f64, cfg: &Stage3Config, reference: ReferenceOptimum) -> Result<Self> {
        Ok(OnlineState {
            lambda,
            policy: None,
            trainer: None,
            sim_obs: Vec::new(),
            gp: if cfg.residual {
                Some(GpModel::prior(RESIDUAL_DIM, cfg.gp)?)
            } else {
                None
            },
            transitions: Vec::new(),
            n: 0,
            betas: Vec::new(),
            ledger: RunLedger {
                rows: Vec::new(),
                regret: RegretTracker::new(reference),
            },
        })
    }

    /// Mean |GP-predicted residual| over online iterations `from..to`.
    pub fn mean_abs_residual(&self, from: usize, to: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .transitions
            .iter()
            .filter(|t| t.iter >= from && t.iter < to)
            .map(|t| t.predicted.abs())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn sim_query(&mut self, action: ConfigAction, q: f64, cfg: &Stage3Config, seed: u64) {
        self.sim_obs.push(ActionObs {
            iter: self.n,
            worker: self.sim_obs.len(),
            traffic: cfg.traffic,
            action,
            usage: resource_usage(&action),
            qoe: q,
            lambda: self.lambda,
            seed,
        });
    }

    /// Refit the policy copy on the offline observations plus the online
    /// simulator queries.
    fn refine(&mut self, offline: &OfflineArtifacts, cfg: &Stage3Config, seed: u64) -> Result<()> {
        if cfg.refine_epochs == 0 || self.sim_obs.is_empty() {
            return Ok(());
        }
        let data: Vec<&ActionObs> = offline.observations.iter().chain(&self.sim_obs).collect();
        let x = Array2::from_shape_fn((data.len(), POLICY_DIM), |(i, j)| {
            policy_input(
                data[i].traffic,
                cfg.threshold_ms,
                cfg.y_max_ms,
                &data[i].action.normalized(),
            )[j]
        });
        let y: Vec<f64> = data.iter().map(|o| o.qoe).collect();
        let policy = self.policy.get_or_insert_with(|| offline.policy.clone());
        let trainer = self
            .trainer
            .get_or_insert_with(|| BnnTrainer::new(policy, cfg.refine));
        trainer.train(policy, x.view(), &y, cfg.refine_epochs, seed)?;
        Ok(())
    }

    fn record(&mut self, row: LedgerRow, sink: &mut Option<&mut LedgerWriter>) -> Result<()> {
        if let Some(w) = sink.as_deref_mut() {
            w.append(&row)?;
        }
        self.ledger.push(row)
    }

    fn centers(&self, anchor: &ConfigAction, cfg: &Stage3Config) -> Vec<[f64; ACTION_DIM]> {
        let mut feasible: Vec<&Transition> = self
            .transitions
            .iter()
            .filter(|t| t.q_real >= cfg.requirement)
            .collect();
        feasible.sort_by(|a, b| resource_usage(&a.action).total_cmp(&resource_usage(&b.action)));
        let mut out = vec![anchor.normalized()];
        for t in feasible {
            if out.len() >= cfg.top_k {
                break;
            }
            let u = t.action.normalized();
            if !out.contains(&u) {
                out.push(u);
            }
        }
        out
    }
}

/// The offline stage's outputs consumed online.
#[derive(Debug, Clone, Copy)]
pub struct OfflineArtifacts<'a> {
    pub policy: &'a BnnModel,
    /// The policy's training data, reused when refining it online.
    pub observations: &'a [ActionObs],
    pub best_action: ConfigAction,
    pub lambda: f64,
}

fn query_qoe(
    env: &dyn Environment,
    a: &ConfigAction,
    cfg: &Stage3Config,
    seed: u64,
    what: &str,
) -> Result<f64> {
    let trace = env
        .measure(a, &cfg.state(), cfg.duration_s, seed)
        .map_err(|e| Error::Query {
            context: format!("{what} query at action {:?}", a.to_array()),
            source: Box::new(e),
        })?;
    qoe(&trace, cfg.threshold_ms)
}

/// `N` serial simulator rounds before online step `state.n`. Candidate
/// estimates are computed once; each round takes the Lagrangian argmin
/// under the optimistic estimate, queries the simulator there and updates
/// the multiplier with simulator QoE plus predicted residual. Returns the
/// last round's pick.
#[allow(clippy::too_many_arguments)]
pub fn offline_accelerate(
    state: &mut OnlineState,
    sim: &dyn Environment,
    offline: &OfflineArtifacts,
    beta: f64,
    cfg: &Stage3Config,
    run_seed: u64,
    mut sink: Option<&mut LedgerWriter>,
) -> Result<ConfigAction> {
    let n = state.n as u64;
    let centers = state.centers(&offline.best_action, cfg);
    let mut rng = seed::rng(seed::derive(
        run_seed,
        stage::ONLINE,
        n,
        0,
        purpose::CANDIDATES,
    ));
    let pool = candidates::box_pool(&cfg.pool, &centers, &mut rng);
    let est = estimate_qoe(
        state.policy.as_ref().unwrap_or(offline.policy),
        state.gp.as_ref(),
        &pool,
        cfg,
        seed::derive(run_seed, stage::ONLINE, n, 0, purpose::POSTERIOR),
    )?;
    let usage: Vec<f64> = pool
        .iter()
        .map(|u| u.iter().sum::<f64>() / ACTION_DIM as f64)
        .collect();
    let optimistic: Vec<f64> = est.iter().map(|e| acquisition_qoe(e, beta)).collect();

    let mut pick = offline.best_action;
    for k in 0..cfg.inner {
        let mut best = (f64::INFINITY, 0);
        for i in 0..pool.len() {
            let l = lagrangian(usage[i], optimistic[i], state.lambda, cfg.requirement);
            if l < best.0 {
                best = (l, i);
            }
        }
        let i = best.1;
        pick = ConfigAction::from_normalized(&pool[i]);
        let qseed = seed::derive(run_seed, stage::ONLINE, n, k as u64 + 1, purpose::QUERY);
        let q_s = query_qoe(sim, &pick, cfg, qseed, "simulator")?;
        state.sim_query(pick, q_s, cfg, qseed);
        let lambda = state.lambda;
        state.lambda = dual_update(lambda, q_s + est[i].residual_mean, cfg.requirement, cfg.eps);
        state.record(
            LedgerRow {
                iter: n,
                stage: 3,
                kind: Kind::Offline,
                x_or_a: pick.to_array().to_vec(),
                usage: Some(resource_usage(&pick)),
                qoe: Some(q_s),
                kl: None,
                lambda: Some(lambda),
                beta: Some(beta),
                seed: qseed,
            },
            &mut sink,
        )?;
    }
    Ok(pick)
}

/// Run `cfg.iterations` online steps against `real`, starting from the
/// offline best action, with regrets measured against `reference`.
///
/// Rows are appended to `sink` as they are produced, so a failing real
/// query leaves the completed part of the run on disk.
pub fn online_learn(
    real: &dyn Environment,
    sim: &dyn Environment,
    offline: &OfflineArtifacts,
    reference: ReferenceOptimum,
    cfg: &Stage3Config,
    run_seed: u64,
    mut sink: Option<&mut LedgerWriter>,
) -> Result<OnlineState> {
    cfg.check()?;
    offline.best_action.check()?;
    let mut state = OnlineState::new(offline.lambda, cfg, reference)?;
    for n in 0..cfg.iterations {
        let (action, beta) = if n == 0 {
            (offline.best_action, None)
        } else {
            let beta = crgpucb_beta(
                n,
                cfg.rho,
                cfg.beta_clip,
                seed::derive(run_seed, stage::ONLINE, n as u64, 0, purpose::BETA),
            )?;
            state.refine(
                offline,
                cfg,
                seed::derive(run_seed, stage::ONLINE, n as u64, 0, purpose::TRAIN),
            )?;
            let a = offline_accelerate(
                &mut state,
                sim,
                offline,
                beta,
                cfg,
                run_seed,
                sink.as_deref_mut(),
            )?;
            (a, Some(beta))
        };
        let u = action.normalized();
        let predicted = state
            .gp
            .as_ref()
            .map_or(0.0, |g| g.predict(&residual_input(cfg.traffic, &u)).0);
        let rseed = seed::derive(run_seed, stage::ONLINE, n as u64, 0, purpose::REAL);
        let q_real = query_qoe(real, &action, cfg, rseed, "real")?;
        let q_sim = query_qoe(sim, &action, cfg, rseed, "simulator")?;
        state.sim_query(action, q_sim, cfg, rseed);
        state.transitions.push(Transition {
            iter: n,
            traffic: cfg.traffic,
            action,
            q_real,
            q_sim,
            residual: q_real - q_sim,
            predicted,
            seed: rseed,
        });
        if cfg.residual {
            let x: Vec<Vec<f64>> = state
                .transitions
                .iter()
                .map(|t| residual_input(t.traffic, &t.action.normalized()))
                .collect();
            let y: Vec<f64> = state.transitions.iter().map(|t| t.residual).collect();
            state.gp = Some(GpModel::fit(&x, &y, cfg.gp)?);
        }
        let usage = resource_usage(&action);
        state.ledger.regret.update(usage, q_real)?;
        state.betas.push(beta);
        let lambda = state.lambda;
        state.record(
            LedgerRow {
                iter: n as u64,
                stage: 3,
                kind: Kind::Online,
                x_or_a: action.to_array().to_vec(),
                usage: Some(usage),
                qoe: Some(q_real),
                kl: None,
                lambda: Some(lambda),
                beta,
                seed: rseed,
            },
            &mut sink,
        )?;
        state.n = n + 1;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::{BnnConfig, TrainOptions};
    use crate::env::SimEnv;
    use crate::slicesim::{Engine, RealTwin, SimulationParams};
    use crate::stage2::{offline_train, Stage2Config};

    #[test]
    fn kappa_matches_closed_form() {
        let want = (101.0 / (2.0 * std::f64::consts::PI).sqrt()).ln() / 1.05f64.ln();
        assert!((crgpucb_kappa(10, 0.1) - want).abs() < 1e-12);
        // (1 + 1)/sqrt(2 pi) < 1, so the raw shape is negative.
        assert_eq!(crgpucb_kappa(1, 0.1), KAPPA_MIN);
    }

    #[test]
    fn gamma_mean_is_kappa_times_rho() {
        let kappa = (101.0 / (2.0 * std::f64::consts::PI).sqrt()).ln() / 1.05f64.ln();
        let d = beta_distribution(10, 0.1).unwrap();
        let mut rng = seed::rng(99);
        let n = 100_000;
        let mean = (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean / (kappa * 0.1) - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn beta_draws_are_clipped() {
        for n in [1, 2, 10, 100, 1000] {
            for s in 0..50 {
                let b = crgpucb_beta(n, 0.1, 10.0, s).unwrap();
                assert!((0.0..=10.0).contains(&b));
            }
        }
        assert_eq!(crgpucb_beta(1000, 0.1, 10.0, 1).unwrap(), 10.0);
        assert!(crgpucb_beta(0, 0.1, 10.0, 1).is_err());
        assert!(crgpucb_beta(3, 0.0, 10.0, 1).is_err());
    }

    #[test]
    fn acquisition_is_monotone_in_beta() {
        let e = QoeEstimate {
            sim_mean: 0.7,
            sim_std: 0.03,
            residual_mean: -0.1,
            residual_std: 0.04,
        };
        assert!((acquisition_qoe(&e, 0.0) - 0.6).abs() < 1e-15);
        assert!((acquisition_qoe(&e, 4.0) - (0.6 + 2.0 * 0.05)).abs() < 1e-12);
        let mut prev = 0.0;
        for b in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 1e6] {
            let v = acquisition_qoe(&e, b);
            assert!(v >= prev);
            prev = v;
        }
        assert_eq!(prev, 1.5);
    }

    #[test]
    fn untrained_gp_contributes_prior() {
        let cfg = Stage3Config {
            pool: PoolSpec::uniform(4),
            ..Stage3Config::default()
        };
        let policy = BnnModel::new(
            POLICY_DIM,
            &BnnConfig {
                hidden: vec![8],
                ..BnnConfig::default()
            },
            1,
        )
        .unwrap();
        let gp = GpModel::prior(RESIDUAL_DIM, cfg.gp).unwrap();
        let pool = [[0.5; ACTION_DIM], [0.1; ACTION_DIM]];
        let est = estimate_qoe(&policy, Some(&gp), &pool, &cfg, 3).unwrap();
        for e in &est {
            assert_eq!(e.residual_mean, 0.0);
            assert!((e.residual_std - cfg.gp.signal_var.sqrt()).abs() < 1e-12);
            assert!(e.sim_std > 0.0);
        }
        let none = estimate_qoe(&policy, None, &pool, &cfg, 3).unwrap();
        assert_eq!(none[0].residual_std, 0.0);
        assert_eq!(none[0].sim_mean, est[0].sim_mean);
    }

    struct Fixture {
        twin: RealTwin,
        sim: SimEnv,
        policy: BnnModel,
        observations: Vec<ActionObs>,
        best: ConfigAction,
        lambda: f64,
    }

    fn fixture() -> Fixture {
        let engine = Engine::default();
        let twin = RealTwin::default_twin();
        let sim = SimEnv::new(engine, SimulationParams::ORIGINAL);
        let cfg = Stage2Config {
            iterations: 40,
            parallel: 4,
            warmup: 10,
            traffics: vec![1],
            pool: PoolSpec {
                size: 1000,
                ..PoolSpec::default()
            },
            bnn: BnnConfig {
                hidden: vec![16, 16],
                ..BnnConfig::default()
            },
            train: TrainOptions::default(),
            fit_epochs: 30,
            round_epochs: 5,
            confirm_repeats: 3,
            ..Stage2Config::default()
        };
        let r = offline_train(&sim, &cfg, 4).unwrap();
        Fixture {
            twin,
            sim,
            policy: r.policy,
            observations: r.observations,
            best: r.best_action,
            lambda: r.lambda_final,
        }
    }

    fn quick_cfg() -> Stage3Config {
        Stage3Config {
            iterations: 6,
            inner: 4,
            duration_s: 20.0,
            pool: PoolSpec {
                size: 300,
                ..PoolSpec::default()
            },
            n_mc: 5,
            ..Stage3Config::default()
        }
    }

    fn reference() -> ReferenceOptimum {
        ReferenceOptimum {
            usage: 0.1,
            qoe: 0.95,
        }
    }

    #[test]
    fn online_loop_shape_and_ledger() {
        let f = fixture();
        let cfg = quick_cfg();
        let off = OfflineArtifacts {
            policy: &f.policy,
            observations: &f.observations,
            best_action: f.best,
            lambda: f.lambda,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let mut w = LedgerWriter::create(&path).unwrap();
        let st = online_learn(&f.twin, &f.sim, &off, reference(), &cfg, 9, Some(&mut w)).unwrap();
        assert_eq!(st.n, cfg.iterations);
        assert_eq!(st.transitions.len(), cfg.iterations);
        assert_eq!(st.gp.as_ref().unwrap().len(), cfg.iterations);
        assert_eq!(st.transitions[0].action, f.best);
        assert_eq!(st.betas[0], None);
        assert!(st.betas[1..]
            .iter()
            .all(|b| (0.0..=cfg.beta_clip).contains(&b.unwrap())));

        // Exactly N simulator rows between consecutive real rows.
        let kinds: Vec<Kind> = st.ledger.rows.iter().map(|r| r.kind).collect();
        assert_eq!(kinds[0], Kind::Online);
        for chunk in kinds[1..].chunks(cfg.inner + 1) {
            assert!(chunk[..cfg.inner].iter().all(|k| *k == Kind::Offline));
            assert_eq!(chunk[cfg.inner], Kind::Online);
        }
        assert_eq!(st.ledger.online_rows().count(), cfg.iterations);
        assert!(st.ledger.rows.iter().all(|r| r.lambda.unwrap() >= 0.0));
        for t in &st.transitions {
            assert!((-1.0..=1.0).contains(&t.residual));
            assert_eq!(t.residual, t.q_real - t.q_sim);
        }
        assert_eq!(st.ledger.regret.iterations(), cfg.iterations);
        let avg = st.ledger.regret.averages();
        assert!(avg
            .windows(2)
            .all(|w| w[1].2 * w[1].0 as f64 >= w[0].2 * w[0].0 as f64 - 1e-12));

        // The streamed file holds the same rows.
        assert_eq!(RunLedger::load(&path).unwrap().rows, st.ledger.rows);

        let again = online_learn(&f.twin, &f.sim, &off, reference(), &cfg, 9, None).unwrap();
        assert_eq!(again.ledger.rows, st.ledger.rows);
    }

    #[test]
    fn refinement_uses_every_simulator_query() {
        let f = fixture();
        let off = OfflineArtifacts {
            policy: &f.policy,
            observations: &f.observations,
            best_action: f.best,
            lambda: f.lambda,
        };
        let cfg = Stage3Config {
            refine_epochs: 2,
            ..quick_cfg()
        };
        let st = online_learn(&f.twin, &f.sim, &off, reference(), &cfg, 9, None).unwrap();
        assert_eq!(
            st.sim_obs.len(),
            (cfg.iterations - 1) * cfg.inner + cfg.iterations
        );
        assert!(st.sim_obs.iter().all(|o| o.traffic == cfg.traffic));
        let refit = st.policy.as_ref().unwrap();
        assert_ne!(refit, &f.policy);

        let fixed = Stage3Config {
            refine_epochs: 0,
            ..quick_cfg()
        };
        let st = online_learn(&f.twin, &f.sim, &off, reference(), &fixed, 9, None).unwrap();
        assert!(st.policy.is_none());
    }

    #[test]
    fn replay_equivalence_without_residual() {
        // With the simulator replaced by the real network and no residual,
        // the inner multiplier path is the plain dual update on real QoE.
        let f = fixture();
        let cfg = Stage3Config {
            residual: false,
            inner: 20,
            ..quick_cfg()
        };
        let off = OfflineArtifacts {
            policy: &f.policy,
            observations: &f.observations,
            best_action: f.best,
            lambda: f.lambda,
        };
        let mut st = OnlineState::new(f.lambda, &cfg, reference()).unwrap();
        st.n = 1;
        let pick = offline_accelerate(&mut st, &f.twin, &off, 4.0, &cfg, 5, None).unwrap();
        assert_eq!(st.ledger.rows.len(), cfg.inner);
        let mut lambda = f.lambda;
        for row in &st.ledger.rows {
            assert_eq!(row.lambda, Some(lambda));
            let a = ConfigAction::from_slice(&row.x_or_a).unwrap();
            let q = qoe(
                &f.twin
                    .measure(&a, &cfg.state(), cfg.duration_s, row.seed)
                    .unwrap(),
                cfg.threshold_ms,
            )
            .unwrap();
            assert_eq!(row.qoe, Some(q));
            lambda = dual_update(lambda, q, cfg.requirement, cfg.eps);
            assert!(lambda >= 0.0);
        }
        assert_eq!(st.lambda, lambda);
        assert_eq!(
            pick.to_array().to_vec(),
            st.ledger.rows.last().unwrap().x_or_a
        );
    }

    #[test]
    fn no_gap_means_no_residual() {
        let engine = Engine::default();
        let twin = RealTwin::new(engine.clone(), SimulationParams::ORIGINAL, 0.0).unwrap();
        let f = fixture();
        let off = OfflineArtifacts {
            policy: &f.policy,
            observations: &f.observations,
            best_action: f.best,
            lambda: f.lambda,
        };
        let st = online_learn(&twin, &f.sim, &off, reference(), &quick_cfg(), 2, None).unwrap();
        assert!(st.transitions.iter().all(|t| t.residual == 0.0));
        assert_eq!(st.mean_abs_residual(1, 6), Some(0.0));
    }

    #[test]
    fn offline_best_drops_on_the_real_network() {
        let f = fixture();
        let cfg = Stage3Config {
            duration_s: 60.0,
            ..quick_cfg()
        };
        let (mut sim_q, mut real_q) = (0.0, 0.0);
        for s in 0..5 {
            sim_q += query_qoe(&f.sim, &f.best, &cfg, s, "simulator").unwrap();
            real_q += query_qoe(&f.twin, &f.best, &cfg, s, "real").unwrap();
        }
        assert!(real_q < sim_q, "real {real_q} sim {sim_q}");
    }
}
