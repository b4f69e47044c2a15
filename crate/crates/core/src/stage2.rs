//! Offline configuration learning in the augmented simulator: parallel
//! Thompson sampling over actions with a Lagrangian objective and an
//! adaptive dual multiplier on the QoE constraint.

use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{BnnConfig, BnnModel, BnnTrainer, TrainOptions};
use crate::candidates::{self, PoolSpec};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::ledger::{Kind, LedgerRow, RunLedger};
use crate::metrics::{dual_update, lagrangian, qoe, resource_usage};
use crate::seed::{self, purpose, stage};
use crate::slicesim::{ConfigAction, NetworkState, ACTION_DIM, MAX_TRAFFIC};

/// Width of the policy input: traffic, threshold, then the action.
pub const POLICY_DIM: usize = ACTION_DIM + 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub iterations: usize,
    pub parallel: usize,
    pub warmup: usize,
    pub pool: PoolSpec,
    /// QoE requirement `E`.
    pub requirement: f64,
    /// Latency threshold `Y`.
    pub threshold_ms: f64,
    /// Scale of the threshold input; larger thresholds saturate at 1.
    pub y_max_ms: f64,
    /// Dual step size.
    pub eps: f64,
    /// Traffic levels sampled uniformly per query.
    pub traffics: Vec<u32>,
    /// Traffic whose incumbent is reported as the best action.
    pub primary_traffic: u32,
    pub duration_s: f64,
    pub bnn: BnnConfig,
    pub train: TrainOptions,
    pub fit_epochs: usize,
    pub round_epochs: usize,
    pub top_k: usize,
    /// Fresh-seed re-measurements a feasible candidate needs to become the
    /// incumbent; 0 accepts single measurements.
    pub confirm_repeats: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            iterations: 400,
            parallel: 8,
            warmup: 40,
            pool: PoolSpec::default(),
            requirement: 0.9,
            threshold_ms: 300.0,
            y_max_ms: 2000.0,
            eps: 0.1,
            traffics: vec![1, 2, 3, 4],
            primary_traffic: 1,
            duration_s: 60.0,
            bnn: BnnConfig::default(),
            train: TrainOptions::default(),
            fit_epochs: 200,
            round_epochs: 20,
            top_k: 5,
            confirm_repeats: 10,
        }
    }
}

impl Stage2Config {
    pub fn warmup_rounds(&self) -> usize {
        self.warmup.min(self.iterations)
    }

    pub fn total_queries(&self) -> usize {
        let w = self.warmup_rounds();
        w + (self.iterations - w) * self.parallel
    }

    pub fn check(&self) -> Result<()> {
        if self.iterations == 0 || self.parallel == 0 || self.pool.size == 0 {
            return Err(Error::Config(
                "stage2 iterations, parallel and pool size must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.requirement) {
            return Err(Error::Config(format!(
                "stage2 requirement {} outside [0,1]",
                self.requirement
            )));
        }
        if !(self.eps > 0.0) || !(self.threshold_ms > 0.0) || !(self.y_max_ms > 0.0) {
            return Err(Error::Config(
                "stage2 needs eps, threshold_ms and y_max_ms > 0".into(),
            ));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::Config("stage2 duration_s must be > 0".into()));
        }
        if self.traffics.is_empty() || self.traffics.iter().any(|t| !(1..=MAX_TRAFFIC).contains(t))
        {
            return Err(Error::Config(format!(
                "stage2 traffics must be a non-empty subset of 1..={MAX_TRAFFIC}"
            )));
        }
        if !self.traffics.contains(&self.primary_traffic) {
            return Err(Error::Config(format!(
                "stage2 primary_traffic {} not among traffics",
                self.primary_traffic
            )));
        }
        Ok(())
    }
}

/// Policy input `(traffic/4, Y/Y_max, a/A)`.
pub fn policy_input(
    traffic: u32,
    threshold_ms: f64,
    y_max_ms: f64,
    u: &[f64; ACTION_DIM],
) -> [f64; POLICY_DIM] {
    let mut out = [0.0; POLICY_DIM];
    out[0] = traffic as f64 / MAX_TRAFFIC as f64;
    out[1] = (threshold_ms / y_max_ms).min(1.0);
    out[2..].copy_from_slice(u);
    out
}

/// One simulator query of the offline search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionObs {
    pub iter: usize,
    pub worker: usize,
    pub traffic: u32,
    pub action: ConfigAction,
    pub usage: f64,
    pub qoe: f64,
    /// Multiplier in force when the action was chosen.
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub traffic: u32,
    pub action: ConfigAction,
    pub usage: f64,
    pub qoe: f64,
    pub iter: usize,
    /// Mean QoE of the fresh-seed confirmation queries, if any were run.
    pub confirmed_qoe: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    pub policy: BnnModel,
    pub best_action: ConfigAction,
    pub best: Incumbent,
    pub lambda_final: f64,
    /// Multiplier after each round.
    pub lambdas: Vec<f64>,
    /// Feasible incumbent of every traffic level that has one.
    pub incumbents: Vec<Incumbent>,
    pub observations: Vec<ActionObs>,
    /// Re-measurements of incumbent candidates, after the search.
    pub confirmations: Vec<ActionObs>,
    pub ledger: RunLedger,
}

impl Stage2Result {
    /// Feasible-incumbent usage after each round at `traffic`, `None`
    /// until the first feasible query.
    pub fn incumbent_trace(&self, traffic: u32, requirement: f64) -> Vec<Option<f64>> {
        let mut out: Vec<Option<f64>> = Vec::new();
        let mut best: Option<f64> = None;
        let mut last_iter = None;
        for o in &self.observations {
            if o.traffic == traffic && o.qoe >= requirement {
                best = Some(best.map_or(o.usage, |b| b.min(o.usage)));
            }
            if last_iter == Some(o.iter) {
                *out.last_mut().expect("pushed") = best;
            } else {
                out.push(best);
                last_iter = Some(o.iter);
            }
        }
        out
    }
}

/// Minimum-usage feasible observation at `traffic`; ties go to the earlier
/// query.
pub fn feasible_incumbent(obs: &[ActionObs], traffic: u32, requirement: f64) -> Option<Incumbent> {
    obs.iter()
        .filter(|o| o.traffic == traffic && o.qoe >= requirement)
        .min_by(|a, b| {
            a.usage
                .total_cmp(&b.usage)
                .then(a.iter.cmp(&b.iter))
                .then(a.worker.cmp(&b.worker))
        })
        .map(|o| Incumbent {
            traffic,
            action: o.action,
            usage: o.usage,
            qoe: o.qoe,
            iter: o.iter,
            confirmed_qoe: None,
        })
}

/// Feasible observations at `traffic`, cheapest first, one per distinct
/// action.
fn feasible_candidates(obs: &[ActionObs], traffic: u32, requirement: f64) -> Vec<&ActionObs> {
    let mut c: Vec<&ActionObs> = obs
        .iter()
        .filter(|o| o.traffic == traffic && o.qoe >= requirement)
        .collect();
    c.sort_by(|a, b| {
        a.usage
            .total_cmp(&b.usage)
            .then(a.iter.cmp(&b.iter))
            .then(a.worker.cmp(&b.worker))
    });
    let mut seen: Vec<ConfigAction> = Vec::new();
    c.retain(|o| {
        let fresh = !seen.contains(&o.action);
        if fresh {
            seen.push(o.action);
        }
        fresh
    });
    c
}

/// Up to `k` local-search centers at `traffic`: the cheapest feasible
/// actions, topped up with the highest-QoE ones.
pub(crate) fn action_centers(
    obs: &[ActionObs],
    traffic: u32,
    requirement: f64,
    k: usize,
) -> Vec<[f64; ACTION_DIM]> {
    let mut here: Vec<&ActionObs> = obs.iter().filter(|o| o.traffic == traffic).collect();
    if here.is_empty() {
        here = obs.iter().collect();
    }
    let mut feasible: Vec<&ActionObs> = here
        .iter()
        .copied()
        .filter(|o| o.qoe >= requirement)
        .collect();
    feasible.sort_by(|a, b| a.usage.total_cmp(&b.usage));
    let mut out: Vec<[f64; ACTION_DIM]> = feasible
        .iter()
        .take(k)
        .map(|o| o.action.normalized())
        .collect();
    if out.len() < k {
        here.sort_by(|a, b| b.qoe.total_cmp(&a.qoe).then(a.usage.total_cmp(&b.usage)));
        for o in here {
            if out.len() == k {
                break;
            }
            let u = o.action.normalized();
            if !out.contains(&u) {
                out.push(u);
            }
        }
    }
    out
}

fn to_rows(obs: &[ActionObs], cfg: &Stage2Config) -> (Array2<f64>, Vec<f64>) {
    let rows: Vec<[f64; POLICY_DIM]> = obs
        .iter()
        .map(|o| {
            policy_input(
                o.traffic,
                cfg.threshold_ms,
                cfg.y_max_ms,
                &o.action.normalized(),
            )
        })
        .collect();
    let x = Array2::from_shape_fn((rows.len(), POLICY_DIM), |(i, j)| rows[i][j]);
    (x, obs.iter().map(|o| o.qoe).collect())
}

struct Search<'a> {
    env: &'a dyn Environment,
    cfg: &'a Stage2Config,
    run_seed: u64,
}

impl Search<'_> {
    fn derive(&self, iter: usize, worker: usize, tag: u64) -> u64 {
        seed::derive(
            self.run_seed,
            stage::OFFLINE,
            iter as u64,
            worker as u64,
            tag,
        )
    }

    fn traffic(&self, iter: usize, worker: usize) -> u32 {
        let mut rng = seed::rng(self.derive(iter, worker, purpose::TRAFFIC));
        self.cfg.traffics[rng.random_range(0..self.cfg.traffics.len())]
    }

    fn observe(
        &self,
        iter: usize,
        worker: usize,
        traffic: u32,
        u: &[f64; ACTION_DIM],
        lambda: f64,
    ) -> Result<ActionObs> {
        let action = ConfigAction::from_normalized(u);
        let seed = self.derive(iter, worker, purpose::QUERY);
        let trace = self
            .env
            .measure(
                &action,
                &NetworkState::new(traffic),
                self.cfg.duration_s,
                seed,
            )
            .map_err(|e| Error::Query {
                context: format!(
                    "simulate action {:?} at traffic {traffic}",
                    action.to_array()
                ),
                source: Box::new(e),
            })?;
        Ok(ActionObs {
            iter,
            worker,
            traffic,
            action,
            usage: resource_usage(&action),
            qoe: qoe(&trace, self.cfg.threshold_ms)?,
            lambda,
            seed,
        })
    }

    /// Re-measure feasible candidates at `traffic`, cheapest first and `P`
    /// at a time, until one keeps a mean QoE of at least `E` over
    /// `confirm_repeats` fresh seeds. Returns the incumbent, the
    /// confirmation queries and the best confirmed mean seen, `None` when
    /// no query met `E` in the first place.
    fn confirm(
        &self,
        obs: &[ActionObs],
        traffic: u32,
        lambda: f64,
        offset: usize,
    ) -> Result<(Option<Incumbent>, Vec<ActionObs>, Option<f64>)> {
        let cfg = self.cfg;
        let reps = cfg.confirm_repeats;
        let iter = cfg.iterations;
        let mut rows = Vec::new();
        let mut best_mean: Option<f64> = None;
        for batch in feasible_candidates(obs, traffic, cfg.requirement).chunks(cfg.parallel) {
            let jobs: Vec<(usize, usize)> = (0..batch.len())
                .flat_map(|c| (0..reps).map(move |r| (c, r)))
                .collect();
            let base = offset + rows.len();
            let measured: Vec<ActionObs> = jobs
                .par_iter()
                .enumerate()
                .map(|(k, &(c, _))| {
                    let worker = base + k;
                    let seed = self.derive(iter, worker, purpose::REMEASURE);
                    let trace = self
                        .env
                        .measure(
                            &batch[c].action,
                            &NetworkState::new(traffic),
                            cfg.duration_s,
                            seed,
                        )
                        .map_err(|e| Error::Query {
                            context: format!("re-measure action {:?}", batch[c].action.to_array()),
                            source: Box::new(e),
                        })?;
                    Ok(ActionObs {
                        iter,
                        worker,
                        traffic,
                        action: batch[c].action,
                        usage: batch[c].usage,
                        qoe: qoe(&trace, cfg.threshold_ms)?,
                        lambda,
                        seed,
                    })
                })
                .collect::<Result<_>>()?;
            let mut found = None;
            for (c, cand) in batch.iter().enumerate() {
                let mean = measured[c * reps..(c + 1) * reps]
                    .iter()
                    .map(|o| o.qoe)
                    .sum::<f64>()
                    / reps as f64;
                best_mean = Some(best_mean.map_or(mean, |b| b.max(mean)));
                if found.is_none() && mean >= cfg.requirement {
                    found = Some(Incumbent {
                        traffic,
                        action: cand.action,
                        usage: cand.usage,
                        qoe: cand.qoe,
                        iter: cand.iter,
                        confirmed_qoe: Some(mean),
                    });
                }
            }
            rows.extend(measured);
            if found.is_some() {
                return Ok((found, rows, best_mean));
            }
        }
        Ok((None, rows, best_mean))
    }

    #[allow(clippy::too_many_arguments)]
    fn pick(
        &self,
        model: &BnnModel,
        obs: &[ActionObs],
        traffic: u32,
        lambda: f64,
        iter: usize,
        worker: usize,
        redraw: bool,
    ) -> Result<[f64; ACTION_DIM]> {
        let cfg = self.cfg;
        let (pool_tag, draw_tag) = if redraw {
            (purpose::REDRAW, purpose::REDRAW + 100)
        } else {
            (purpose::CANDIDATES, purpose::THOMPSON)
        };
        let centers = action_centers(obs, traffic, cfg.requirement, cfg.top_k);
        let mut rng = seed::rng(self.derive(iter, worker, pool_tag));
        let pool = candidates::box_pool(&cfg.pool, &centers, &mut rng);
        let x = Array2::from_shape_fn((pool.len(), POLICY_DIM), |(i, j)| {
            if j == 0 {
                traffic as f64 / MAX_TRAFFIC as f64
            } else if j == 1 {
                (cfg.threshold_ms / cfg.y_max_ms).min(1.0)
            } else {
                pool[i][j - 2]
            }
        });
        let q_hat = model.thompson_predict(x.view(), self.derive(iter, worker, draw_tag))?;
        let mut best = (f64::INFINITY, 0);
        for (i, (u, q)) in pool.iter().zip(&q_hat).enumerate() {
            let usage = u.iter().sum::<f64>() / ACTION_DIM as f64;
            let l = lagrangian(usage, *q, lambda, cfg.requirement);
            if l < best.0 {
                best = (l, i);
            }
        }
        Ok(pool[best.1])
    }
}

/// Train the offline policy against `env` (the augmented simulator).
///
/// Warmup rounds query one uniform action each. Every later round fits the
/// BNN on all observed `(traffic, Y, action) -> QoE` pairs, lets each worker
/// minimize the Lagrangian under one posterior draw, and queries the picks.
/// The multiplier is updated after every round from the round's mean QoE.
/// Feasible queries are then re-measured cheapest first; the incumbent of
/// each traffic level is the cheapest one whose re-measured mean QoE still
/// meets the requirement.
pub fn offline_train(
    env: &dyn Environment,
    cfg: &Stage2Config,
    run_seed: u64,
) -> Result<Stage2Result> {
    cfg.check()?;
    let s = Search { env, cfg, run_seed };
    let warmup = cfg.warmup_rounds();
    let mut obs: Vec<ActionObs> = Vec::with_capacity(cfg.total_queries());
    let mut lambda = 0.0;
    let mut lambdas = Vec::with_capacity(cfg.iterations);
    for it in 0..warmup {
        let mut rng = seed::rng(s.derive(it, 0, purpose::WARMUP));
        let u: [f64; ACTION_DIM] = candidates::uniform_box(1, &mut rng)[0];
        let o = s.observe(it, 0, s.traffic(it, 0), &u, lambda)?;
        lambda = dual_update(lambda, o.qoe, cfg.requirement, cfg.eps);
        lambdas.push(lambda);
        obs.push(o);
    }

    let mut model = BnnModel::new(POLICY_DIM, &cfg.bnn, s.derive(0, 0, purpose::INIT))?;
    let mut trainer = BnnTrainer::new(&model, cfg.train);
    for it in warmup..cfg.iterations {
        let (x, y) = to_rows(&obs, cfg);
        let epochs = if it == warmup {
            cfg.fit_epochs
        } else {
            cfg.round_epochs
        };
        trainer.train(
            &mut model,
            x.view(),
            &y,
            epochs,
            s.derive(it, 0, purpose::TRAIN),
        )?;

        let traffics: Vec<u32> = (0..cfg.parallel).map(|w| s.traffic(it, w)).collect();
        let mut picks: Vec<[f64; ACTION_DIM]> = (0..cfg.parallel)
            .into_par_iter()
            .map(|w| s.pick(&model, &obs, traffics[w], lambda, it, w, false))
            .collect::<Result<_>>()?;
        for w in 1..picks.len() {
            if (0..w).any(|v| picks[v] == picks[w] && traffics[v] == traffics[w]) {
                picks[w] = s.pick(&model, &obs, traffics[w], lambda, it, w, true)?;
            }
        }
        let round: Vec<ActionObs> = picks
            .par_iter()
            .enumerate()
            .map(|(w, u)| s.observe(it, w, traffics[w], u, lambda))
            .collect::<Result<_>>()?;
        let mean_q = round.iter().map(|o| o.qoe).sum::<f64>() / round.len() as f64;
        lambda = dual_update(lambda, mean_q, cfg.requirement, cfg.eps);
        lambdas.push(lambda);
        obs.extend(round);
    }

    let mut traffics = cfg.traffics.clone();
    traffics.sort_unstable();
    traffics.dedup();
    let mut incumbents = Vec::new();
    let mut confirmations = Vec::new();
    let mut primary_best_qoe = obs
        .iter()
        .filter(|o| o.traffic == cfg.primary_traffic)
        .map(|o| o.qoe)
        .fold(0.0, f64::max);
    for &t in &traffics {
        if cfg.confirm_repeats == 0 {
            incumbents.extend(feasible_incumbent(&obs, t, cfg.requirement));
            continue;
        }
        let (inc, rows, best_confirmed) = s.confirm(&obs, t, lambda, confirmations.len())?;
        if t == cfg.primary_traffic && inc.is_none() {
            if let Some(q) = best_confirmed {
                primary_best_qoe = q;
            }
        }
        incumbents.extend(inc);
        confirmations.extend(rows);
    }
    let best = incumbents
        .iter()
        .find(|i| i.traffic == cfg.primary_traffic)
        .copied()
        .ok_or(Error::Infeasible {
            best_qoe: primary_best_qoe,
            requirement: cfg.requirement,
        })?;

    let mut ledger = RunLedger::default();
    for o in obs.iter().chain(&confirmations) {
        ledger.push(LedgerRow {
            iter: o.iter as u64,
            stage: 2,
            kind: Kind::Offline,
            x_or_a: o.action.to_array().to_vec(),
            usage: Some(o.usage),
            qoe: Some(o.qoe),
            kl: None,
            lambda: Some(o.lambda),
            beta: None,
            seed: o.seed,
        })?;
    }
    Ok(Stage2Result {
        policy: model,
        best_action: best.action,
        best,
        lambda_final: lambda,
        lambdas,
        incumbents,
        observations: obs,
        confirmations,
        ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SimEnv;
    use crate::slicesim::{Engine, SimulationParams};

    fn quick_cfg() -> Stage2Config {
        Stage2Config {
            iterations: 14,
            parallel: 3,
            warmup: 8,
            pool: PoolSpec {
                size: 500,
                ..PoolSpec::default()
            },
            duration_s: 20.0,
            bnn: BnnConfig {
                hidden: vec![16, 16],
                ..BnnConfig::default()
            },
            fit_epochs: 30,
            round_epochs: 5,
            ..Stage2Config::default()
        }
    }

    fn env() -> SimEnv {
        SimEnv::new(Engine::default(), SimulationParams::DEFAULT_TWIN)
    }

    #[test]
    fn policy_input_layout() {
        let u = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let x = policy_input(2, 300.0, 2000.0, &u);
        assert_eq!(x[0], 0.5);
        assert_eq!(x[1], 0.15);
        assert_eq!(&x[2..], &u);
        assert_eq!(policy_input(1, 1e9, 2000.0, &u)[1], 1.0);
    }

    #[test]
    fn lambda_rises_when_rounds_miss_the_requirement() {
        let cfg = quick_cfg();
        let r = offline_train(&env(), &cfg, 7).unwrap();
        assert_eq!(r.observations.len(), cfg.total_queries());
        assert_eq!(r.lambdas.len(), cfg.iterations);
        assert!(r.lambdas.iter().all(|l| *l >= 0.0));
        let mut prev = 0.0;
        for it in 0..cfg.iterations {
            let round: Vec<&ActionObs> = r.observations.iter().filter(|o| o.iter == it).collect();
            let mean_q = round.iter().map(|o| o.qoe).sum::<f64>() / round.len() as f64;
            assert!(round.iter().all(|o| o.lambda == prev));
            if mean_q < cfg.requirement {
                assert!(r.lambdas[it] > prev);
            }
            prev = r.lambdas[it];
        }
        assert_eq!(r.lambda_final, prev);
    }

    #[test]
    fn ledger_matches_observations_and_replays() {
        let cfg = quick_cfg();
        let e = env();
        let r = offline_train(&e, &cfg, 3).unwrap();
        assert_eq!(
            r.ledger.rows.len(),
            r.observations.len() + r.confirmations.len()
        );
        assert!(r.confirmations.iter().all(|o| o.iter == cfg.iterations));
        for (row, o) in r
            .ledger
            .rows
            .iter()
            .zip(r.observations.iter().chain(&r.confirmations))
        {
            let a = ConfigAction::from_slice(&row.x_or_a).unwrap();
            assert!(row.qoe.unwrap() >= 0.0 && row.qoe.unwrap() <= 1.0);
            let t = e
                .measure(&a, &NetworkState::new(o.traffic), cfg.duration_s, row.seed)
                .unwrap();
            assert_eq!(Some(qoe(&t, cfg.threshold_ms).unwrap()), row.qoe);
        }
        let again = offline_train(&e, &cfg, 3).unwrap();
        assert_eq!(again.ledger, r.ledger);
        assert_eq!(again.best, r.best);
        assert!(r.best.confirmed_qoe.unwrap() >= cfg.requirement);
    }

    #[test]
    fn confirmation_rejects_lucky_measurements() {
        let cfg = quick_cfg();
        let r = offline_train(&env(), &cfg, 3).unwrap();
        let reps = cfg.confirm_repeats;
        assert_eq!(r.confirmations.len() % reps, 0);
        // Every candidate cheaper than the incumbent failed its re-measurement.
        for chunk in r.confirmations.chunks(reps) {
            if chunk[0].traffic != r.best.traffic {
                continue;
            }
            let mean = chunk.iter().map(|o| o.qoe).sum::<f64>() / reps as f64;
            if chunk[0].usage < r.best.usage {
                assert!(mean < cfg.requirement);
            }
        }
        let plain = offline_train(
            &env(),
            &Stage2Config {
                confirm_repeats: 0,
                ..cfg.clone()
            },
            3,
        )
        .unwrap();
        assert!(plain.confirmations.is_empty());
        assert_eq!(
            plain.best,
            feasible_incumbent(&plain.observations, 1, cfg.requirement).unwrap()
        );
        assert!(plain.best.usage <= r.best.usage);
    }

    #[test]
    fn vacuous_threshold_makes_the_cheapest_query_incumbent() {
        let cfg = Stage2Config {
            threshold_ms: 1e12,
            ..quick_cfg()
        };
        let r = offline_train(&env(), &cfg, 11).unwrap();
        assert!(r.observations.iter().all(|o| o.qoe == 1.0));
        for inc in &r.incumbents {
            let min = r
                .observations
                .iter()
                .filter(|o| o.traffic == inc.traffic)
                .map(|o| o.usage)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(inc.usage, min);
        }
        // With every round over-satisfied the multiplier never leaves zero.
        assert!(r.lambdas.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn incumbent_usage_never_increases() {
        let cfg = quick_cfg();
        let r = offline_train(&env(), &cfg, 5).unwrap();
        for t in 1..=4 {
            let trace = r.incumbent_trace(t, cfg.requirement);
            assert_eq!(trace.len(), cfg.iterations);
            let seen: Vec<f64> = trace.iter().flatten().copied().collect();
            assert!(seen.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn unreachable_requirement_is_infeasible() {
        let cfg = Stage2Config {
            threshold_ms: 1.0,
            ..quick_cfg()
        };
        match offline_train(&env(), &cfg, 2) {
            Err(Error::Infeasible {
                best_qoe,
                requirement,
            }) => {
                assert!(best_qoe < requirement);
            }
            other => panic!("expected Infeasible, got {other:?}"),
        }
    }

    #[test]
    fn centers_prefer_cheap_feasible_then_high_qoe() {
        let mk = |usage_u: f64, q: f64| ActionObs {
            iter: 0,
            worker: 0,
            traffic: 1,
            action: ConfigAction::from_normalized(&[usage_u; ACTION_DIM]),
            usage: usage_u,
            qoe: q,
            lambda: 0.0,
            seed: 0,
        };
        let obs = vec![mk(0.9, 0.95), mk(0.2, 0.91), mk(0.1, 0.5), mk(0.3, 0.7)];
        let c = action_centers(&obs, 1, 0.9, 3);
        assert_eq!(c[0], [0.2; ACTION_DIM]);
        assert_eq!(c[1], [0.9; ACTION_DIM]);
        assert_eq!(c[2], [0.3; ACTION_DIM]);
        // Unknown traffic falls back to all observations.
        assert_eq!(action_centers(&obs, 4, 0.9, 1), vec![[0.2; ACTION_DIM]]);
    }

    #[test]
    fn bad_config_is_rejected() {
        let bad = Stage2Config {
            traffics: vec![2],
            ..quick_cfg()
        };
        assert!(matches!(
            offline_train(&env(), &bad, 1),
            Err(Error::Config(_))
        ));
    }
}
