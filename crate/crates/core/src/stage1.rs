//! Simulator-parameter search: parallel Thompson sampling with a BNN
//! surrogate of the KL discrepancy, minimizing KL plus a weighted distance
//! from the original parameters inside a normalized ball.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{BnnConfig, BnnModel, BnnTrainer, TrainOptions};
use crate::candidates::{self, PoolSpec};
use crate::error::{Error, Result};
use crate::ledger::{Kind, LedgerRow, RunLedger};
use crate::metrics::{weighted_discrepancy, KlEstimator};
use crate::seed::{self, purpose, stage};
use crate::slicesim::{
    ConfigAction, Engine, LatencyTrace, NetworkState, ParamBox, SimulationParams, PARAM_DIM,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    /// Total rounds `T`, warmup included.
    pub iterations: usize,
    /// Workers per round `P`.
    pub parallel: usize,
    /// Purely random single-query rounds `W`; `None` means `max(20, T/10)`.
    pub warmup: Option<usize>,
    pub pool: PoolSpec,
    pub alpha: f64,
    /// Radius `H` of the allowed ball around `x_hat`, normalized units.
    pub radius: f64,
    pub duration_s: f64,
    /// Network state and action the reference trace was collected under.
    pub state: NetworkState,
    pub action: ConfigAction,
    pub kl: KlEstimator,
    pub bnn: BnnConfig,
    pub train: TrainOptions,
    /// Epochs of the first fit after warmup.
    pub fit_epochs: usize,
    /// Warm-started epochs at every later round.
    pub round_epochs: usize,
    /// Number of best observed points used as centers for local candidates.
    pub top_k: usize,
}

/// Backhaul-limited probe configuration used for the reference trace.
pub const REFERENCE_ACTION: ConfigAction = ConfigAction {
    bandwidth_ul: 50.0,
    bandwidth_dl: 50.0,
    mcs_offset_ul: 0.0,
    mcs_offset_dl: 0.0,
    backhaul_bw: 2.0,
    cpu_ratio: 1.0,
};

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            iterations: 300,
            parallel: 8,
            warmup: None,
            pool: PoolSpec::default(),
            alpha: 7.0,
            radius: 0.4,
            duration_s: 60.0,
            state: NetworkState::new(1),
            action: REFERENCE_ACTION,
            kl: KlEstimator::default(),
            bnn: BnnConfig::default(),
            train: TrainOptions::default(),
            fit_epochs: 200,
            round_epochs: 20,
            top_k: 5,
        }
    }
}

impl Stage1Config {
    pub fn warmup_rounds(&self) -> usize {
        self.warmup
            .unwrap_or_else(|| (self.iterations / 10).max(20))
            .min(self.iterations)
    }

    /// `W + (T - W) * P`.
    pub fn total_queries(&self) -> usize {
        let w = self.warmup_rounds();
        w + (self.iterations - w) * self.parallel
    }

    pub fn check(&self) -> Result<()> {
        if self.iterations == 0 || self.parallel == 0 || self.pool.size == 0 {
            return Err(Error::Config(
                "stage1 iterations, parallel and pool size must be >= 1".into(),
            ));
        }
        if !(self.alpha >= 0.0) || !(self.radius > 0.0) || !(self.duration_s > 0.0) {
            return Err(Error::Config(
                "stage1 needs alpha >= 0, radius > 0 and duration_s > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One simulator query of the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub iter: usize,
    pub worker: usize,
    pub params: SimulationParams,
    pub kl: f64,
    pub weighted: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub best: SimulationParams,
    pub best_kl: f64,
    pub best_weighted: f64,
    pub observations: Vec<Observation>,
    pub ledger: RunLedger,
    pub surrogate: BnnModel,
}

impl Stage1Result {
    /// Best-so-far weighted discrepancy after each round.
    pub fn convergence(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        let mut best = f64::INFINITY;
        for o in &self.observations {
            best = best.min(o.weighted);
            match out.last_mut() {
                Some(last) if last.0 == o.iter => last.1 = best,
                _ => out.push((o.iter, best)),
            }
        }
        out
    }
}

/// KL between `reference` and one simulation at `x`.
pub fn discrepancy_at(
    engine: &Engine,
    reference: &LatencyTrace,
    x: &SimulationParams,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<f64> {
    let sim = engine
        .simulate(x, &cfg.action, &cfg.state, cfg.duration_s, seed)
        .map_err(|e| Error::Query {
            context: format!("simulate at x = {:?}", x.to_array()),
            source: Box::new(e),
        })?;
    cfg.kl.divergence(reference, &sim)
}

/// `n` candidates uniform in the normalized box, within distance `radius`
/// of `x_hat`.
pub fn sample_param_candidates(
    x_hat: &SimulationParams,
    bounds: &ParamBox,
    radius: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<SimulationParams>> {
    let anchor = bounds.normalize(x_hat);
    let mut rng = seed::rng(seed);
    Ok(candidates::uniform_ball(&anchor, radius, n, &mut rng)?
        .iter()
        .map(|u| bounds.denormalize(u))
        .collect())
}

fn to_rows(obs: &[Observation], bounds: &ParamBox) -> (Array2<f64>, Vec<f64>) {
    let rows: Vec<[f64; PARAM_DIM]> = obs.iter().map(|o| bounds.normalize(&o.params)).collect();
    let x = Array2::from_shape_fn((rows.len(), PARAM_DIM), |(i, j)| rows[i][j]);
    (x, obs.iter().map(|o| o.kl).collect())
}

struct Search<'a> {
    engine: &'a Engine,
    reference: &'a LatencyTrace,
    x_hat: SimulationParams,
    anchor: [f64; PARAM_DIM],
    bounds: ParamBox,
    cfg: &'a Stage1Config,
    run_seed: u64,
}

impl Search<'_> {
    fn observe(&self, iter: usize, worker: usize, u: &[f64; PARAM_DIM]) -> Result<Observation> {
        let params = self.bounds.denormalize(u);
        let seed = seed::derive(
            self.run_seed,
            stage::SIMSEARCH,
            iter as u64,
            worker as u64,
            purpose::QUERY,
        );
        let kl = discrepancy_at(self.engine, self.reference, &params, self.cfg, seed)?;
        let weighted = weighted_discrepancy(kl, &params, &self.x_hat, self.cfg.alpha, &self.bounds);
        Ok(Observation {
            iter,
            worker,
            params,
            kl,
            weighted,
            seed,
        })
    }

    fn pick(
        &self,
        model: &BnnModel,
        centers: &[[f64; PARAM_DIM]],
        iter: usize,
        worker: usize,
        redraw: bool,
    ) -> Result<[f64; PARAM_DIM]> {
        let tag = if redraw {
            purpose::REDRAW
        } else {
            purpose::CANDIDATES
        };
        let mut rng = seed::rng(seed::derive(
            self.run_seed,
            stage::SIMSEARCH,
            iter as u64,
            worker as u64,
            tag,
        ));
        let pool = candidates::ball_pool(
            &self.cfg.pool,
            &self.anchor,
            self.cfg.radius,
            centers,
            &mut rng,
        )?;
        let x = Array2::from_shape_fn((pool.len(), PARAM_DIM), |(i, j)| pool[i][j]);
        let draw = seed::derive(
            self.run_seed,
            stage::SIMSEARCH,
            iter as u64,
            worker as u64,
            if redraw {
                purpose::REDRAW + 100
            } else {
                purpose::THOMPSON
            },
        );
        let kl_hat = model.thompson_predict(x.view(), draw)?;
        let mut best = (f64::INFINITY, 0);
        for (i, (u, k)) in pool.iter().zip(&kl_hat).enumerate() {
            let d = u
                .iter()
                .zip(&self.anchor)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let score = k + self.cfg.alpha * d;
            if score < best.0 {
                best = (score, i);
            }
        }
        Ok(pool[best.1])
    }
}

/// Run the search against the frozen reference trace.
///
/// Round 0 queries `x_hat` itself; the remaining warmup rounds query
/// uniform points of the ball. Every later round fits the surrogate, lets
/// each of the `P` workers minimize one posterior draw over its own pool,
/// and queries all picks.
pub fn search_parameters(
    engine: &Engine,
    reference: &LatencyTrace,
    x_hat: &SimulationParams,
    cfg: &Stage1Config,
    run_seed: u64,
) -> Result<Stage1Result> {
    cfg.check()?;
    if reference.is_empty() {
        return Err(Error::Empty("reference trace"));
    }
    let bounds = engine.bounds;
    bounds.check(x_hat)?;
    let s = Search {
        engine,
        reference,
        x_hat: *x_hat,
        anchor: bounds.normalize(x_hat),
        bounds,
        cfg,
        run_seed,
    };
    let warmup = cfg.warmup_rounds();
    let mut obs: Vec<Observation> = Vec::with_capacity(cfg.total_queries());
    for it in 0..warmup {
        let u = if it == 0 {
            s.anchor
        } else {
            let mut rng = seed::rng(seed::derive(
                run_seed,
                stage::SIMSEARCH,
                it as u64,
                0,
                purpose::WARMUP,
            ));
            candidates::uniform_ball(&s.anchor, cfg.radius, 1, &mut rng)?[0]
        };
        obs.push(s.observe(it, 0, &u)?);
    }

    let mut model = BnnModel::new(
        PARAM_DIM,
        &cfg.bnn,
        seed::derive(run_seed, stage::SIMSEARCH, 0, 0, purpose::INIT),
    )?;
    let mut trainer = BnnTrainer::new(&model, cfg.train);
    for it in warmup..cfg.iterations {
        let (x, y) = to_rows(&obs, &bounds);
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
            seed::derive(run_seed, stage::SIMSEARCH, it as u64, 0, purpose::TRAIN),
        )?;

        let mut ranked: Vec<&Observation> = obs.iter().collect();
        ranked.sort_by(|a, b| a.weighted.total_cmp(&b.weighted));
        let centers: Vec<[f64; PARAM_DIM]> = ranked
            .iter()
            .take(cfg.top_k)
            .map(|o| bounds.normalize(&o.params))
            .collect();

        let mut picks: Vec<[f64; PARAM_DIM]> = (0..cfg.parallel)
            .into_par_iter()
            .map(|w| s.pick(&model, &centers, it, w, false))
            .collect::<Result<_>>()?;
        for w in 1..picks.len() {
            if picks[..w].contains(&picks[w]) {
                picks[w] = s.pick(&model, &centers, it, w, true)?;
            }
        }
        let round: Vec<Observation> = picks
            .par_iter()
            .enumerate()
            .map(|(w, u)| s.observe(it, w, u))
            .collect::<Result<_>>()?;
        obs.extend(round);
    }

    let best = obs
        .iter()
        .min_by(|a, b| a.weighted.total_cmp(&b.weighted))
        .expect("at least one query")
        .clone();
    let mut ledger = RunLedger::default();
    for o in &obs {
        ledger.push(LedgerRow {
            iter: o.iter as u64,
            stage: 1,
            kind: Kind::Offline,
            x_or_a: o.params.to_array().to_vec(),
            usage: None,
            qoe: None,
            kl: Some(o.kl),
            lambda: None,
            beta: None,
            seed: o.seed,
        })?;
    }
    Ok(Stage1Result {
        best: best.params,
        best_kl: best.kl,
        best_weighted: best.weighted,
        observations: obs,
        ledger,
        surrogate: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slicesim::RealTwin;

    fn quick_cfg() -> Stage1Config {
        Stage1Config {
            iterations: 14,
            parallel: 3,
            warmup: Some(8),
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
            ..Stage1Config::default()
        }
    }

    #[test]
    fn candidates_respect_radius() {
        let b = ParamBox::default();
        let x_hat = SimulationParams::ORIGINAL;
        for h in [0.05, 0.2, 0.4] {
            let c = sample_param_candidates(&x_hat, &b, h, 300, 3).unwrap();
            assert!(c.iter().all(|x| b.distance(x, &x_hat) <= h + 1e-12));
            assert!(c.iter().all(|x| b.check(x).is_ok()));
        }
        let c = sample_param_candidates(&x_hat, &b, 3.0, 50, 3).unwrap();
        assert_eq!(c.len(), 50);
    }

    #[test]
    fn query_count_and_ledger_replay() {
        let engine = Engine::default();
        let twin = RealTwin::default_twin();
        let cfg = quick_cfg();
        let x_hat = SimulationParams::ORIGINAL;
        let reference = twin
            .query(&cfg.action, &cfg.state, cfg.duration_s, 1)
            .unwrap();
        let r = search_parameters(&engine, &reference, &x_hat, &cfg, 42).unwrap();
        assert_eq!(r.observations.len(), 8 + 6 * 3);
        assert_eq!(r.observations.len(), cfg.total_queries());
        assert_eq!(r.ledger.rows.len(), r.observations.len());
        let b = ParamBox::default();
        for row in &r.ledger.rows {
            let x = SimulationParams::from_slice(&row.x_or_a).unwrap();
            assert!(b.distance(&x, &x_hat) <= cfg.radius + 1e-9);
            let kl = discrepancy_at(&engine, &reference, &x, &cfg, row.seed).unwrap();
            assert_eq!(Some(kl), row.kl);
        }
        let conv = r.convergence();
        assert_eq!(conv.len(), cfg.iterations);
        assert!(conv.windows(2).all(|w| w[1].1 <= w[0].1));
        assert_eq!(conv.last().unwrap().1, r.best_weighted);

        let again = search_parameters(&engine, &reference, &x_hat, &cfg, 42).unwrap();
        assert_eq!(again.ledger, r.ledger);
    }

    #[test]
    fn matched_twin_keeps_original() {
        // With no gap the incumbent is no worse than the original point.
        let engine = Engine::default();
        let twin = RealTwin::new(engine.clone(), SimulationParams::ORIGINAL, 0.0).unwrap();
        let cfg = quick_cfg();
        let x_hat = SimulationParams::ORIGINAL;
        let reference = twin
            .query(&cfg.action, &cfg.state, cfg.duration_s, 5)
            .unwrap();
        let r = search_parameters(&engine, &reference, &x_hat, &cfg, 1).unwrap();
        let at_hat = r.observations[0].weighted;
        assert_eq!(r.observations[0].params, x_hat);
        assert!(r.best_weighted <= at_hat);
    }
}
