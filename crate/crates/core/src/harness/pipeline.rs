//! Stage runners with on-disk artifacts, and the end-to-end pipeline.
//!
//! Run directory layout:
//!
//! ```text
//! config.txt  resolved.json
//! stage1/  reference.trace  ledger.jsonl  best_params.json  summary.json
//! stage2/  policy.json  best_action.json  params.json  ledger.jsonl  summary.json
//! stage3/  ledger.jsonl  gp.json  summary.json
//! oracle/  oracle.json
//! baselines/<method>/  ledger.jsonl  summary.json
//! pareto/  summary.json
//! plots/   *.csv
//! ```

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, Method};
use crate::bnn::BnnModel;
use crate::env::SimEnv;
use crate::error::{Error, Result};
use crate::ledger::LedgerWriter;
use crate::metrics::ReferenceOptimum;
use crate::oracle::{grid_oracle, OracleResult};
use crate::seed::{self, purpose, stage};
use crate::slicesim::{
    ConfigAction, Engine, LatencyTrace, NetworkState, RealTwin, SimulationParams,
};
use crate::stage1::{search_parameters, Stage1Config, Stage1Result};
use crate::stage2::{offline_train, ActionObs, Incumbent, Stage2Result};
use crate::stage3::{online_learn, OfflineArtifacts, OnlineState};

use super::config::RunConfig;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn twin(cfg: &RunConfig) -> Result<RealTwin> {
    RealTwin::new(Engine::default(), cfg.twin_params, cfg.sigma_res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub seed: u64,
    pub x_hat: SimulationParams,
    pub best: SimulationParams,
    pub best_kl: f64,
    pub best_weighted: f64,
    /// KL at `x_hat`, the search's starting discrepancy.
    pub initial_kl: f64,
    pub alpha: f64,
    pub queries: usize,
}

/// Collect the reference trace from the twin and run the parameter search.
pub fn stage1_search(
    cfg: &RunConfig,
    s1: &Stage1Config,
    reference_path: Option<&Path>,
) -> Result<(Stage1Result, Stage1Summary)> {
    let reference = twin(cfg)?.collect_reference(
        &s1.state,
        &s1.action,
        s1.duration_s,
        seed::derive(cfg.seed, stage::SIMSEARCH, 0, 0, purpose::REFERENCE),
        reference_path,
    )?;
    let r = search_parameters(&Engine::default(), &reference, &cfg.x_hat, s1, cfg.seed)?;
    let summary = Stage1Summary {
        seed: cfg.seed,
        x_hat: cfg.x_hat,
        best: r.best,
        best_kl: r.best_kl,
        best_weighted: r.best_weighted,
        initial_kl: r.observations.first().map_or(f64::NAN, |o| o.kl),
        alpha: s1.alpha,
        queries: r.observations.len(),
    };
    Ok((r, summary))
}

pub fn run_stage1(cfg: &RunConfig, out: &Path) -> Result<Stage1Summary> {
    create_dir(out)?;
    let (r, summary) = stage1_search(cfg, &cfg.stage1, Some(&out.join("reference.trace")))?;
    r.ledger.save(&out.join("ledger.jsonl"))?;
    write_json(&out.join("best_params.json"), &r.best)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn load_stage1_params(dir: &Path) -> Result<SimulationParams> {
    let p: SimulationParams = read_json(&dir.join("best_params.json"))?;
    Engine::default().bounds.check(&p)?;
    Ok(p)
}

/// Offline outputs handed to stage 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineChoice {
    pub best_action: ConfigAction,
    pub lambda_final: f64,
    /// Incumbent per optimized traffic level.
    pub incumbents: Vec<Incumbent>,
}

impl OfflineChoice {
    /// Incumbent action at `traffic`, else the primary best action.
    pub fn action_for(&self, traffic: u32) -> ConfigAction {
        self.incumbents
            .iter()
            .find(|i| i.traffic == traffic)
            .map_or(self.best_action, |i| i.action)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub seed: u64,
    pub params: SimulationParams,
    pub best: Incumbent,
    pub lambda_final: f64,
    pub queries: usize,
}

pub fn stage2_train(cfg: &RunConfig, params: SimulationParams) -> Result<Stage2Result> {
    offline_train(
        &SimEnv::new(Engine::default(), params),
        &cfg.stage2,
        cfg.seed,
    )
}

pub fn run_stage2(cfg: &RunConfig, params: SimulationParams, out: &Path) -> Result<Stage2Summary> {
    create_dir(out)?;
    let r = stage2_train(cfg, params)?;
    r.ledger.save(&out.join("ledger.jsonl"))?;
    r.policy.save(&out.join("policy.json"))?;
    write_json(&out.join("observations.json"), &r.observations)?;
    write_json(&out.join("params.json"), &params)?;
    write_json(
        &out.join("best_action.json"),
        &OfflineChoice {
            best_action: r.best_action,
            lambda_final: r.lambda_final,
            incumbents: r.incumbents.clone(),
        },
    )?;
    let summary = Stage2Summary {
        seed: cfg.seed,
        params,
        best: r.best,
        lambda_final: r.lambda_final,
        queries: r.observations.len(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Stage-2 artifacts as read back from disk.
pub struct OfflineOutput {
    pub policy: BnnModel,
    pub observations: Vec<ActionObs>,
    pub choice: OfflineChoice,
    pub params: SimulationParams,
}

impl OfflineOutput {
    pub fn from_result(r: Stage2Result, params: SimulationParams) -> Self {
        OfflineOutput {
            policy: r.policy,
            observations: r.observations,
            choice: OfflineChoice {
                best_action: r.best_action,
                lambda_final: r.lambda_final,
                incumbents: r.incumbents,
            },
            params,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(OfflineOutput {
            policy: BnnModel::load(&dir.join("policy.json"))?,
            observations: read_json(&dir.join("observations.json"))?,
            choice: read_json(&dir.join("best_action.json"))?,
            params: read_json(&dir.join("params.json"))?,
        })
    }

    pub fn artifacts(&self, traffic: u32) -> OfflineArtifacts<'_> {
        OfflineArtifacts {
            policy: &self.policy,
            observations: &self.observations,
            best_action: self.choice.action_for(traffic),
            lambda: self.choice.lambda_final,
        }
    }
}

/// Grid optimum on the twin at the stage-3 traffic, the reference of
/// every online regret.
pub fn online_oracle(cfg: &RunConfig) -> Result<OracleResult> {
    let (o, _) = grid_oracle(
        &twin(cfg)?,
        &NetworkState::new(cfg.stage3.traffic),
        cfg.stage3.requirement,
        cfg.stage3.threshold_ms,
        cfg.oracle_duration_s,
        cfg.seed,
    )?;
    Ok(o)
}

/// Load `path` if it holds an oracle for the same traffic, requirement
/// and threshold; otherwise compute it and write it there.
pub fn cached_online_oracle(cfg: &RunConfig, path: &Path) -> Result<OracleResult> {
    if path.exists() {
        let o = OracleResult::load(path)?;
        if o.traffic == cfg.stage3.traffic
            && o.requirement == cfg.stage3.requirement
            && o.threshold_ms == cfg.stage3.threshold_ms
        {
            return Ok(o);
        }
    }
    let o = online_oracle(cfg)?;
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    o.save(path)?;
    Ok(o)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSummary {
    pub method: String,
    pub seed: u64,
    pub reference: ReferenceOptimum,
    pub iterations: usize,
    pub avg_usage_regret: f64,
    pub avg_qoe_regret: f64,
    pub lambda_final: f64,
    /// Mean |predicted residual| over the second half of the run.
    pub mean_abs_residual_late: Option<f64>,
}

pub fn stage3_learn(
    cfg: &RunConfig,
    offline: &OfflineOutput,
    reference: ReferenceOptimum,
    sink: Option<&mut LedgerWriter>,
) -> Result<OnlineState> {
    let real = twin(cfg)?;
    let sim = SimEnv::new(Engine::default(), offline.params);
    online_learn(
        &real,
        &sim,
        &offline.artifacts(cfg.stage3.traffic),
        reference,
        &cfg.stage3,
        cfg.seed,
        sink,
    )
}

pub fn run_stage3(
    cfg: &RunConfig,
    offline_dir: &Path,
    oracle_path: &Path,
    out: &Path,
) -> Result<OnlineSummary> {
    create_dir(out)?;
    let offline = OfflineOutput::load(offline_dir)?;
    let reference = cached_online_oracle(cfg, oracle_path)?.reference();
    let mut sink = LedgerWriter::create(&out.join("ledger.jsonl"))?;
    let state = stage3_learn(cfg, &offline, reference, Some(&mut sink))?;
    if let Some(gp) = &state.gp {
        gp.checkpoint().save(&out.join("gp.json"))?;
    }
    let n = cfg.stage3.iterations;
    let summary = OnlineSummary {
        method: "proposed".into(),
        seed: cfg.seed,
        reference,
        iterations: state.ledger.regret.iterations(),
        avg_usage_regret: state.ledger.regret.average_usage(),
        avg_qoe_regret: state.ledger.regret.average_qoe(),
        lambda_final: state.lambda,
        mean_abs_residual_late: state.mean_abs_residual(n / 2, n),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Run one baseline against the twin. The offline filter needs stage-2
/// output in `offline_dir`.
pub fn run_baseline(
    cfg: &RunConfig,
    method: Method,
    offline_dir: Option<&Path>,
    oracle_path: &Path,
    out: &Path,
) -> Result<OnlineSummary> {
    create_dir(out)?;
    let reference = cached_online_oracle(cfg, oracle_path)?.reference();
    let real = twin(cfg)?;
    let mut sink = LedgerWriter::create(&out.join("ledger.jsonl"))?;
    let bc = &cfg.baseline;
    let run = match method {
        Method::GpEi => baselines::run_gp_ei(&real, bc, reference, cfg.seed, Some(&mut sink))?,
        Method::GpUcb => baselines::run_gp_ucb(&real, bc, reference, cfg.seed, Some(&mut sink))?,
        Method::OfflineFilter => {
            let dir = offline_dir.ok_or_else(|| {
                Error::InvalidArgument(
                    "the offline-filter baseline needs stage-2 output (--offline-from)".into(),
                )
            })?;
            let offline = OfflineOutput::load(dir)?;
            let predict = baselines::policy_predictor(&offline.policy, bc);
            baselines::run_offline_surrogate_filter(
                &real,
                bc,
                &predict,
                None,
                reference,
                cfg.seed,
                Some(&mut sink),
            )?
        }
    };
    let regret = &run.ledger.regret;
    let summary = OnlineSummary {
        method: method.name().into(),
        seed: cfg.seed,
        reference,
        iterations: regret.iterations(),
        avg_usage_regret: regret.average_usage(),
        avg_qoe_regret: regret.average_qoe(),
        lambda_final: run.lambdas.last().copied().unwrap_or(0.0),
        mean_abs_residual_late: None,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One point of the distance/discrepancy tradeoff sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub alpha: f64,
    /// Normalized distance of the best parameters from `x_hat`.
    pub distance: f64,
    pub kl: f64,
}

/// Shortened stage-1 searches, one per weight in `pareto_alphas`.
pub fn run_pareto(cfg: &RunConfig, out: &Path) -> Result<Vec<ParetoPoint>> {
    create_dir(out)?;
    let bounds = Engine::default().bounds;
    let anchor = bounds.normalize(&cfg.x_hat);
    let mut points = Vec::with_capacity(cfg.pareto_alphas.len());
    for &alpha in &cfg.pareto_alphas {
        let s1 = Stage1Config {
            alpha,
            iterations: cfg.pareto_iterations,
            ..cfg.stage1.clone()
        };
        let (r, _) = stage1_search(cfg, &s1, None)?;
        let best = bounds.normalize(&r.best);
        let distance = best
            .iter()
            .zip(anchor.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        points.push(ParetoPoint {
            alpha,
            distance,
            kl: r.best_kl,
        });
    }
    write_json(&out.join("summary.json"), &points)?;
    Ok(points)
}

/// Which pipeline steps to execute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stages {
    pub stage1: bool,
    pub stage2: bool,
    pub stage3: bool,
    pub baselines: bool,
    pub pareto: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            stage1: true,
            stage2: true,
            stage3: true,
            baselines: false,
            pareto: false,
        }
    }
}

impl std::str::FromStr for Stages {
    type Err = Error;

    /// Comma-separated list of `1`, `2`, `3`, `baselines`, `pareto`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Stages {
            stage1: false,
            stage2: false,
            stage3: false,
            baselines: false,
            pareto: false,
        };
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match item {
                "1" => out.stage1 = true,
                "2" => out.stage2 = true,
                "3" => out.stage3 = true,
                "baselines" => out.baselines = true,
                "pareto" => out.pareto = true,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown stage `{item}` (expected 1, 2, 3, baselines or pareto)"
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// Paths of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }
    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1")
    }
    pub fn stage2(&self) -> PathBuf {
        self.root.join("stage2")
    }
    pub fn stage3(&self) -> PathBuf {
        self.root.join("stage3")
    }
    pub fn oracle(&self) -> PathBuf {
        self.root.join("oracle").join("oracle.json")
    }
    pub fn baseline(&self, m: Method) -> PathBuf {
        self.root.join("baselines").join(m.name())
    }
    pub fn pareto(&self) -> PathBuf {
        self.root.join("pareto")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Execute the selected stages into `run`. Stage 2 reads its simulator
/// parameters from `params_from` when given (a stage-1 output directory),
/// else from the run's own stage-1 output; later stages likewise read the
/// persisted outputs of earlier ones, so any suffix of the pipeline can be
/// rerun alone.
pub fn run_pipeline(
    cfg: &RunConfig,
    config_text: &str,
    run: &RunDir,
    stages: &Stages,
    params_from: Option<&Path>,
) -> Result<()> {
    create_dir(&run.root)?;
    let cfg_path = run.root.join("config.txt");
    std::fs::write(&cfg_path, config_text).map_err(|e| Error::io(&cfg_path, e))?;
    write_json(&run.root.join("resolved.json"), cfg)?;
    if stages.stage1 {
        run_stage1(cfg, &run.stage1())?;
    }
    if stages.stage2 {
        let params = load_stage1_params(params_from.unwrap_or(&run.stage1()))?;
        run_stage2(cfg, params, &run.stage2())?;
    }
    if stages.stage3 {
        run_stage3(cfg, &run.stage2(), &run.oracle(), &run.stage3())?;
    }
    if stages.baselines {
        for m in [Method::GpEi, Method::GpUcb, Method::OfflineFilter] {
            run_baseline(cfg, m, Some(&run.stage2()), &run.oracle(), &run.baseline(m))?;
        }
    }
    if stages.pareto {
        run_pareto(cfg, &run.pareto())?;
    }
    Ok(())
}

/// Reference trace of a finished stage-1 run.
pub fn load_reference(dir: &Path) -> Result<LatencyTrace> {
    LatencyTrace::load(&dir.join("reference.trace"))
}
