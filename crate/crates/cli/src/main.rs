use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use slice_core::baselines::Method;
use slice_core::env::{Environment, SimEnv};
use slice_core::harness::pipeline::{self, load_stage1_params, RunDir, Stages};
use slice_core::harness::{emit_plot_data, RunConfig};
use slice_core::oracle::grid_oracle;
use slice_core::slicesim::{Engine, NetworkState};

#[derive(Parser)]
#[command(
    name = "atlas",
    version,
    about = "Learn-to-configure pipeline for network slices"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides both the config and ATLAS_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> anyhow::Result<(RunConfig, String)> {
        let text = std::fs::read_to_string(&self.config).map_err(|e| {
            slice_core::Error::Config(format!("cannot read {}: {e}", self.config.display()))
        })?;
        let mut cfg = RunConfig::parse(&text, &self.config.display().to_string())?
            .with_seed_override(
                std::env::var(slice_core::harness::config::SEED_ENV)
                    .ok()
                    .as_deref(),
            )?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok((cfg, text))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Search simulator parameters against the twin's reference trace.
    Stage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the offline policy in the simulator calibrated by stage 1.
    Stage2 {
        #[command(flatten)]
        common: Common,
        /// Stage-1 output directory.
        #[arg(long)]
        params_from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online learning against the twin.
    Stage3 {
        #[command(flatten)]
        common: Common,
        /// Stage-2 output directory.
        #[arg(long)]
        offline_from: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reference optimum; computed and written here when absent.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Run a comparison method against the twin.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// gp-ei, gp-ucb or offline-filter.
        #[arg(long)]
        method: Method,
        /// Stage-2 output directory (offline-filter only).
        #[arg(long)]
        offline_from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Stages 1 to 3 with artifact hand-off in one run directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of 1,2,3,baselines,pareto.
        #[arg(long, default_value = "1,2,3")]
        stages: Stages,
        /// Stage-1 output directory to take simulator parameters from.
        #[arg(long)]
        params_from: Option<PathBuf>,
    },
    /// Export CSVs for plotting from a run directory.
    PlotData {
        #[arg(long)]
        run: PathBuf,
    },
    /// Brute-force grid optimum at the stage-3 traffic.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
        /// Search the simulator with these stage-1 parameters instead of the twin.
        #[arg(long)]
        params_from: Option<PathBuf>,
        /// Also write every grid point here as JSON.
        #[arg(long)]
        points: Option<PathBuf>,
    },
}

fn oracle_path(given: Option<PathBuf>, out: &Path) -> PathBuf {
    given.unwrap_or_else(|| out.join("oracle.json"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Stage1 { common, out } => {
            let (cfg, _) = common.load()?;
            let s = pipeline::run_stage1(&cfg, &out)?;
            println!(
                "best KL {:.4} (start {:.4}) at {:?}",
                s.best_kl,
                s.initial_kl,
                s.best.to_array()
            );
        }
        Cmd::Stage2 {
            common,
            params_from,
            out,
        } => {
            let (cfg, _) = common.load()?;
            let params = load_stage1_params(&params_from)?;
            let s = pipeline::run_stage2(&cfg, params, &out)?;
            println!(
                "best action {:?} usage {:.4} QoE {:.4} lambda {:.4}",
                s.best.action.to_array(),
                s.best.usage,
                s.best.confirmed_qoe.unwrap_or(s.best.qoe),
                s.lambda_final
            );
        }
        Cmd::Stage3 {
            common,
            offline_from,
            out,
            oracle,
        } => {
            let (cfg, _) = common.load()?;
            let oracle = oracle_path(oracle, &out);
            let s = pipeline::run_stage3(&cfg, &offline_from, &oracle, &out)?;
            println!(
                "avg usage regret {:.4}, avg QoE regret {:.4}",
                s.avg_usage_regret, s.avg_qoe_regret
            );
        }
        Cmd::Baseline {
            common,
            method,
            offline_from,
            out,
            oracle,
        } => {
            let (cfg, _) = common.load()?;
            let oracle = oracle_path(oracle, &out);
            let s = pipeline::run_baseline(&cfg, method, offline_from.as_deref(), &oracle, &out)?;
            println!(
                "{}: avg usage regret {:.4}, avg QoE regret {:.4}",
                s.method, s.avg_usage_regret, s.avg_qoe_regret
            );
        }
        Cmd::Pipeline {
            common,
            out,
            stages,
            params_from,
        } => {
            let (cfg, text) = common.load()?;
            pipeline::run_pipeline(
                &cfg,
                &text,
                &RunDir::new(&out),
                &stages,
                params_from.as_deref(),
            )?;
            println!("run written to {}", out.display());
        }
        Cmd::PlotData { run } => {
            for p in emit_plot_data(&RunDir::new(run))? {
                println!("{}", p.display());
            }
        }
        Cmd::Oracle {
            common,
            out,
            params_from,
            points,
        } => {
            let (cfg, _) = common.load()?;
            let (o, pts) = match params_from {
                Some(dir) => {
                    let env = SimEnv::new(Engine::default(), load_stage1_params(&dir)?);
                    grid(&env, &cfg)?
                }
                None => grid(&pipeline::twin(&cfg)?, &cfg)?,
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
            }
            o.save(&out)?;
            if let Some(p) = points {
                pipeline::write_json(&p, &pts)?;
            }
            println!(
                "grid optimum {:?} usage {:.4} QoE {:.4} ({} of {} feasible)",
                o.action.to_array(),
                o.usage,
                o.qoe,
                o.feasible,
                o.evaluated
            );
        }
    }
    Ok(())
}

fn grid(
    env: &dyn Environment,
    cfg: &RunConfig,
) -> slice_core::Result<(
    slice_core::oracle::OracleResult,
    Vec<slice_core::oracle::GridPoint>,
)> {
    grid_oracle(
        env,
        &NetworkState::new(cfg.stage3.traffic),
        cfg.stage3.requirement,
        cfg.stage3.threshold_ms,
        cfg.oracle_duration_s,
        cfg.seed,
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<slice_core::Error>()
                .map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
