//! Run configuration: flat `key = value` lines with dotted keys and `#`
//! comments.
//!
//! Shared keys (`slice.*`, `dual.*`, `bnn.*`, `train.*`, `pool.*`, `gp.*`)
//! apply to every stage that uses them. Keys are applied in table order,
//! not file order, so `train.optimizer` never clobbers an explicit
//! `train.lr`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::bnn::TrainOptions;
use crate::error::{Error, Result};
use crate::slicesim::{ConfigAction, NetworkState, SimulationParams, ACTION_DIM, PARAM_DIM};
use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;
use crate::stage3::Stage3Config;

pub const REQUIRED: [&str; 3] = ["seed", "twin.params", "twin.sigma_res"];

/// Environment variable overriding `seed`.
pub const SEED_ENV: &str = "ATLAS_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub twin_params: SimulationParams,
    pub sigma_res: f64,
    /// Simulator parameters the search starts from.
    pub x_hat: SimulationParams,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub baseline: BaselineConfig,
    pub oracle_duration_s: f64,
    /// Weights of the distance/KL tradeoff sweep; empty skips it.
    pub pareto_alphas: Vec<f64>,
    pub pareto_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            twin_params: SimulationParams::DEFAULT_TWIN,
            sigma_res: crate::slicesim::twin::DEFAULT_SIGMA_RES,
            x_hat: SimulationParams::ORIGINAL,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            baseline: BaselineConfig::default(),
            oracle_duration_s: 60.0,
            pareto_alphas: vec![1.0, 3.0, 5.0, 7.0, 10.0, 15.0],
            pareto_iterations: 60,
        }
    }
}

type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;

fn num(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn int(v: &str) -> std::result::Result<u64, String> {
    v.parse()
        .map_err(|_| format!("`{v}` is not a non-negative integer"))
}

fn count(v: &str) -> std::result::Result<usize, String> {
    int(v).map(|x| x as usize)
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true or false")),
    }
}

fn items(v: &str) -> Vec<&str> {
    let v = v.trim();
    let v = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .unwrap_or(v);
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

fn nums(v: &str) -> std::result::Result<Vec<f64>, String> {
    items(v).into_iter().map(num).collect()
}

fn fixed<const N: usize>(v: &str) -> std::result::Result<[f64; N], String> {
    let xs = nums(v)?;
    xs.as_slice()
        .try_into()
        .map_err(|_| format!("expected {N} comma-separated numbers, got {}", xs.len()))
}

fn counts(v: &str) -> std::result::Result<Vec<usize>, String> {
    items(v).into_iter().map(count).collect()
}

fn params(v: &str) -> std::result::Result<SimulationParams, String> {
    if v == "default" {
        return Ok(SimulationParams::DEFAULT_TWIN);
    }
    if v == "original" {
        return Ok(SimulationParams::ORIGINAL);
    }
    Ok(SimulationParams::from_array(fixed::<PARAM_DIM>(v)?))
}

fn traffic(v: &str) -> std::result::Result<u32, String> {
    let t = int(v)? as u32;
    NetworkState::new(t).check().map_err(|e| e.to_string())?;
    Ok(t)
}

/// Every accepted key, in application order.
const KEYS: &[(&str, Setter)] = &[
    ("seed", |c, v| {
        c.seed = int(v)?;
        Ok(())
    }),
    ("twin.params", |c, v| {
        c.twin_params = params(v)?;
        Ok(())
    }),
    ("twin.sigma_res", |c, v| {
        c.sigma_res = num(v)?;
        Ok(())
    }),
    ("sim.x_hat", |c, v| {
        c.x_hat = params(v)?;
        Ok(())
    }),
    ("slice.requirement", |c, v| {
        let x = num(v)?;
        c.stage2.requirement = x;
        c.stage3.requirement = x;
        c.baseline.requirement = x;
        Ok(())
    }),
    ("slice.threshold_ms", |c, v| {
        let x = num(v)?;
        c.stage2.threshold_ms = x;
        c.stage3.threshold_ms = x;
        c.baseline.threshold_ms = x;
        Ok(())
    }),
    ("slice.y_max_ms", |c, v| {
        let x = num(v)?;
        c.stage2.y_max_ms = x;
        c.stage3.y_max_ms = x;
        c.baseline.y_max_ms = x;
        Ok(())
    }),
    ("dual.eps", |c, v| {
        let x = num(v)?;
        c.stage2.eps = x;
        c.stage3.eps = x;
        c.baseline.eps = x;
        Ok(())
    }),
    ("bnn.hidden", |c, v| {
        let h = counts(v)?;
        c.stage1.bnn.hidden = h.clone();
        c.stage2.bnn.hidden = h;
        Ok(())
    }),
    ("bnn.prior_sigma", |c, v| {
        let x = num(v)?;
        c.stage1.bnn.prior_sigma = x;
        c.stage2.bnn.prior_sigma = x;
        Ok(())
    }),
    ("bnn.lik_sigma", |c, v| {
        let x = num(v)?;
        c.stage1.bnn.lik_sigma = x;
        c.stage2.bnn.lik_sigma = x;
        Ok(())
    }),
    ("train.optimizer", |c, v| {
        let t = match v {
            "adam" => TrainOptions::adam(1e-3),
            "adadelta" => TrainOptions::adadelta(),
            _ => return Err(format!("`{v}` is not adam or adadelta")),
        };
        c.stage1.train = t;
        c.stage2.train = t;
        c.stage3.refine = t;
        Ok(())
    }),
    ("train.lr", |c, v| {
        let x = num(v)?;
        c.stage1.train.lr = x;
        c.stage2.train.lr = x;
        c.stage3.refine.lr = x;
        Ok(())
    }),
    ("train.lr_decay", |c, v| {
        let x = num(v)?;
        c.stage1.train.lr_decay = x;
        c.stage2.train.lr_decay = x;
        c.stage3.refine.lr_decay = x;
        Ok(())
    }),
    ("train.batch_size", |c, v| {
        let x = count(v)?;
        c.stage1.train.batch_size = x;
        c.stage2.train.batch_size = x;
        c.stage3.refine.batch_size = x;
        Ok(())
    }),
    ("pool.size", |c, v| {
        let x = count(v)?;
        c.stage1.pool.size = x;
        c.stage2.pool.size = x;
        c.stage3.pool.size = x;
        c.baseline.pool.size = x;
        Ok(())
    }),
    ("pool.local_fraction", |c, v| {
        let x = num(v)?;
        c.stage1.pool.local_fraction = x;
        c.stage2.pool.local_fraction = x;
        c.stage3.pool.local_fraction = x;
        c.baseline.pool.local_fraction = x;
        Ok(())
    }),
    ("pool.local_scale", |c, v| {
        let x = num(v)?;
        c.stage1.pool.local_scale = x;
        c.stage2.pool.local_scale = x;
        c.stage3.pool.local_scale = x;
        c.baseline.pool.local_scale = x;
        Ok(())
    }),
    ("gp.lengthscale", |c, v| {
        let x = num(v)?;
        c.stage3.gp.lengthscale = x;
        c.baseline.gp.lengthscale = x;
        Ok(())
    }),
    ("gp.signal_var", |c, v| {
        let x = num(v)?;
        c.stage3.gp.signal_var = x;
        c.baseline.gp.signal_var = x;
        Ok(())
    }),
    ("gp.noise_var", |c, v| {
        let x = num(v)?;
        c.stage3.gp.noise_var = x;
        c.baseline.gp.noise_var = x;
        Ok(())
    }),
    ("stage1.iterations", |c, v| {
        c.stage1.iterations = count(v)?;
        Ok(())
    }),
    ("stage1.parallel", |c, v| {
        c.stage1.parallel = count(v)?;
        Ok(())
    }),
    ("stage1.warmup", |c, v| {
        c.stage1.warmup = Some(count(v)?);
        Ok(())
    }),
    ("stage1.alpha", |c, v| {
        c.stage1.alpha = num(v)?;
        Ok(())
    }),
    ("stage1.radius", |c, v| {
        c.stage1.radius = num(v)?;
        Ok(())
    }),
    ("stage1.duration_s", |c, v| {
        c.stage1.duration_s = num(v)?;
        Ok(())
    }),
    ("stage1.traffic", |c, v| {
        c.stage1.state = NetworkState::new(traffic(v)?);
        Ok(())
    }),
    ("stage1.action", |c, v| {
        let a = ConfigAction::from_array(fixed::<ACTION_DIM>(v)?);
        a.check().map_err(|e| e.to_string())?;
        c.stage1.action = a;
        Ok(())
    }),
    ("stage1.fit_epochs", |c, v| {
        c.stage1.fit_epochs = count(v)?;
        Ok(())
    }),
    ("stage1.round_epochs", |c, v| {
        c.stage1.round_epochs = count(v)?;
        Ok(())
    }),
    ("stage1.top_k", |c, v| {
        c.stage1.top_k = count(v)?;
        Ok(())
    }),
    ("stage1.kl_bins", |c, v| {
        c.stage1.kl.bins = count(v)?;
        Ok(())
    }),
    ("stage1.latency_cap_ms", |c, v| {
        c.stage1.kl.latency_cap_ms = num(v)?;
        Ok(())
    }),
    ("stage2.iterations", |c, v| {
        c.stage2.iterations = count(v)?;
        Ok(())
    }),
    ("stage2.parallel", |c, v| {
        c.stage2.parallel = count(v)?;
        Ok(())
    }),
    ("stage2.warmup", |c, v| {
        c.stage2.warmup = count(v)?;
        Ok(())
    }),
    ("stage2.traffics", |c, v| {
        c.stage2.traffics = items(v)
            .into_iter()
            .map(traffic)
            .collect::<std::result::Result<_, _>>()?;
        Ok(())
    }),
    ("stage2.primary_traffic", |c, v| {
        c.stage2.primary_traffic = traffic(v)?;
        Ok(())
    }),
    ("stage2.duration_s", |c, v| {
        c.stage2.duration_s = num(v)?;
        Ok(())
    }),
    ("stage2.fit_epochs", |c, v| {
        c.stage2.fit_epochs = count(v)?;
        Ok(())
    }),
    ("stage2.round_epochs", |c, v| {
        c.stage2.round_epochs = count(v)?;
        Ok(())
    }),
    ("stage2.top_k", |c, v| {
        c.stage2.top_k = count(v)?;
        Ok(())
    }),
    ("stage2.confirm_repeats", |c, v| {
        c.stage2.confirm_repeats = count(v)?;
        Ok(())
    }),
    ("stage3.iterations", |c, v| {
        let x = count(v)?;
        c.stage3.iterations = x;
        c.baseline.iterations = x;
        Ok(())
    }),
    ("stage3.inner", |c, v| {
        c.stage3.inner = count(v)?;
        Ok(())
    }),
    ("stage3.rho", |c, v| {
        c.stage3.rho = num(v)?;
        Ok(())
    }),
    ("stage3.beta_clip", |c, v| {
        c.stage3.beta_clip = num(v)?;
        Ok(())
    }),
    ("stage3.traffic", |c, v| {
        let t = traffic(v)?;
        c.stage3.traffic = t;
        c.baseline.traffic = t;
        Ok(())
    }),
    ("stage3.duration_s", |c, v| {
        let x = num(v)?;
        c.stage3.duration_s = x;
        c.baseline.duration_s = x;
        Ok(())
    }),
    ("stage3.n_mc", |c, v| {
        c.stage3.n_mc = count(v)?;
        Ok(())
    }),
    ("stage3.refine_epochs", |c, v| {
        c.stage3.refine_epochs = count(v)?;
        Ok(())
    }),
    ("stage3.residual", |c, v| {
        c.stage3.residual = boolean(v)?;
        Ok(())
    }),
    ("stage3.top_k", |c, v| {
        let x = count(v)?;
        c.stage3.top_k = x;
        c.baseline.top_k = x;
        Ok(())
    }),
    ("oracle.duration_s", |c, v| {
        c.oracle_duration_s = num(v)?;
        Ok(())
    }),
    ("pareto.alphas", |c, v| {
        c.pareto_alphas = nums(v)?;
        Ok(())
    }),
    ("pareto.iterations", |c, v| {
        c.pareto_iterations = count(v)?;
        Ok(())
    }),
];

/// Names of every accepted key.
pub fn keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|(k, _)| *k)
}

impl RunConfig {
    /// Parse config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut seen: HashMap<&str, (usize, &str)> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{origin}:{line_no}: expected `key = value`, got `{line}`"
                ))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let Some((name, _)) = KEYS.iter().find(|(name, _)| *name == k) else {
                return Err(Error::Config(format!(
                    "{origin}:{line_no}: unknown key `{k}`"
                )));
            };
            if let Some((first, _)) = seen.insert(name, (line_no, v)) {
                return Err(Error::Config(format!(
                    "{origin}:{line_no}: key `{k}` repeats line {first}"
                )));
            }
        }
        if let Some(missing) = REQUIRED.iter().find(|k| !seen.contains_key(*k)) {
            return Err(Error::Config(format!(
                "{origin}: missing required key `{missing}`"
            )));
        }
        let mut cfg = RunConfig::default();
        for (name, set) in KEYS {
            if let Some((line_no, v)) = seen.get(name) {
                set(&mut cfg, v)
                    .map_err(|m| Error::Config(format!("{origin}:{line_no}: key `{name}`: {m}")))?;
            }
        }
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{origin}: {m}")),
            other => Error::Config(format!("{origin}: {other}")),
        })?;
        Ok(cfg)
    }

    /// Read and parse a config file, then apply the seed override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())?
            .with_seed_override(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV} = `{v}` is not a non-negative integer"))
            })?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.x_hat
            .to_array()
            .iter()
            .chain(self.twin_params.to_array().iter())
            .all(|v| v.is_finite())
            .then_some(())
            .ok_or_else(|| Error::Config("parameters must be finite".into()))?;
        if !(self.sigma_res >= 0.0) {
            return Err(Error::Config(format!(
                "twin.sigma_res = {} must be >= 0",
                self.sigma_res
            )));
        }
        if !(self.oracle_duration_s > 0.0) {
            return Err(Error::Config("oracle.duration_s must be > 0".into()));
        }
        if self.pareto_alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("pareto.alphas must be >= 0".into()));
        }
        self.stage1.check()?;
        self.stage2.check()?;
        self.stage3.check()
    }
}
