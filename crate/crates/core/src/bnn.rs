//! Bayes-by-Backprop network: a ReLU MLP with a factorized Gaussian
//! posterior over every weight and bias.
//!
//! Parameters live in two flat vectors (`mu`, `rho`, with `sigma =
//! softplus(rho)`); layer `l` occupies `in*out` weights followed by `out`
//! biases. The training loss per mini-batch is the single-draw estimate
//!
//! ```text
//! k * (log q(w) - log p(w)) - log p(y | w),   w = mu + sigma * eps,  k = batch / n
//! ```

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnConfig {
    pub hidden: Vec<usize>,
    pub prior_sigma: f64,
    /// Likelihood noise, in standardized target units.
    pub lik_sigma: f64,
}

impl Default for BnnConfig {
    fn default() -> Self {
        BnnConfig {
            hidden: vec![128, 256, 256, 128],
            prior_sigma: 0.1,
            lik_sigma: 0.1,
        }
    }
}

/// Affine standardization of inputs and target, fixed at the first fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn std_or_one(var: f64) -> f64 {
    let s = var.sqrt();
    if s > 1e-12 {
        s
    } else {
        1.0
    }
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            x_mean: vec![0.0; dim],
            x_std: vec![1.0; dim],
            y_mean: 0.0,
            y_std: 1.0,
        }
    }

    pub fn from_data(x: ArrayView2<f64>, y: &[f64]) -> Self {
        let n = x.nrows() as f64;
        let x_mean: Vec<f64> = x.mean_axis(Axis(0)).unwrap().to_vec();
        let x_std = x
            .axis_iter(Axis(1))
            .zip(&x_mean)
            .map(|(c, m)| std_or_one(c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n))
            .collect();
        let y_mean = y.iter().sum::<f64>() / n;
        let y_std = std_or_one(y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n);
        Normalizer {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn inputs(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.x_mean[j]) / self.x_std[j];
            }
        }
        out
    }

    pub fn raw_inputs(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let mut out = z.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.x_std[j] + self.x_mean[j];
            }
        }
        out
    }

    pub fn target(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn raw_target(&self, z: f64) -> f64 {
        z * self.y_std + self.y_mean
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnModel {
    widths: Vec<usize>,
    prior_sigma: f64,
    lik_sigma: f64,
    mu: Vec<f64>,
    rho: Vec<f64>,
    norm: Option<Normalizer>,
}

/// Sum of squared residuals term and the scaled complexity term of one
/// mini-batch loss, plus gradients.
pub struct LossGrad {
    pub loss: f64,
    pub grad_mu: Vec<f64>,
    pub grad_rho: Vec<f64>,
}

impl BnnModel {
    pub fn new(input_dim: usize, cfg: &BnnConfig, seed: u64) -> Result<Self> {
        if input_dim == 0 || cfg.hidden.contains(&0) {
            return Err(Error::InvalidArgument("network widths must be >= 1".into()));
        }
        if !(cfg.prior_sigma > 0.0 && cfg.lik_sigma > 0.0) {
            return Err(Error::InvalidArgument(
                "prior and likelihood sigma must be positive".into(),
            ));
        }
        let mut widths = vec![input_dim];
        widths.extend(&cfg.hidden);
        widths.push(1);
        let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut rng = seed::rng(seed);
        let mut mu = Vec::with_capacity(n);
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                mu.push(rng.random_range(-bound..bound));
            }
        }
        let rho = vec![softplus_inv(cfg.prior_sigma / 10.0); n];
        Ok(BnnModel {
            widths,
            prior_sigma: cfg.prior_sigma,
            lik_sigma: cfg.lik_sigma,
            mu,
            rho,
            norm: None,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn n_params(&self) -> usize {
        self.mu.len()
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        self.norm.as_ref()
    }

    pub fn sigmas(&self) -> impl Iterator<Item = f64> + '_ {
        self.rho.iter().map(|&r| softplus(r))
    }

    /// Overwrite every posterior std with `sigma`.
    pub fn set_sigma(&mut self, sigma: f64) {
        let r = softplus_inv(sigma);
        self.rho.iter_mut().for_each(|v| *v = r);
    }

    /// Standard-normal noise for every weight, as used by `loss_grad`.
    pub fn noise_draw(&self, seed: u64) -> Vec<f64> {
        self.draw_eps(&mut seed::rng(seed))
    }

    /// Mutable `(mu, rho)` of the weight posterior.
    pub fn variational_params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.mu, &mut self.rho)
    }

    fn draw_eps(&self, rng: &mut seed::Rng) -> Vec<f64> {
        (0..self.mu.len())
            .map(|_| StandardNormal.sample(rng))
            .collect()
    }

    fn weights_from(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.rho)
            .zip(eps)
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect()
    }

    /// Forward pass in standardized units with an explicit weight vector.
    fn forward(&self, w: &[f64], x: ArrayView2<f64>) -> Array1<f64> {
        let mut h = x.to_owned();
        let mut off = 0;
        let last = self.widths.len() - 2;
        for (l, pair) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let wm = ArrayView2::from_shape((fan_in, fan_out), &w[off..off + fan_in * fan_out])
                .expect("layer shape");
            off += fan_in * fan_out;
            let b = ArrayView1::from(&w[off..off + fan_out]);
            off += fan_out;
            let mut z = h.dot(&wm);
            z += &b;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        h.column(0).to_owned()
    }

    fn norm_or_identity(&self) -> Normalizer {
        self.norm
            .clone()
            .unwrap_or_else(|| Normalizer::identity(self.input_dim()))
    }

    fn check_inputs(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn predict_with(&self, w: &[f64], x: ArrayView2<f64>) -> Vec<f64> {
        let norm = self.norm_or_identity();
        let z = norm.inputs(x);
        self.forward(w, z.view())
            .iter()
            .map(|&v| norm.raw_target(v))
            .collect()
    }

    /// Forward pass with every weight at its posterior mean.
    pub fn predict_mean(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_inputs(x)?;
        Ok(self.predict_with(&self.mu, x))
    }

    /// One posterior weight draw applied to the whole batch.
    pub fn thompson_predict(&self, x: ArrayView2<f64>, draw_seed: u64) -> Result<Vec<f64>> {
        self.check_inputs(x)?;
        let mut rng = seed::rng(draw_seed);
        let w = self.weights_from(&self.draw_eps(&mut rng));
        Ok(self.predict_with(&w, x))
    }

    /// Monte Carlo mean and std over `n_mc` independent weight draws.
    pub fn posterior(
        &self,
        x: ArrayView2<f64>,
        n_mc: usize,
        seed: u64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_inputs(x)?;
        if n_mc < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_mc must be >= 2, got {n_mc}"
            )));
        }
        let n = x.nrows();
        let mut sum = vec![0.0; n];
        let mut sum2 = vec![0.0; n];
        let mut rng = seed::rng(seed);
        for _ in 0..n_mc {
            let w = self.weights_from(&self.draw_eps(&mut rng));
            for (i, v) in self.predict_with(&w, x).into_iter().enumerate() {
                sum[i] += v;
                sum2[i] += v * v;
            }
        }
        let k = n_mc as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / k).collect();
        let std = sum2
            .iter()
            .zip(&mean)
            .map(|(s2, m)| ((s2 / k - m * m) * k / (k - 1.0)).max(0.0).sqrt())
            .collect();
        Ok((mean, std))
    }

    /// Mini-batch loss and its gradient with respect to `(mu, rho)` for a
    /// fixed noise draw `eps`. Inputs and targets are in standardized units.
    pub fn loss_grad(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        eps: &[f64],
        kl_scale: f64,
    ) -> LossGrad {
        let w = self.weights_from(eps);
        let layers = self.widths.len() - 1;

        // Forward, keeping every layer's input.
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layers);
        let mut h = x.to_owned();
        let mut off = 0;
        let mut offsets = Vec::with_capacity(layers);
        for (l, pair) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            offsets.push(off);
            let wm = ArrayView2::from_shape((fan_in, fan_out), &w[off..off + fan_in * fan_out])
                .expect("layer shape");
            let b = ArrayView1::from(&w[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]);
            off += fan_in * fan_out + fan_out;
            let mut z = h.dot(&wm);
            z += &b;
            if l + 1 < layers {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(h);
            h = z;
        }
        let out = h.column(0);
        let s2 = self.lik_sigma * self.lik_sigma;
        let resid = &out - &y;
        let nll = resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * s2)
            + y.len() as f64 * (self.lik_sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();

        // Backward through the data term.
        let mut gw = vec![0.0; w.len()];
        let mut delta: Array2<f64> = (resid / s2).insert_axis(Axis(1));
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let o = offsets[l];
            let g = acts[l].t().dot(&delta);
            for (dst, src) in gw[o..o + fan_in * fan_out].iter_mut().zip(g.iter()) {
                *dst = *src;
            }
            let gb = delta.sum_axis(Axis(0));
            for (dst, src) in gw[o + fan_in * fan_out..].iter_mut().zip(gb.iter()) {
                *dst = *src;
            }
            if l > 0 {
                let wm = ArrayView2::from_shape((fan_in, fan_out), &w[o..o + fan_in * fan_out])
                    .expect("layer shape");
                let mut d = delta.dot(&wm.t());
                // acts[l] is the ReLU output of layer l-1; zero where inactive.
                ndarray::Zip::from(&mut d).and(&acts[l]).for_each(|dv, &a| {
                    if a <= 0.0 {
                        *dv = 0.0
                    }
                });
                delta = d;
            }
        }

        // Complexity term, log q(w) - log p(w), with w = mu + sigma * eps.
        let sp2 = self.prior_sigma * self.prior_sigma;
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut complexity = 0.0;
        let mut grad_mu = vec![0.0; w.len()];
        let mut grad_rho = vec![0.0; w.len()];
        for i in 0..w.len() {
            let sigma = softplus(self.rho[i]);
            let e = eps[i];
            let wi = w[i];
            let log_q = -sigma.ln() - 0.5 * e * e - half_ln_2pi;
            let log_p = -self.prior_sigma.ln() - wi * wi / (2.0 * sp2) - half_ln_2pi;
            complexity += log_q - log_p;
            let dw = gw[i] + kl_scale * wi / sp2;
            grad_mu[i] = dw;
            grad_rho[i] = (dw * e - kl_scale / sigma) * sigmoid(self.rho[i]);
        }
        LossGrad {
            loss: kl_scale * complexity + nll,
            grad_mu,
            grad_rho,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: BnnModel =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let n: usize = m.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if m.widths.len() < 2 || m.mu.len() != n || m.rho.len() != n {
            return Err(Error::format(path, "parameter count does not match widths"));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adadelta,
    Adam,
}

/// Optimizer settings, with a per-epoch multiplicative learning-rate decay.
/// `rho` is Adadelta's averaging constant; Adam uses the usual 0.9/0.999.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl TrainOptions {
    pub fn adam(lr: f64) -> Self {
        TrainOptions {
            optimizer: Optimizer::Adam,
            batch_size: 128,
            lr,
            lr_decay: 0.999,
            rho: 0.9,
            eps: 1e-8,
        }
    }

    pub fn adadelta() -> Self {
        TrainOptions {
            optimizer: Optimizer::Adadelta,
            lr: 1.0,
            eps: 1e-6,
            ..Self::adam(1.0)
        }
    }
}

/// Optimizer state carried across repeated fits of the same model, so
/// warm-started retraining continues the step-size schedule.
#[derive(Debug, Clone)]
pub struct BnnTrainer {
    opts: TrainOptions,
    lr: f64,
    sq_grad: Vec<f64>,
    /// Adadelta's running squared step, or Adam's first moment.
    second: Vec<f64>,
    steps: u64,
    epochs_done: usize,
}

impl BnnTrainer {
    pub fn new(model: &BnnModel, opts: TrainOptions) -> Self {
        let n = 2 * model.n_params();
        BnnTrainer {
            opts,
            lr: opts.lr,
            sq_grad: vec![0.0; n],
            second: vec![0.0; n],
            steps: 0,
            epochs_done: 0,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], base: usize) {
        let eps = self.opts.eps;
        match self.opts.optimizer {
            Optimizer::Adadelta => {
                let r = self.opts.rho;
                for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    let j = base + i;
                    self.sq_grad[j] = r * self.sq_grad[j] + (1.0 - r) * g * g;
                    let dx = -((self.second[j] + eps).sqrt() / (self.sq_grad[j] + eps).sqrt()) * g;
                    self.second[j] = r * self.second[j] + (1.0 - r) * dx * dx;
                    *p += self.lr * dx;
                }
            }
            Optimizer::Adam => {
                let (b1, b2) = (0.9f64, 0.999f64);
                let t = self.steps as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    let j = base + i;
                    self.second[j] = b1 * self.second[j] + (1.0 - b1) * g;
                    self.sq_grad[j] = b2 * self.sq_grad[j] + (1.0 - b2) * g * g;
                    let m = self.second[j] / c1;
                    let v = self.sq_grad[j] / c2;
                    *p -= self.lr * m / (v.sqrt() + eps);
                }
            }
        }
    }

    /// Run `epochs` passes over `(x, y)`; returns the summed mini-batch loss
    /// of each epoch. The first call on an unfitted model fixes its
    /// normalization statistics.
    pub fn train(
        &mut self,
        model: &mut BnnModel,
        x: ArrayView2<f64>,
        y: &[f64],
        epochs: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        model.check_inputs(x)?;
        if x.nrows() == 0 {
            return Err(Error::Empty("BNN training set"));
        }
        if x.nrows() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if model.norm.is_none() {
            model.norm = Some(Normalizer::from_data(x, y));
        }
        let norm = model.norm.clone().expect("set above");
        let xz = norm.inputs(x);
        let yz: Array1<f64> = y.iter().map(|&v| norm.target(v)).collect();
        let n = x.nrows();
        let bs = self.opts.batch_size.clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut losses = Vec::with_capacity(epochs);
        let np = model.n_params();
        for epoch in 0..epochs {
            let mut rng = seed::rng(seed::mix(seed, &[self.epochs_done as u64, epoch as u64]));
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (step, chunk) in order.chunks(bs).enumerate() {
                let xb = xz.select(Axis(0), chunk);
                let yb = yz.select(Axis(0), chunk);
                let eps = model.draw_eps(&mut rng);
                let lg = model.loss_grad(xb.view(), yb.view(), &eps, chunk.len() as f64 / n as f64);
                if !lg.loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite BNN loss at epoch {} step {step} (batch {}, lr {})",
                        self.epochs_done,
                        chunk.len(),
                        self.lr
                    )));
                }
                total += lg.loss;
                self.steps += 1;
                let mut mu = std::mem::take(&mut model.mu);
                self.step(&mut mu, &lg.grad_mu, 0);
                model.mu = mu;
                let mut rho = std::mem::take(&mut model.rho);
                self.step(&mut rho, &lg.grad_rho, np);
                model.rho = rho;
            }
            losses.push(total);
            self.epochs_done += 1;
            self.lr *= self.opts.lr_decay;
        }
        Ok(losses)
    }
}

/// Fit `model` from a fresh optimizer state.
pub fn bnn_train(
    mut model: BnnModel,
    x: ArrayView2<f64>,
    y: &[f64],
    epochs: usize,
    opts: TrainOptions,
    seed: u64,
) -> Result<(BnnModel, Vec<f64>)> {
    let mut trainer = BnnTrainer::new(&model, opts);
    let losses = trainer.train(&mut model, x, y, epochs, seed)?;
    Ok((model, losses))
}

/// Rows of `v` stacked into a matrix.
pub fn rows_to_array(v: &[Vec<f64>]) -> Array2<f64> {
    let cols = v.first().map_or(0, Vec::len);
    Array2::from_shape_fn((v.len(), cols), |(i, j)| v[i][j])
}
