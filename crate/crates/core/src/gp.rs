//! Exact Gaussian-process regression with a Matern-5/2 kernel.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;
const MAX_JITTER: f64 = 1e-4;

/// Matern nu=5/2 covariance at Euclidean distance `r`.
pub fn matern52(r: f64, lengthscale: f64, signal_var: f64) -> f64 {
    let z = SQRT5 * r / lengthscale;
    signal_var * (1.0 + z + z * z / 3.0) * (-z).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub lengthscale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper {
            lengthscale: 0.3,
            signal_var: 1.0,
            noise_var: 1e-3,
        }
    }
}

impl GpHyper {
    pub fn check(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.signal_var > 0.0 && self.noise_var >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad GP hyperparameters {self:?}"
            )));
        }
        Ok(())
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        matern52(r, self.lengthscale, self.signal_var)
    }
}

/// A fitted GP. Targets are standardized internally and predictions are
/// mapped back to the original scale.
#[derive(Debug, Clone)]
pub struct GpModel {
    hyper: GpHyper,
    dim: usize,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    jitter: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
}

impl GpModel {
    /// A GP with no data; predicts the prior.
    pub fn prior(dim: usize, hyper: GpHyper) -> Result<Self> {
        hyper.check()?;
        Ok(GpModel {
            hyper,
            dim,
            x: Vec::new(),
            y: Vec::new(),
            y_mean: 0.0,
            y_std: 1.0,
            jitter: 0.0,
            chol: None,
            alpha: DVector::zeros(0),
        })
    }

    pub fn fit(x: &[Vec<f64>], y: &[f64], hyper: GpHyper) -> Result<Self> {
        hyper.check()?;
        if x.is_empty() {
            return Err(Error::Empty("GP training set"));
        }
        if x.len() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "GP got {} inputs but {} targets",
                x.len(),
                y.len()
            )));
        }
        let dim = x[0].len();
        if x.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument(
                "GP inputs have mixed dimensions".into(),
            ));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite GP target".into()));
        }
        let n = x.len();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
        let y_std = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
        let z = DVector::from_iterator(n, y.iter().map(|v| (v - y_mean) / y_std));

        let k = DMatrix::from_fn(n, n, |i, j| hyper.kernel(&x[i], &x[j]));
        let mut jitter = 0.0;
        let chol = loop {
            let mut a = k.clone();
            for i in 0..n {
                a[(i, i)] += hyper.noise_var + jitter;
            }
            if let Some(c) = Cholesky::new(a) {
                break c;
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
            if jitter > MAX_JITTER * 1.000_001 {
                return Err(Error::Numerical(format!(
                    "GP kernel matrix not positive definite with jitter up to {MAX_JITTER}"
                )));
            }
        };
        let alpha = chol.solve(&z);
        Ok(GpModel {
            hyper,
            dim,
            x: x.to_vec(),
            y: y.to_vec(),
            y_mean,
            y_std,
            jitter,
            chol: Some(chol),
            alpha,
        })
    }

    pub fn hyper(&self) -> GpHyper {
        self.hyper
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Diagonal jitter that had to be added on top of the noise variance.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    /// Posterior mean and standard deviation at one input.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let out = self.predict_batch(std::slice::from_ref(&x.to_vec()));
        out[0]
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Vec<(f64, f64)> {
        let s2 = self.hyper.signal_var;
        let Some(chol) = &self.chol else {
            return vec![(self.y_mean, s2.sqrt() * self.y_std); xs.len()];
        };
        let n = self.x.len();
        let m = xs.len();
        // Column j holds k(X, x_j).
        let ks = DMatrix::from_fn(n, m, |i, j| self.hyper.kernel(&self.x[i], &xs[j]));
        let means = ks.tr_mul(&self.alpha);
        let mut v = ks;
        chol.l_dirty().solve_lower_triangular_mut(&mut v);
        (0..m)
            .map(|j| {
                let reduce = v.column(j).norm_squared();
                let var = (s2 - reduce).max(0.0);
                (means[j] * self.y_std + self.y_mean, var.sqrt() * self.y_std)
            })
            .collect()
    }

    pub fn checkpoint(&self) -> GpCheckpoint {
        GpCheckpoint {
            hyper: self.hyper,
            dim: self.dim,
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }
}

/// On-disk form of a GP: data and hyperparameters; refit on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpCheckpoint {
    pub hyper: GpHyper,
    pub dim: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl GpCheckpoint {
    pub fn restore(&self) -> Result<GpModel> {
        if self.x.is_empty() {
            GpModel::prior(self.dim, self.hyper)
        } else {
            GpModel::fit(&self.x, &self.y, self.hyper)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
