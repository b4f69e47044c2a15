//! Candidate pools for acquisition argmins.
//!
//! A pool mixes uniform draws with local perturbations of a few incumbent
//! points. Uniform draws alone almost never land near the box faces, where
//! cheap configurations and small parameter moves live.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoolSpec {
    pub size: usize,
    /// Share of the pool drawn around incumbents (ignored with no incumbents).
    pub local_fraction: f64,
    /// Std of the Gaussian step, in normalized units.
    pub local_scale: f64,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            size: 10_000,
            local_fraction: 0.5,
            local_scale: 0.1,
        }
    }
}

impl PoolSpec {
    pub fn uniform(size: usize) -> Self {
        PoolSpec {
            size,
            local_fraction: 0.0,
            local_scale: 0.1,
        }
    }

    fn local_count(&self, have_centers: bool) -> usize {
        if have_centers {
            ((self.size as f64) * self.local_fraction.clamp(0.0, 1.0)).round() as usize
        } else {
            0
        }
    }
}

/// Perturb a random subset of coordinates of `center` (each with
/// probability `2/d`, at least one), clipping to the unit box.
fn perturb<const D: usize>(center: &[f64; D], scale: f64, rng: &mut Rng) -> [f64; D] {
    let step = Normal::new(0.0, scale).expect("positive scale");
    let p = (2.0 / D as f64).min(1.0);
    let mut out = *center;
    let forced = rng.random_range(0..D);
    for (i, v) in out.iter_mut().enumerate() {
        if i == forced || rng.random_bool(p) {
            *v = (*v + step.sample(rng)).clamp(0.0, 1.0);
        }
    }
    out
}

fn dist<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `n` points uniform in `[0,1]^D`.
pub fn uniform_box<const D: usize>(n: usize, rng: &mut Rng) -> Vec<[f64; D]> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..=1.0)))
        .collect()
}

/// Volume of the `d`-dimensional ball of radius `r`.
fn ball_volume(d: usize, r: f64) -> f64 {
    let half = d as f64 / 2.0;
    std::f64::consts::PI.powf(half) / statrs::function::gamma::gamma(half + 1.0) * r.powi(d as i32)
}

/// `n` points uniform in the unit box intersected with the ball of radius
/// `radius` around `center`, by rejection from whichever of the two
/// regions is smaller. Both routes have the same law.
pub fn uniform_ball<const D: usize>(
    center: &[f64; D],
    radius: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<[f64; D]>> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radius must be >= 0, got {radius}"
        )));
    }
    if radius == 0.0 {
        return Ok(vec![*center; n]);
    }
    let from_box = ball_volume(D, radius) > 1.0;
    let mut out = Vec::with_capacity(n);
    let mut tries: u64 = 0;
    while out.len() < n {
        let u: [f64; D] = if from_box {
            std::array::from_fn(|_| rng.random_range(0.0..=1.0))
        } else {
            let mut dir: [f64; D] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = radius * rng.random_range(0.0f64..1.0).powf(1.0 / D as f64);
            for (d, c) in dir.iter_mut().zip(center) {
                *d = c + *d / norm * r;
            }
            dir
        };
        tries += 1;
        if u.iter().all(|v| (0.0..=1.0).contains(v)) && dist(&u, center) <= radius {
            out.push(u);
        }
        if tries >= 100_000 && (out.len() as f64) < 1e-4 * tries as f64 {
            return Err(Error::InvalidArgument(format!(
                "candidate acceptance rate below 1e-4 for radius {radius}; use a larger radius"
            )));
        }
    }
    Ok(out)
}

/// Mixed pool in the unit box.
pub fn box_pool<const D: usize>(
    spec: &PoolSpec,
    centers: &[[f64; D]],
    rng: &mut Rng,
) -> Vec<[f64; D]> {
    let local = spec.local_count(!centers.is_empty());
    let mut out = uniform_box(spec.size - local, rng);
    for _ in 0..local {
        let c = &centers[rng.random_range(0..centers.len())];
        out.push(perturb(c, spec.local_scale, rng));
    }
    out
}

/// Mixed pool restricted to the ball of radius `radius` around `anchor`.
/// Local draws falling outside the ball are retried a few times and then
/// replaced by a uniform draw.
pub fn ball_pool<const D: usize>(
    spec: &PoolSpec,
    anchor: &[f64; D],
    radius: f64,
    centers: &[[f64; D]],
    rng: &mut Rng,
) -> Result<Vec<[f64; D]>> {
    let local = spec.local_count(!centers.is_empty());
    let mut out = uniform_ball(anchor, radius, spec.size - local, rng)?;
    for _ in 0..local {
        let c = &centers[rng.random_range(0..centers.len())];
        let mut pick = None;
        for _ in 0..8 {
            let cand = perturb(c, spec.local_scale, rng);
            if dist(&cand, anchor) <= radius {
                pick = Some(cand);
                break;
            }
        }
        match pick {
            Some(p) => out.push(p),
            None => out.extend(uniform_ball(anchor, radius, 1, rng)?),
        }
    }
    Ok(out)
}
