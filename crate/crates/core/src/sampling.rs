//! Rejection sampling from grid densities and change of variables by resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{kde_estimate, Bandwidth, DensityField};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Variable transform applied before modeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    #[default]
    Identity,
    /// `x → ln x`.
    LogX,
    /// `x → ln x` and `t → ln t`.
    LogXLogT,
}

impl TransformKind {
    pub fn transforms_x(self) -> bool {
        self != TransformKind::Identity
    }

    pub fn transforms_t(self) -> bool {
        self == TransformKind::LogXLogT
    }

    pub fn forward_x(self, x: f64) -> Result<f64> {
        if !self.transforms_x() {
            return Ok(x);
        }
        if !(x > 0.0) {
            return Err(Error::arg(format!("log transform needs positive values, got {x}")));
        }
        Ok(x.ln())
    }

    pub fn inverse_x(self, y: f64) -> Result<f64> {
        if !self.transforms_x() {
            return Ok(y);
        }
        let x = y.exp();
        if !x.is_finite() || x == 0.0 {
            return Err(Error::arg(format!("inverse transform undefined (overflow) at {y}")));
        }
        Ok(x)
    }

    pub fn forward_t(self, t: f64) -> Result<f64> {
        if !self.transforms_t() {
            return Ok(t);
        }
        if !(t > 0.0) {
            return Err(Error::arg(format!("log-time transform needs positive times, got {t}")));
        }
        Ok(t.ln())
    }

    pub fn inverse_t(self, s: f64) -> Result<f64> {
        if !self.transforms_t() {
            return Ok(s);
        }
        let t = s.exp();
        if !t.is_finite() {
            return Err(Error::arg(format!("inverse time transform overflows at {s}")));
        }
        Ok(t)
    }
}

/// Outcome of a rejection-sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectionDraw {
    pub samples: Vec<f64>,
    pub proposals: u64,
    /// Envelope constant `M = max f · (x_max − x_min) · (1 + 1e-9)`.
    pub envelope: f64,
}

impl RejectionDraw {
    pub fn acceptance_rate(&self) -> f64 {
        self.samples.len() as f64 / self.proposals as f64
    }
}

/// Draws `n` samples from the piecewise-linear interpolant of `f`.
///
/// Proposals are uniform on the grid; the global maximum of `f` is the envelope.
pub fn rejection_sample_detailed(f: &DensityField<f64>, n: usize, seed: u64) -> Result<RejectionDraw> {
    if n == 0 {
        return Err(Error::arg("need at least one sample"));
    }
    let fmax = f.values().iter().copied().fold(0.0, f64::max);
    if !(fmax > 0.0) {
        return Err(Error::arg("cannot sample from an all-zero density"));
    }
    let g = f.grid();
    let (a, b) = (g.x_min(), g.x_max());
    let ceiling = fmax * (1.0 + 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut proposals = 0u64;
    while samples.len() < n {
        proposals += 1;
        let x = rng.random_range(a..=b);
        let u = rng.random::<f64>() * ceiling;
        if u < f.value_at(x) {
            samples.push(x);
        }
    }
    Ok(RejectionDraw { samples, proposals, envelope: ceiling * (b - a) })
}

pub fn rejection_sample(f: &DensityField<f64>, n: usize, seed: u64) -> Result<Vec<f64>> {
    rejection_sample_detailed(f, n, seed).map(|d| d.samples)
}

/// Density of `inverse(X)` for `X ~ f`, estimated by sampling and KDE on `target_grid`.
pub fn pushforward_density(
    f: &DensityField<f64>,
    transform: TransformKind,
    target_grid: &Grid<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<DensityField<f64>> {
    let samples = rejection_sample(f, n_samples, seed)?;
    let mapped = samples.into_iter().map(|y| transform.inverse_x(y)).collect::<Result<Vec<_>>>()?;
    let time = transform.inverse_t(f.time())?;
    kde_estimate(&mapped, target_grid, Bandwidth::Auto, time)
}

/// Density of `forward(X)`, the opposite direction of [`pushforward_density`].
pub fn pullback_density(
    f: &DensityField<f64>,
    transform: TransformKind,
    target_grid: &Grid<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<DensityField<f64>> {
    let samples = rejection_sample(f, n_samples, seed)?;
    let mapped = samples.into_iter().map(|x| transform.forward_x(x)).collect::<Result<Vec<_>>>()?;
    let time = transform.forward_t(f.time())?;
    kde_estimate(&mapped, target_grid, Bandwidth::Auto, time)
}
