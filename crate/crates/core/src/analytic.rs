//! Closed-form Gaussian solutions of the constant-coefficient Fokker-Planck equation.

use crate::density::DensityField;
use crate::error::Result;
use crate::grid::Grid;
use crate::scalar::Real;

fn normal_pdf<T: Real>(x: T, mean: T, var: T) -> T {
    (-(x - mean) * (x - mean) / (T::lit(2.0) * var)).exp() / (T::lit(std::f64::consts::TAU) * var).sqrt()
}

/// Pure diffusion from a point source: mean 0, variance `2Dt`.
pub fn f1<T: Real>(x: T, t: T, diffusion: T) -> T {
    normal_pdf(x, T::zero(), T::lit(2.0) * diffusion * t)
}

/// Pure drift of a Gaussian with fixed width `sigma`: mean `μt`.
pub fn f2<T: Real>(x: T, t: T, drift: T, sigma: T) -> T {
    normal_pdf(x, drift * t, sigma * sigma)
}

/// Drift and diffusion from a point source: mean `μt`, variance `2Dt`.
pub fn f3<T: Real>(x: T, t: T, drift: T, diffusion: T) -> T {
    normal_pdf(x, drift * t, T::lit(2.0) * diffusion * t)
}

/// One of the three analytic families with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family<T> {
    F1 { diffusion: T },
    F2 { drift: T, sigma: T },
    F3 { drift: T, diffusion: T },
}

impl<T: Real> Family<T> {
    pub fn pdf(&self, x: T, t: T) -> T {
        match *self {
            Family::F1 { diffusion } => f1(x, t, diffusion),
            Family::F2 { drift, sigma } => f2(x, t, drift, sigma),
            Family::F3 { drift, diffusion } => f3(x, t, drift, diffusion),
        }
    }

    pub fn mean(&self, t: T) -> T {
        match *self {
            Family::F1 { .. } => T::zero(),
            Family::F2 { drift, .. } | Family::F3 { drift, .. } => drift * t,
        }
    }

    pub fn variance(&self, t: T) -> T {
        match *self {
            Family::F1 { diffusion } | Family::F3 { diffusion, .. } => T::lit(2.0) * diffusion * t,
            Family::F2 { sigma, .. } => sigma * sigma,
        }
    }

    /// The family sampled on `grid` at time `t` and normalized.
    pub fn density(&self, grid: &Grid<T>, t: T) -> Result<DensityField<T>> {
        DensityField::from_fn(*grid, t, |x| self.pdf(x, t))
    }
}
