//! Time-polynomial drift and diffusion coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAX_DEGREE: usize = 3;

/// `D1(t) = Σ a_k t^k`, `D2(t) = Σ b_k t^k` under the Itô interpretation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientModel<T> {
    drift: Vec<T>,
    diffusion: Vec<T>,
    /// Reserved for spatially varying coefficients; must be false.
    #[serde(default)]
    x_dependent: bool,
}

impl<T: Real> CoefficientModel<T> {
    pub fn new(drift: Vec<T>, diffusion: Vec<T>) -> Result<Self> {
        for (name, c) in [("drift", &drift), ("diffusion", &diffusion)] {
            if c.len() > MAX_DEGREE + 1 {
                return Err(Error::arg(format!("{name} polynomial degree {} exceeds {MAX_DEGREE}", c.len() - 1)));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::arg(format!("{name} coefficients must be finite")));
            }
        }
        Ok(Self { drift, diffusion, x_dependent: false })
    }

    pub fn constant(drift: T, diffusion: T) -> Self {
        Self::new(vec![drift], vec![diffusion]).expect("constant coefficients")
    }

    pub fn zero() -> Self {
        Self::constant(T::zero(), T::zero())
    }

    /// Checks invariants after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.x_dependent {
            return Err(Error::arg("spatially varying coefficients are not supported"));
        }
        Self::new(self.drift.clone(), self.diffusion.clone()).map(|_| ())
    }

    pub fn drift_coefficients(&self) -> &[T] {
        &self.drift
    }

    pub fn diffusion_coefficients(&self) -> &[T] {
        &self.diffusion
    }

    pub fn drift(&self, t: T) -> T {
        horner(&self.drift, t)
    }

    pub fn diffusion(&self, t: T) -> T {
        horner(&self.diffusion, t)
    }

    /// `(D1(t), D2(t))`.
    pub fn eval(&self, t: T) -> (T, T) {
        (self.drift(t), self.diffusion(t))
    }

    /// Smallest diffusion value over `times`, with the time it occurs at.
    pub fn min_diffusion(&self, times: impl IntoIterator<Item = T>) -> Option<(T, T)> {
        times
            .into_iter()
            .map(|t| (t, self.diffusion(t)))
            .fold(None, |acc, (t, d)| match acc {
                Some((_, best)) if best <= d => acc,
                _ => Some((t, d)),
            })
    }

    pub fn cast<U: Real>(&self) -> CoefficientModel<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
        CoefficientModel { drift: c(&self.drift), diffusion: c(&self.diffusion), x_dependent: self.x_dependent }
    }
}

fn horner<T: Real>(coeffs: &[T], t: T) -> T {
    coeffs.iter().rev().fold(T::zero(), |acc, &c| acc * t + c)
}

/// Itô drift equivalent to a Stratonovich drift `h` with noise gradient `∂g/∂x`.
pub fn stratonovich_to_ito_drift<T: Real>(h_drift: T, g_gradient: T, diffusion: T) -> T {
    h_drift + g_gradient * diffusion
}
