//! Stochastic reduced-order modeling with the 1-D Fokker-Planck equation.
//!
//! Drift and diffusion coefficients are calibrated from ensemble time series,
//! either by regressing moment dynamics or by minimizing a density distance
//! through forward solves, and the trained model then propagates the
//! probability density past the training horizon.
//!
//! The numerical core ([`grid`], [`density`], [`coefficients`], [`fpe_solver`])
//! is generic over [`scalar::Real`]; stochastic and I/O layers work in `f64`.

pub mod analytic;
pub mod banded;
pub mod calibrate;
pub mod coefficients;
pub mod density;
pub mod error;
pub mod fpe_solver;
pub mod grid;
pub mod km_estimate;
pub mod langevin_sim;
pub mod pipeline;
pub mod sampling;
pub mod scalar;
pub mod stencil;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Grid64 = grid::Grid<f64>;
pub type Grid32 = grid::Grid<f32>;
pub type DensityField64 = density::DensityField<f64>;
pub type DensityField32 = density::DensityField<f32>;
pub type CoefficientModel64 = coefficients::CoefficientModel<f64>;
pub type CoefficientModel32 = coefficients::CoefficientModel<f32>;
pub type SolverConfig64 = fpe_solver::SolverConfig<f64>;
pub type SolverConfig32 = fpe_solver::SolverConfig<f32>;
pub type SolutionTrace64 = fpe_solver::SolutionTrace<f64>;
pub type DerivativeMatrix64 = grid::DerivativeMatrix<f64>;
