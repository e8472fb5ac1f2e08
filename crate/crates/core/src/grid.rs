//! Uniform 1-D grids and finite-difference derivative matrices.

use serde::{Deserialize, Serialize};

use crate::banded::BandMatrix;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stencil::{centered_width, offset_weights, one_sided_width};

pub const MIN_POINTS: usize = 8;

/// Serializable grid description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
}

impl GridSpec {
    pub fn build<T: Real>(&self) -> Result<Grid<T>> {
        Grid::new(T::lit(self.x_min), T::lit(self.x_max), self.n_points)
    }
}

/// Uniform grid `x_min + i·h`, `i = 0..n_points`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid<T> {
    x_min: T,
    x_max: T,
    n_points: usize,
    h: T,
}

impl<T: Real> Grid<T> {
    pub fn new(x_min: T, x_max: T, n_points: usize) -> Result<Self> {
        if !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::InvalidGrid("bounds must be finite".into()));
        }
        if n_points < MIN_POINTS {
            return Err(Error::InvalidGrid(format!("need at least {MIN_POINTS} points, got {n_points}")));
        }
        if x_min >= x_max {
            return Err(Error::InvalidGrid(format!("degenerate domain [{x_min}, {x_max}]")));
        }
        let h = (x_max - x_min) / T::from_usize_exact(n_points - 1);
        Ok(Self { x_min, x_max, n_points, h })
    }

    pub fn x_min(&self) -> T {
        self.x_min
    }

    pub fn x_max(&self) -> T {
        self.x_max
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> T {
        self.h
    }

    pub fn node(&self, i: usize) -> T {
        self.x_min + T::from_usize_exact(i) * self.h
    }

    pub fn nodes(&self) -> Vec<T> {
        (0..self.n_points).map(|i| self.node(i)).collect()
    }

    /// Trapezoidal quadrature weights.
    pub fn trapezoid_weights(&self) -> Vec<T> {
        let mut w = vec![self.h; self.n_points];
        let half = T::lit(0.5);
        w[0] = self.h * half;
        w[self.n_points - 1] = self.h * half;
        w
    }

    pub fn integrate(&self, values: &[T]) -> T {
        debug_assert_eq!(values.len(), self.n_points);
        let n = values.len();
        let inner: T = values[1..n - 1].iter().copied().sum();
        self.h * (inner + T::lit(0.5) * (values[0] + values[n - 1]))
    }

    /// Linear interpolation of nodal `values` at `x`; zero outside the grid.
    pub fn interpolate(&self, values: &[T], x: T) -> T {
        if !(x >= self.x_min && x <= self.x_max) {
            return T::zero();
        }
        let s = (x - self.x_min) / self.h;
        let i = s.floor().to_usize().unwrap_or(0).min(self.n_points - 2);
        let frac = s - T::from_usize_exact(i);
        values[i] + frac * (values[i + 1] - values[i])
    }

    /// Same bounds and node count as `other` (exact comparison).
    pub fn same_as(&self, other: &Self) -> bool {
        self.x_min == other.x_min && self.x_max == other.x_max && self.n_points == other.n_points
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec { x_min: self.x_min.as_f64(), x_max: self.x_max.as_f64(), n_points: self.n_points }
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        Grid::new(U::lit(self.x_min.as_f64()), U::lit(self.x_max.as_f64()), self.n_points)
            .expect("valid grid stays valid")
    }
}

/// One row of a derivative matrix: contiguous weights starting at column `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilRow<T> {
    pub start: usize,
    pub weights: Vec<T>,
}

/// Finite-difference approximation of `d^degree/dx^degree` on a grid.
///
/// Interior rows are centered; rows too close to the boundary for a centered
/// stencil fall back to one-sided stencils of the same formal order.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeMatrix<T> {
    grid: Grid<T>,
    degree: usize,
    accuracy: usize,
    rows: Vec<StencilRow<T>>,
}

impl<T: Real> DerivativeMatrix<T> {
    pub fn new(grid: &Grid<T>, degree: usize, accuracy: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::arg("derivative degree must be at least 1"));
        }
        if accuracy < 2 || !accuracy.is_multiple_of(2) {
            return Err(Error::arg(format!("accuracy order must be even and >= 2, got {accuracy}")));
        }
        let n = grid.len();
        let one_sided = one_sided_width(degree, accuracy);
        if n <= degree + accuracy {
            return Err(Error::arg(format!(
                "stencil of {one_sided} points (degree {degree}, order {accuracy}) does not fit {n} grid points"
            )));
        }
        let centered = centered_width(degree, accuracy);
        let radius = centered / 2;
        let scale = grid.spacing().powi(-(degree as i32));

        let centered_offsets: Vec<i64> = (0..centered as i64).map(|j| j - radius as i64).collect();
        let centered_w: Vec<T> = offset_weights::<f64>(&centered_offsets, degree)
            .into_iter()
            .map(|w| T::lit(w) * scale)
            .collect();

        let rows = (0..n)
            .map(|i| {
                if i >= radius && i + radius < n {
                    StencilRow { start: i - radius, weights: centered_w.clone() }
                } else {
                    let start = if i < radius { 0 } else { n - one_sided };
                    let offsets: Vec<i64> = (0..one_sided).map(|j| (start + j) as i64 - i as i64).collect();
                    let weights = offset_weights::<f64>(&offsets, degree)
                        .into_iter()
                        .map(|w| T::lit(w) * scale)
                        .collect();
                    StencilRow { start, weights }
                }
            })
            .collect();

        Ok(Self { grid: *grid, degree, accuracy, rows })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn accuracy(&self) -> usize {
        self.accuracy
    }

    pub fn rows(&self) -> &[StencilRow<T>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &StencilRow<T> {
        &self.rows[i]
    }

    pub fn apply(&self, f: &[T]) -> Vec<T> {
        assert_eq!(f.len(), self.rows.len(), "vector length does not match grid");
        self.rows
            .iter()
            .map(|r| r.weights.iter().zip(&f[r.start..]).map(|(&w, &v)| w * v).sum())
            .collect()
    }

    /// Lower and upper bandwidths.
    pub fn bandwidths(&self) -> (usize, usize) {
        self.rows.iter().enumerate().fold((0, 0), |(kl, ku), (i, r)| {
            let last = r.start + r.weights.len() - 1;
            (kl.max(i.saturating_sub(r.start)), ku.max(last.saturating_sub(i)))
        })
    }

    pub fn to_band(&self) -> BandMatrix<T> {
        let (kl, ku) = self.bandwidths();
        let mut m = BandMatrix::zeros(self.rows.len(), kl, ku);
        for (i, r) in self.rows.iter().enumerate() {
            for (j, &w) in r.weights.iter().enumerate() {
                m.set(i, r.start + j, w);
            }
        }
        m
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let n = self.rows.len();
        self.rows
            .iter()
            .map(|r| {
                let mut row = vec![T::zero(); n];
                row[r.start..r.start + r.weights.len()].copy_from_slice(&r.weights);
                row
            })
            .collect()
    }
}
