//! Probability densities sampled on a grid.

use log::warn;

use crate::banded::BandMatrix;
use crate::error::{Error, Result};
use crate::grid::{DerivativeMatrix, Grid};
use crate::scalar::Real;

/// Mass tolerance accepted by operations that require a normalized density.
pub const NORMALIZED_MASS_TOL: f64 = 1e-3;
/// Floor added to the second argument of the KL divergence.
pub const KL_FLOOR: f64 = 1e-12;
/// Default Tikhonov regularization strength.
pub const DEFAULT_LAMBDA: f64 = 1e-6;
pub const MIN_KDE_SAMPLES: usize = 10;

/// Nonnegative density values on a grid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField<T> {
    grid: Grid<T>,
    values: Vec<T>,
    time: T,
}

impl<T: Real> DensityField<T> {
    /// Wraps raw values, rejecting non-finite or negative entries. No normalization is applied.
    pub fn new(grid: Grid<T>, values: Vec<T>, time: T) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::arg(format!("{} values for a {}-point grid", values.len(), grid.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::arg(format!("density value {} at node {i} is negative or non-finite", values[i])));
        }
        Ok(Self { grid, values, time })
    }

    /// Clips negatives to zero and rescales to unit trapezoidal mass.
    pub fn from_raw(grid: Grid<T>, mut values: Vec<T>, time: T) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::arg(format!("{} values for a {}-point grid", values.len(), grid.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { time: time.as_f64() });
        }
        for v in values.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        Self { grid, values, time }.normalized()
    }

    /// Samples `f` at the grid nodes, then normalizes.
    pub fn from_fn(grid: Grid<T>, time: T, f: impl Fn(T) -> T) -> Result<Self> {
        let values = grid.nodes().into_iter().map(f).collect();
        Self::from_raw(grid, values, time)
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn time(&self) -> T {
        self.time
    }

    pub fn with_time(mut self, time: T) -> Self {
        self.time = time;
        self
    }

    pub fn mass(&self) -> T {
        self.grid.integrate(&self.values)
    }

    pub fn normalized(mut self) -> Result<Self> {
        let m = self.mass();
        if !(m > T::zero()) || !m.is_finite() {
            return Err(Error::arg(format!("cannot normalize density with mass {m}")));
        }
        for v in self.values.iter_mut() {
            *v /= m;
        }
        Ok(self)
    }

    pub fn value_at(&self, x: T) -> T {
        self.grid.interpolate(&self.values, x)
    }

    fn require_normalized(&self) -> Result<()> {
        let m = self.mass().as_f64();
        if (m - 1.0).abs() > NORMALIZED_MASS_TOL {
            return Err(Error::Unnormalized { mass: m });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> DensityField<U> {
        DensityField {
            grid: self.grid.cast(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            time: U::lit(self.time.as_f64()),
        }
    }
}

/// Mean, variance and central moments of a density.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet<T> {
    pub mean: T,
    pub variance: T,
    /// `central[n]` is the n-th central moment; `central[0] = 1`, `central[1] = 0`.
    pub central: Vec<T>,
}

impl<T: Real> MomentSet<T> {
    pub fn central_moment(&self, n: usize) -> Option<T> {
        self.central.get(n).copied()
    }
}

pub fn moments<T: Real>(f: &DensityField<T>, max_order: usize) -> Result<MomentSet<T>> {
    f.require_normalized()?;
    let g = f.grid();
    let x = g.nodes();
    let mass = f.mass();
    let first: Vec<T> = x.iter().zip(f.values()).map(|(&x, &v)| x * v).collect();
    let mean = g.integrate(&first) / mass;
    let order = max_order.max(2);
    let mut central = vec![T::one(), T::zero()];
    for n in 2..=order {
        let integrand: Vec<T> = x.iter().zip(f.values()).map(|(&x, &v)| (x - mean).powi(n as i32) * v).collect();
        central.push(g.integrate(&integrand) / mass);
    }
    let variance = central[2].max(T::zero());
    central[2] = variance;
    central.truncate(max_order.max(2) + 1);
    Ok(MomentSet { mean, variance, central })
}

fn check_pair<T: Real>(p: &DensityField<T>, q: &DensityField<T>) -> Result<()> {
    if !p.grid().same_as(q.grid()) {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// `∫ p log(p / (q + ε))` by trapezoidal quadrature, ignoring nodes where `p ≤ ε`.
pub fn kl_divergence<T: Real>(p: &DensityField<T>, q: &DensityField<T>) -> Result<T> {
    check_pair(p, q)?;
    let eps = T::lit(KL_FLOOR);
    let integrand: Vec<T> = p
        .values()
        .iter()
        .zip(q.values())
        .map(|(&pv, &qv)| if pv <= eps { T::zero() } else { pv * (pv / (qv + eps)).ln() })
        .collect();
    Ok(p.grid().integrate(&integrand).max(T::zero()))
}

/// `∫ |p - q|`.
pub fn l1_distance<T: Real>(p: &DensityField<T>, q: &DensityField<T>) -> Result<T> {
    check_pair(p, q)?;
    let d: Vec<T> = p.values().iter().zip(q.values()).map(|(&a, &b)| (a - b).abs()).collect();
    Ok(p.grid().integrate(&d))
}

/// `∫ (p - q)²`.
pub fn l2_distance_sq<T: Real>(p: &DensityField<T>, q: &DensityField<T>) -> Result<T> {
    check_pair(p, q)?;
    let d: Vec<T> = p.values().iter().zip(q.values()).map(|(&a, &b)| (a - b) * (a - b)).collect();
    Ok(p.grid().integrate(&d))
}

/// KDE bandwidth choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth<T> {
    /// Normal-reference rule `1.06·σ̂·m^(-1/5)`, `σ̂ = min(std, IQR/1.349)`.
    Auto,
    Fixed(T),
}

fn quantile_sorted<T: Real>(sorted: &[T], q: f64) -> T {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Normal-reference bandwidth; `None` when the samples have no spread.
pub fn normal_reference_bandwidth<T: Real>(samples: &[T]) -> Option<T> {
    let m = samples.len();
    if m < 2 {
        return None;
    }
    let n = T::from_usize_exact(m);
    let mean = samples.iter().copied().sum::<T>() / n;
    let var = samples.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / T::from_usize_exact(m - 1);
    let sd = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let robust = iqr / T::lit(1.349);
    let sigma = if robust > T::zero() { sd.min(robust) } else { sd };
    if !(sigma > T::zero()) {
        return None;
    }
    Some(T::lit(1.06) * sigma * n.powf(T::lit(-0.2)))
}

/// Gaussian-kernel density estimate evaluated at the grid nodes, normalized to unit mass.
pub fn kde_estimate<T: Real>(samples: &[T], grid: &Grid<T>, bandwidth: Bandwidth<T>, time: T) -> Result<DensityField<T>> {
    if samples.len() < MIN_KDE_SAMPLES {
        return Err(Error::InsufficientSamples { needed: MIN_KDE_SAMPLES, got: samples.len() });
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::arg("KDE samples must be finite"));
    }
    let (lo, hi) = samples
        .iter()
        .fold((samples[0], samples[0]), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if lo == hi {
        return Err(Error::ZeroVariance { time: None });
    }
    let bw = match bandwidth {
        Bandwidth::Auto => normal_reference_bandwidth(samples).ok_or(Error::ZeroVariance { time: None })?,
        Bandwidth::Fixed(b) if b > T::zero() && b.is_finite() => b,
        Bandwidth::Fixed(b) => return Err(Error::arg(format!("bandwidth must be positive, got {b}"))),
    };
    let three = T::lit(3.0);
    if lo - three * bw < grid.x_min() || hi + three * bw > grid.x_max() {
        warn!(
            "KDE grid [{}, {}] does not cover samples [{lo}, {hi}] plus 3 bandwidths ({bw})",
            grid.x_min(),
            grid.x_max()
        );
    }

    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    // kernel truncated at 9 bandwidths, far below double precision
    let cutoff = T::lit(9.0) * bw;
    let inv = T::one() / bw;
    let norm = T::one() / (bw * T::lit(std::f64::consts::TAU).sqrt() * T::from_usize_exact(samples.len()));
    let half = T::lit(-0.5);
    let values = grid
        .nodes()
        .into_iter()
        .map(|x| {
            let a = sorted.partition_point(|&s| s < x - cutoff);
            let b = sorted.partition_point(|&s| s <= x + cutoff);
            let sum: T = sorted[a..b]
                .iter()
                .map(|&s| {
                    let z = (x - s) * inv;
                    (half * z * z).exp()
                })
                .sum();
            sum * norm
        })
        .collect();
    DensityField::from_raw(*grid, values, time)
}

/// Raw Tikhonov minimizer: solves `(I + λ EᵀE) y = f`.
pub fn tikhonov_solve<T: Real>(f: &[T], lambda: T, e: &DerivativeMatrix<T>) -> Result<Vec<T>> {
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(Error::arg(format!("lambda must be positive, got {lambda}")));
    }
    let n = f.len();
    if n != e.grid().len() {
        return Err(Error::GridMismatch);
    }
    let gram = e.to_band().gram();
    let (kl, ku) = gram.bandwidths();
    let system = BandMatrix::identity(n, kl, ku).combine(T::one(), &gram, lambda);
    system.solve(f)
}

/// Tikhonov smoothing with a degree-`deriv_degree` penalty, clipped and renormalized.
pub fn tikhonov_smooth<T: Real>(f: &DensityField<T>, lambda: T, deriv_degree: usize) -> Result<DensityField<T>> {
    let e = DerivativeMatrix::new(f.grid(), deriv_degree, 2)?;
    let smoothed = tikhonov_solve(f.values(), lambda, &e)?;
    DensityField::from_raw(*f.grid(), smoothed, f.time())
}
