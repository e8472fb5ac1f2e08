//! Kramers-Moyal coefficients from ensemble time series.
//!
//! Two routes: conditional increment moments binned in `x`, and polynomial
//! regression of the ensemble mean and variance against time (valid when the
//! coefficients depend on time only).

use nalgebra::{DMatrix, DVector};

use crate::coefficients::{CoefficientModel, MAX_DEGREE};
use crate::density::{moments, DensityField};
use crate::error::{Error, Result};
use crate::sampling::TransformKind;

pub const MIN_REALIZATIONS: usize = 30;
pub const MIN_CELL_SAMPLES: usize = 20;
pub const MAX_CONDITION: f64 = 1e12;
const UNIFORM_TOL: f64 = 1e-9;

/// Realizations `x[r][k]` on a shared, strictly increasing time axis.
///
/// Samples are stored time-major so each time level is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    times: Vec<f64>,
    n_real: usize,
    data: Vec<f64>,
    transform: TransformKind,
}

impl TrajectoryEnsemble {
    /// `data[k * n_realizations + r]` is realization `r` at `times[k]`.
    pub fn from_time_major(times: Vec<f64>, n_realizations: usize, data: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::arg("ensemble has no time levels"));
        }
        if n_realizations == 0 {
            return Err(Error::arg("ensemble has no realizations"));
        }
        if data.len() != times.len() * n_realizations {
            return Err(Error::arg("sample matrix does not match the time axis"));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::arg("time axis must be finite and strictly increasing"));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::arg(format!(
                "non-finite sample for realization {} at t = {}",
                i % n_realizations,
                times[i / n_realizations]
            )));
        }
        Ok(Self { times, n_real: n_realizations, data, transform: TransformKind::Identity })
    }

    pub fn from_trajectories(times: Vec<f64>, trajectories: &[Vec<f64>]) -> Result<Self> {
        let k = times.len();
        if let Some(r) = trajectories.iter().position(|tr| tr.len() != k) {
            return Err(Error::arg(format!("trajectory {r} has {} samples, expected {k}", trajectories[r].len())));
        }
        let n = trajectories.len();
        let mut data = vec![0.0; k * n];
        for (r, tr) in trajectories.iter().enumerate() {
            for (j, &x) in tr.iter().enumerate() {
                data[j * n + r] = x;
            }
        }
        Self::from_time_major(times, n, data)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_realizations(&self) -> usize {
        self.n_real
    }

    pub fn transform(&self) -> TransformKind {
        self.transform
    }

    /// All realizations at time level `k`.
    pub fn level(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_real..(k + 1) * self.n_real]
    }

    pub fn trajectory(&self, r: usize) -> Vec<f64> {
        (0..self.times.len()).map(|k| self.data[k * self.n_real + r]).collect()
    }

    /// Index of the time level equal to `t` (relative tolerance 1e-9).
    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * s.abs().max(t.abs()).max(1.0))
    }

    /// Sampling interval if the time axis is uniform.
    pub fn uniform_step(&self) -> Result<f64> {
        let k = self.times.len() - 1;
        if k == 0 {
            return Err(Error::arg("a single time level has no sampling interval"));
        }
        let expected = (self.times[k] - self.times[0]) / k as f64;
        for (i, w) in self.times.windows(2).enumerate() {
            let step = w[1] - w[0];
            if (step - expected).abs() > UNIFORM_TOL * expected.abs() {
                return Err(Error::NonUniformTime { index: i, step, expected });
            }
        }
        Ok(expected)
    }

    /// Sub-ensemble over time levels `range`.
    pub fn select_levels(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let data = self.data[range.start * self.n_real..range.end * self.n_real].to_vec();
        let mut e = Self::from_time_major(self.times[range].to_vec(), self.n_real, data)?;
        e.transform = self.transform;
        Ok(e)
    }

    /// Applies `kind` to samples (and to times for `LogXLogT`).
    pub fn transformed(&self, kind: TransformKind) -> Result<Self> {
        if self.transform != TransformKind::Identity {
            return Err(Error::arg("ensemble is already transformed"));
        }
        let data = self.data.iter().map(|&x| kind.forward_x(x)).collect::<Result<Vec<_>>>()?;
        let times = self.times.iter().map(|&t| kind.forward_t(t)).collect::<Result<Vec<_>>>()?;
        let mut e = Self::from_time_major(times, self.n_real, data)?;
        e.transform = kind;
        Ok(e)
    }

    /// Undoes the recorded transform.
    pub fn untransformed(&self) -> Result<Self> {
        let kind = self.transform;
        let data = self.data.iter().map(|&x| kind.inverse_x(x)).collect::<Result<Vec<_>>>()?;
        let times = self.times.iter().map(|&t| kind.inverse_t(t)).collect::<Result<Vec<_>>>()?;
        Self::from_time_major(times, self.n_real, data)
    }

    fn require_estimable(&self) -> Result<()> {
        if self.n_real < MIN_REALIZATIONS {
            return Err(Error::InsufficientSamples { needed: MIN_REALIZATIONS, got: self.n_real });
        }
        Ok(())
    }
}

/// One `(bin, time)` cell of a conditional Kramers-Moyal estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct KmCell {
    pub x_center: f64,
    pub t: f64,
    pub count: usize,
    /// `None` when the cell holds fewer than [`MIN_CELL_SAMPLES`] samples.
    pub value: Option<f64>,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// How increments are centered before taking the `n`-th power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Centering {
    /// Raw increments `Δx^n`.
    Raw,
    /// For `n ≥ 2`, increments minus their cell mean; removes the `O(Δt)` drift bias.
    #[default]
    Central,
}

/// `D(n)(x, t_k) ≈ <[x(t_{k+1}) − x(t_k)]^n | x(t_k) ∈ bin> / (n!·Δt)` using central increments.
///
/// Bins are equal-width over the sample range at each time level.
pub fn conditional_km_coefficient(ens: &TrajectoryEnsemble, order: usize, n_bins: usize) -> Result<Vec<KmCell>> {
    conditional_km_coefficient_with(ens, order, n_bins, Centering::Central)
}

pub fn conditional_km_coefficient_with(
    ens: &TrajectoryEnsemble,
    order: usize,
    n_bins: usize,
    centering: Centering,
) -> Result<Vec<KmCell>> {
    if !(1..=4).contains(&order) {
        return Err(Error::arg(format!("Kramers-Moyal order must be 1..=4, got {order}")));
    }
    if n_bins < 4 {
        return Err(Error::arg(format!("need at least 4 bins, got {n_bins}")));
    }
    ens.require_estimable()?;
    let dt = ens.uniform_step()?;
    let norm = 1.0 / (factorial(order) * dt);
    let center = centering == Centering::Central && order >= 2;
    let mut cells = Vec::with_capacity((ens.n_times() - 1) * n_bins);
    let mut bin_of = vec![0usize; ens.n_realizations()];
    for k in 0..ens.n_times() - 1 {
        let now = ens.level(k);
        let next = ens.level(k + 1);
        let (lo, hi) = now.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; n_bins];
        let mut shift = vec![0.0; n_bins];
        for (r, &x0) in now.iter().enumerate() {
            let b = (((x0 - lo) / width) as usize).min(n_bins - 1);
            bin_of[r] = b;
            counts[b] += 1;
            shift[b] += next[r] - x0;
        }
        for b in 0..n_bins {
            shift[b] = if center && counts[b] > 0 { shift[b] / counts[b] as f64 } else { 0.0 };
        }
        let mut sums = vec![0.0; n_bins];
        for (r, &x0) in now.iter().enumerate() {
            let b = bin_of[r];
            sums[b] += (next[r] - x0 - shift[b]).powi(order as i32);
        }
        for b in 0..n_bins {
            let populated = counts[b] >= MIN_CELL_SAMPLES;
            cells.push(KmCell {
                x_center: lo + (b as f64 + 0.5) * width,
                t: ens.times()[k],
                count: counts[b],
                value: populated.then(|| sums[b] / counts[b] as f64 * norm),
            });
        }
    }
    Ok(cells)
}

/// Count-weighted average of populated cells at each time level.
pub fn bin_averaged(cells: &[KmCell]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for c in cells {
        let Some(v) = c.value else { continue };
        match out.last_mut() {
            Some((t, s, n)) if *t == c.t => {
                *s += v * c.count as f64;
                *n += c.count;
            }
            _ => out.push((c.t, v * c.count as f64, c.count)),
        }
    }
    out.into_iter().map(|(t, s, n)| (t, s / n as f64)).collect()
}

/// Ensemble mean and variance per time level.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSeries {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl MomentSeries {
    pub fn new(times: Vec<f64>, mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if times.len() != mean.len() || times.len() != variance.len() {
            return Err(Error::arg("moment series arrays differ in length"));
        }
        if times.iter().chain(&mean).chain(&variance).any(|v| !v.is_finite()) {
            return Err(Error::arg("moment series must be finite"));
        }
        if variance.iter().any(|&v| v < 0.0) {
            return Err(Error::arg("variance must be nonnegative"));
        }
        Ok(Self { times, mean, variance })
    }

    /// Mean and variance of each density in turn.
    pub fn from_densities(densities: &[DensityField<f64>]) -> Result<Self> {
        let mut times = Vec::with_capacity(densities.len());
        let mut mean = Vec::with_capacity(densities.len());
        let mut variance = Vec::with_capacity(densities.len());
        for d in densities {
            let m = moments(d, 2)?;
            times.push(d.time());
            mean.push(m.mean);
            variance.push(m.variance);
        }
        Self::new(times, mean, variance)
    }
}

/// Cross-realization mean and unbiased variance at each time.
pub fn moment_series(ens: &TrajectoryEnsemble) -> MomentSeries {
    let n = ens.n_realizations();
    let (mut mean, mut variance) = (Vec::with_capacity(ens.n_times()), Vec::with_capacity(ens.n_times()));
    for k in 0..ens.n_times() {
        let xs = ens.level(k);
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = if n > 1 { xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        mean.push(m);
        variance.push(v);
    }
    MomentSeries { times: ens.times().to_vec(), mean, variance }
}

/// Least-squares polynomial coefficients (ascending powers) of `y` against `t`.
pub fn polyfit(t: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    let m = t.len();
    if m < degree + 1 {
        return Err(Error::InsufficientSamples { needed: degree + 1, got: m });
    }
    let design = DMatrix::from_fn(m, degree + 1, |i, j| t[i].powi(j as i32));
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned { cond });
    }
    let rhs = DVector::from_column_slice(y);
    let sol = svd.solve(&rhs, 0.0).map_err(|e| Error::arg(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}

fn derivative(coeffs: &[f64], scale: f64) -> Vec<f64> {
    coeffs.iter().enumerate().skip(1).map(|(k, c)| scale * k as f64 * c).collect()
}

/// Drift and diffusion polynomials from the time evolution of mean and variance.
///
/// `D1(t) = d/dt fit(mean)`, `D2(t) = ½ d/dt fit(variance)`, with fits of one
/// degree above the requested coefficient degrees, over times inside `window`.
pub fn regress_time_only_coefficients(
    series: &MomentSeries,
    window: (f64, f64),
    drift_degree: usize,
    diff_degree: usize,
) -> Result<CoefficientModel<f64>> {
    if drift_degree > MAX_DEGREE || diff_degree > MAX_DEGREE {
        return Err(Error::arg(format!("coefficient degrees must be <= {MAX_DEGREE}")));
    }
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::arg(format!("empty fit window [{lo}, {hi}]")));
    }
    let tol = 1e-9 * lo.abs().max(hi.abs()).max(1.0);
    let idx: Vec<usize> = (0..series.times.len())
        .filter(|&i| series.times[i] >= lo - tol && series.times[i] <= hi + tol)
        .collect();
    let needed = drift_degree.max(diff_degree) + 2;
    if idx.len() < needed {
        return Err(Error::InsufficientSamples { needed, got: idx.len() });
    }
    let t: Vec<f64> = idx.iter().map(|&i| series.times[i]).collect();
    let mean: Vec<f64> = idx.iter().map(|&i| series.mean[i]).collect();
    let var: Vec<f64> = idx.iter().map(|&i| series.variance[i]).collect();
    let drift = derivative(&polyfit(&t, &mean, drift_degree + 1)?, 1.0);
    let diffusion = derivative(&polyfit(&t, &var, diff_degree + 1)?, 0.5);
    CoefficientModel::new(drift, diffusion)
}
