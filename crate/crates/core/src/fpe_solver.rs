//! Semi-discrete Fokker-Planck solver.
//!
//! The density evolves as `ḟ = -E1 (D1(t) f) + E2 (D2(t) f)` with `E1`, `E2`
//! finite-difference derivative matrices. Coefficients depend on time only,
//! so the right-hand side is `A(t) f = D1(t)·(-E1 f) + D2(t)·(E2 f)` and the
//! two banded operators are assembled once per solve.

use serde::{Deserialize, Serialize};

use crate::banded::{BandLu, BandMatrix};
use crate::coefficients::CoefficientModel;
use crate::density::{DensityField, NORMALIZED_MASS_TOL};
use crate::error::{Error, Result};
use crate::grid::{DerivativeMatrix, Grid};
use crate::scalar::Real;

/// Explicit diffusion stability factor: `dt ≤ 0.4·h²/max|D2|`.
pub const RK4_DIFFUSION_FACTOR: f64 = 0.4;
/// Explicit advection bound: `dt ≤ h/max|D1|`.
pub const RK4_ADVECTION_FACTOR: f64 = 1.0;
/// Relative tolerance when matching record times to integer step counts.
const STEP_ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    ExplicitRk4,
    #[default]
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    ZeroDirichlet,
    /// Reflecting walls. The two boundary rows become half-cell flux balances,
    /// which makes trapezoidal mass an exact invariant of the second-order scheme.
    #[default]
    ZeroFlux,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig<T> {
    pub integrator: Integrator,
    pub dt: T,
    pub record_times: Vec<T>,
    pub boundary: Boundary,
    pub accuracy_order: usize,
    pub allow_negative_diffusion: bool,
}

impl<T: Real> SolverConfig<T> {
    pub fn new(integrator: Integrator, dt: T, record_times: Vec<T>) -> Self {
        Self {
            integrator,
            dt,
            record_times,
            boundary: Boundary::ZeroFlux,
            accuracy_order: 2,
            allow_negative_diffusion: false,
        }
    }
}

/// Snapshots at the requested record times plus per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionTrace<T> {
    pub snapshots: Vec<DensityField<T>>,
    /// Trapezoidal mass after every step, before any renormalization.
    pub mass_log: Vec<T>,
    pub diverged: bool,
    pub diverged_at: Option<T>,
}

impl<T: Real> SolutionTrace<T> {
    pub fn last(&self) -> Option<&DensityField<T>> {
        self.snapshots.last()
    }

    /// Converts a diverged trace into an error.
    pub fn into_complete(self) -> Result<Self> {
        match self.diverged_at {
            Some(t) if self.diverged => Err(Error::Diverged { time: t.as_f64() }),
            _ => Ok(self),
        }
    }
}

/// Literal matrix form `-E1 (D1 f) + E2 (D2 f)` without boundary treatment.
pub fn step_rhs<T: Real>(
    f: &DensityField<T>,
    model: &CoefficientModel<T>,
    t: T,
    e1: &DerivativeMatrix<T>,
    e2: &DerivativeMatrix<T>,
) -> Result<Vec<T>> {
    if !f.grid().same_as(e1.grid()) || !f.grid().same_as(e2.grid()) {
        return Err(Error::GridMismatch);
    }
    let (d1, d2) = model.eval(t);
    let drift_flux: Vec<T> = f.values().iter().map(|&v| d1 * v).collect();
    let diff_flux: Vec<T> = f.values().iter().map(|&v| d2 * v).collect();
    let a = e1.apply(&drift_flux);
    let b = e2.apply(&diff_flux);
    Ok(a.into_iter().zip(b).map(|(a, b)| b - a).collect())
}

/// Right-hand-side operator split into drift and diffusion parts, boundary rows applied.
#[derive(Debug, Clone)]
pub struct FpeOperator<T> {
    grid: Grid<T>,
    boundary: Boundary,
    drift: BandMatrix<T>,
    diffusion: BandMatrix<T>,
}

impl<T: Real> FpeOperator<T> {
    pub fn new(grid: &Grid<T>, accuracy_order: usize, boundary: Boundary) -> Result<Self> {
        let e1 = DerivativeMatrix::new(grid, 1, accuracy_order)?;
        let e2 = DerivativeMatrix::new(grid, 2, accuracy_order)?;
        let (kl1, ku1) = e1.bandwidths();
        let (kl2, ku2) = e2.bandwidths();
        let (kl, ku) = (kl1.max(kl2).max(1), ku1.max(ku2).max(1));
        let mut drift = e1.to_band().widened(kl, ku).scaled(-T::one());
        let mut diffusion = e2.to_band().widened(kl, ku);

        let n = grid.len();
        drift.clear_row(0);
        drift.clear_row(n - 1);
        diffusion.clear_row(0);
        diffusion.clear_row(n - 1);
        if boundary == Boundary::ZeroFlux {
            let h = grid.spacing();
            let inv_h = T::one() / h;
            let two_inv_h2 = T::lit(2.0) / (h * h);
            drift.set(0, 0, -inv_h);
            drift.set(0, 1, -inv_h);
            drift.set(n - 1, n - 2, inv_h);
            drift.set(n - 1, n - 1, inv_h);
            diffusion.set(0, 0, -two_inv_h2);
            diffusion.set(0, 1, two_inv_h2);
            diffusion.set(n - 1, n - 2, two_inv_h2);
            diffusion.set(n - 1, n - 1, -two_inv_h2);
        }
        Ok(Self { grid: *grid, boundary, drift, diffusion })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// `A f` for coefficient values `(d1, d2)`.
    pub fn apply(&self, d1: T, d2: T, f: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); f.len()];
        self.apply_into(d1, d2, f, &mut out);
        out
    }

    fn apply_into(&self, d1: T, d2: T, f: &[T], out: &mut [T]) {
        let mut tmp = vec![T::zero(); f.len()];
        self.drift.matvec_into(f, out);
        self.diffusion.matvec_into(f, &mut tmp);
        for (o, t) in out.iter_mut().zip(tmp) {
            *o = d1 * *o + d2 * t;
        }
    }

    /// Assembled `A` for coefficient values `(d1, d2)`.
    pub fn matrix(&self, d1: T, d2: T) -> BandMatrix<T> {
        self.drift.combine(d1, &self.diffusion, d2)
    }
}

fn step_counts<T: Real>(t0: T, dt: T, record_times: &[T]) -> Result<Vec<usize>> {
    record_times
        .iter()
        .map(|&tau| {
            let ratio = ((tau - t0) / dt).as_f64();
            let k = ratio.round();
            if k < 0.0 || (ratio - k).abs() > STEP_ALIGN_TOL * ratio.abs().max(1.0) {
                return Err(Error::MisalignedRecordTime { time: tau.as_f64(), t0: t0.as_f64(), dt: dt.as_f64() });
            }
            Ok(k as usize)
        })
        .collect()
}

fn validate<T: Real>(f0: &DensityField<T>, config: &SolverConfig<T>) -> Result<()> {
    if !(config.dt > T::zero()) || !config.dt.is_finite() {
        return Err(Error::arg(format!("dt must be positive and finite, got {}", config.dt)));
    }
    if config.record_times.is_empty() {
        return Err(Error::arg("no record times"));
    }
    if config.record_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::arg("record times must be strictly increasing"));
    }
    if config.record_times[0] < f0.time() {
        return Err(Error::arg(format!(
            "record time {} precedes the initial time {}",
            config.record_times[0],
            f0.time()
        )));
    }
    let mass = f0.mass().as_f64();
    if (mass - 1.0).abs() > NORMALIZED_MASS_TOL {
        return Err(Error::Unnormalized { mass });
    }
    Ok(())
}

/// Integrates the Fokker-Planck equation from `f0` and records snapshots.
///
/// Record times must be whole multiples of `dt` after `f0.time()`. Each
/// snapshot is clipped at zero and renormalized; the evolving state is not.
/// A non-finite state stops the integration and returns the partial trace
/// with `diverged` set.
pub fn solve<T: Real>(
    f0: &DensityField<T>,
    model: &CoefficientModel<T>,
    config: &SolverConfig<T>,
) -> Result<SolutionTrace<T>> {
    let op = FpeOperator::new(f0.grid(), config.accuracy_order, config.boundary)?;
    solve_with(&op, f0, model, config)
}

/// [`solve`] with a prebuilt operator, for repeated solves on one grid.
pub fn solve_with<T: Real>(
    op: &FpeOperator<T>,
    f0: &DensityField<T>,
    model: &CoefficientModel<T>,
    config: &SolverConfig<T>,
) -> Result<SolutionTrace<T>> {
    validate(f0, config)?;
    if !op.grid().same_as(f0.grid()) || op.boundary() != config.boundary {
        return Err(Error::GridMismatch);
    }
    let t0 = f0.time();
    let dt = config.dt;
    let counts = step_counts(t0, dt, &config.record_times)?;
    let n_steps = *counts.last().expect("non-empty");
    let time_at = |k: usize| t0 + T::from_usize_exact(k) * dt;
    let half = T::lit(0.5);

    // coefficient sanity over every time the integrator will query
    let query_times = (0..=n_steps).flat_map(|k| [time_at(k), time_at(k) + half * dt]);
    let mut max_d1 = T::zero();
    let mut max_d2 = T::zero();
    for t in query_times {
        let (d1, d2) = model.eval(t);
        if !config.allow_negative_diffusion && d2 < T::zero() {
            return Err(Error::NegativeDiffusion { time: t.as_f64(), value: d2.as_f64() });
        }
        max_d1 = max_d1.max(d1.abs());
        max_d2 = max_d2.max(d2.abs());
    }
    if config.integrator == Integrator::ExplicitRk4 {
        let h = op.grid().spacing();
        let mut bound = T::infinity();
        if max_d2 > T::zero() {
            bound = bound.min(T::lit(RK4_DIFFUSION_FACTOR) * h * h / max_d2);
        }
        if max_d1 > T::zero() {
            bound = bound.min(T::lit(RK4_ADVECTION_FACTOR) * h / max_d1);
        }
        if dt > bound {
            return Err(Error::Stability { dt: dt.as_f64(), bound: bound.as_f64() });
        }
    }

    let n = f0.grid().len();
    let mut state = f0.values().to_vec();
    if config.boundary == Boundary::ZeroDirichlet {
        state[0] = T::zero();
        state[n - 1] = T::zero();
    }
    let grid = *f0.grid();
    let mut trace = SolutionTrace { snapshots: Vec::new(), mass_log: Vec::with_capacity(n_steps), diverged: false, diverged_at: None };
    let mut next_record = 0;
    let record = |trace: &mut SolutionTrace<T>, state: &[T], idx: usize| -> bool {
        match DensityField::from_raw(grid, state.to_vec(), config.record_times[idx]) {
            Ok(s) => {
                trace.snapshots.push(s);
                true
            }
            Err(_) => false,
        }
    };
    while next_record < counts.len() && counts[next_record] == 0 {
        record(&mut trace, &state, next_record);
        next_record += 1;
    }

    let mut stepper = Stepper::new(op, config.integrator, dt, n);
    for k in 0..n_steps {
        stepper.step(model, time_at(k), &mut state)?;
        let mass = grid.integrate(&state);
        trace.mass_log.push(mass);
        if !mass.is_finite() || state.iter().any(|v| !v.is_finite()) {
            trace.diverged = true;
            trace.diverged_at = Some(time_at(k + 1));
            return Ok(trace);
        }
        while next_record < counts.len() && counts[next_record] == k + 1 {
            if !record(&mut trace, &state, next_record) {
                trace.diverged = true;
                trace.diverged_at = Some(time_at(k + 1));
                return Ok(trace);
            }
            next_record += 1;
        }
    }
    Ok(trace)
}

/// [`solve_with`] for record times that need not be multiples of `dt`.
///
/// Aligned record times take the single-run path. Otherwise each gap `Δ`
/// between consecutive record times is integrated with step `Δ / ceil(Δ / dt)`,
/// restarting from the clipped, renormalized snapshot at its left end.
pub fn solve_segmented<T: Real>(
    op: &FpeOperator<T>,
    f0: &DensityField<T>,
    model: &CoefficientModel<T>,
    config: &SolverConfig<T>,
) -> Result<SolutionTrace<T>> {
    validate(f0, config)?;
    if step_counts(f0.time(), config.dt, &config.record_times).is_ok() {
        return solve_with(op, f0, model, config);
    }
    let mut trace = SolutionTrace { snapshots: Vec::new(), mass_log: Vec::new(), diverged: false, diverged_at: None };
    let mut current = f0.clone();
    for &tau in &config.record_times {
        let gap = tau - current.time();
        let steps = (gap / config.dt * (T::one() - T::lit(STEP_ALIGN_TOL))).ceil().max(T::one());
        let segment = SolverConfig { dt: gap / steps, record_times: vec![tau], ..config.clone() };
        let part = if gap > T::zero() {
            solve_with(op, &current, model, &segment)?
        } else {
            SolutionTrace { snapshots: vec![current.clone().with_time(tau)], mass_log: vec![], diverged: false, diverged_at: None }
        };
        trace.mass_log.extend(part.mass_log);
        if part.diverged {
            trace.diverged = true;
            trace.diverged_at = part.diverged_at;
            return Ok(trace);
        }
        current = part.snapshots.into_iter().next().expect("one record time");
        trace.snapshots.push(current.clone());
    }
    Ok(trace)
}

struct Stepper<'a, T> {
    op: &'a FpeOperator<T>,
    integrator: Integrator,
    dt: T,
    k: [Vec<T>; 4],
    tmp: Vec<T>,
    // Crank-Nicolson factorization reused while the implicit coefficients stay bit-identical
    cached: Option<((T, T), BandLu<T>)>,
}

impl<'a, T: Real> Stepper<'a, T> {
    fn new(op: &'a FpeOperator<T>, integrator: Integrator, dt: T, n: usize) -> Self {
        let z = || vec![T::zero(); n];
        Self { op, integrator, dt, k: [z(), z(), z(), z()], tmp: z(), cached: None }
    }

    fn step(&mut self, model: &CoefficientModel<T>, t: T, f: &mut [T]) -> Result<()> {
        match self.integrator {
            Integrator::ExplicitRk4 => {
                self.rk4(model, t, f);
                Ok(())
            }
            Integrator::CrankNicolson => self.crank_nicolson(model, t, f),
        }
    }

    fn rk4(&mut self, model: &CoefficientModel<T>, t: T, f: &mut [T]) {
        let dt = self.dt;
        let half = T::lit(0.5);
        let stages = [(T::zero(), t), (half, t + half * dt), (half, t + half * dt), (T::one(), t + dt)];
        for s in 0..4 {
            let (c, ts) = stages[s];
            if s == 0 {
                self.tmp.copy_from_slice(f);
            } else {
                for ((x, &f0), &kp) in self.tmp.iter_mut().zip(f.iter()).zip(&self.k[s - 1]) {
                    *x = f0 + c * dt * kp;
                }
            }
            let (d1, d2) = model.eval(ts);
            let mut out = std::mem::take(&mut self.k[s]);
            self.op.apply_into(d1, d2, &self.tmp, &mut out);
            self.k[s] = out;
        }
        let sixth = dt / T::lit(6.0);
        let two = T::lit(2.0);
        for (i, x) in f.iter_mut().enumerate() {
            *x += sixth * (self.k[0][i] + two * self.k[1][i] + two * self.k[2][i] + self.k[3][i]);
        }
    }

    fn crank_nicolson(&mut self, model: &CoefficientModel<T>, t: T, f: &mut [T]) -> Result<()> {
        let half_dt = T::lit(0.5) * self.dt;
        let (d1, d2) = model.eval(t);
        let af = self.op.apply(d1, d2, f);
        for (x, a) in f.iter_mut().zip(af) {
            *x += half_dt * a;
        }
        let next = model.eval(t + self.dt);
        let reuse = matches!(&self.cached, Some((c, _)) if c.0 == next.0 && c.1 == next.1);
        if !reuse {
            let a = self.op.matrix(next.0, next.1);
            let (kl, ku) = a.bandwidths();
            let m = BandMatrix::identity(f.len(), kl, ku).combine(T::one(), &a, -half_dt);
            self.cached = Some((next, m.factor()?));
        }
        let lu = &self.cached.as_ref().expect("factorization cached").1;
        lu.solve_in_place(f);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::Family;
    use crate::density::{l1_distance, moments};

    fn f3_setup(n: usize) -> (Grid<f64>, Family<f64>, DensityField<f64>) {
        let g = Grid::new(-10.0, 20.0, n).unwrap();
        let fam = Family::F3 { drift: 1.0, diffusion: 0.5 };
        let f0 = fam.density(&g, 1.0).unwrap();
        (g, fam, f0)
    }

    #[test]
    fn zero_coefficients_give_zero_rhs() {
        let (g, _, f0) = f3_setup(257);
        let e1 = DerivativeMatrix::new(&g, 1, 2).unwrap();
        let e2 = DerivativeMatrix::new(&g, 2, 2).unwrap();
        let r = step_rhs(&f0, &CoefficientModel::zero(), 1.0, &e1, &e2).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rhs_matches_analytic_time_derivative() {
        // pure diffusion: ∂t f1 = D ∂xx f1
        let d = 0.5;
        let (t, e) = (1.0, 1e-5);
        let errs: Vec<f64> = [401usize, 801]
            .iter()
            .map(|&n| {
                let g = Grid::<f64>::new(-8.0, 8.0, n).unwrap();
                let fam = Family::F1 { diffusion: d };
                let f = DensityField::new(g, g.nodes().iter().map(|&x| fam.pdf(x, t)).collect(), t).unwrap();
                let e1 = DerivativeMatrix::new(&g, 1, 2).unwrap();
                let e2 = DerivativeMatrix::new(&g, 2, 2).unwrap();
                let rhs = step_rhs(&f, &CoefficientModel::constant(0.0, d), t, &e1, &e2).unwrap();
                g.nodes()
                    .iter()
                    .enumerate()
                    .skip(1)
                    .take(n - 2)
                    .map(|(i, &x)| {
                        let exact = (fam.pdf(x, t + e) - fam.pdf(x, t - e)) / (2.0 * e);
                        (rhs[i] - exact).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!(errs[0] < 1e-3, "{errs:?}");
        assert!(errs[0] / errs[1] > 3.5, "not second order: {errs:?}");
    }

    #[test]
    fn rhs_pure_drift_matches_gradient() {
        let mu = 1.7f64;
        let g = Grid::<f64>::new(-6.0, 6.0, 601).unwrap();
        let f = DensityField::new(g, g.nodes().iter().map(|&x| (-x * x / 2.0).exp()).collect(), 0.0).unwrap();
        let e1 = DerivativeMatrix::new(&g, 1, 2).unwrap();
        let e2 = DerivativeMatrix::new(&g, 2, 2).unwrap();
        let rhs = step_rhs(&f, &CoefficientModel::constant(mu, 0.0), 0.0, &e1, &e2).unwrap();
        let h = g.spacing();
        for (i, &x) in g.nodes().iter().enumerate().skip(1).take(599) {
            let exact = mu * x * (-x * x / 2.0).exp();
            assert!((rhs[i] - exact).abs() < 2.0 * h * h * mu, "node {i}");
        }
    }

    #[test]
    fn rhs_grid_mismatch() {
        let (g, _, f0) = f3_setup(257);
        let other = Grid::new(g.x_min(), g.x_max(), 129).unwrap();
        let e1 = DerivativeMatrix::new(&other, 1, 2).unwrap();
        let e2 = DerivativeMatrix::new(&g, 2, 2).unwrap();
        assert!(matches!(step_rhs(&f0, &CoefficientModel::zero(), 1.0, &e1, &e2), Err(Error::GridMismatch)));
    }

    #[test]
    fn f3_both_integrators() {
        let (_, fam, f0) = f3_setup(1025);
        let model = CoefficientModel::constant(1.0, 0.5);
        for (integrator, dt) in [(Integrator::CrankNicolson, 1e-3), (Integrator::ExplicitRk4, 2.5e-4)] {
            let cfg = SolverConfig::new(integrator, dt, vec![2.0]);
            let trace = solve(&f0, &model, &cfg).unwrap();
            assert!(!trace.diverged);
            let exact = fam.density(f0.grid(), 2.0).unwrap();
            let l1 = l1_distance(trace.last().unwrap(), &exact).unwrap();
            assert!(l1 <= 5e-3, "{integrator:?}: {l1}");
        }
    }

    #[test]
    fn zero_coefficients_identity() {
        let (_, _, f0) = f3_setup(257);
        for integrator in [Integrator::CrankNicolson, Integrator::ExplicitRk4] {
            let cfg = SolverConfig::new(integrator, 0.01, vec![1.5]);
            let trace = solve(&f0, &CoefficientModel::zero(), &cfg).unwrap();
            let diff = trace.last().unwrap().values().iter().zip(f0.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10);
        }
    }

    #[test]
    fn zero_flux_conserves_mass_exactly() {
        let (_, _, f0) = f3_setup(513);
        let model = CoefficientModel::new(vec![1.0, -0.2], vec![0.5, 0.1]).unwrap();
        for integrator in [Integrator::CrankNicolson, Integrator::ExplicitRk4] {
            let cfg = SolverConfig::new(integrator, 5e-4, vec![1.5]);
            let trace = solve(&f0, &model, &cfg).unwrap();
            let mut prev = f0.mass();
            for &m in &trace.mass_log {
                assert!((m - prev).abs() <= 1e-8);
                prev = m;
            }
        }
    }

    #[test]
    fn negative_diffusion_refused_unless_overridden() {
        let (_, _, f0) = f3_setup(257);
        let model = CoefficientModel::constant(0.7320, -0.02931);
        let mut cfg = SolverConfig::new(Integrator::CrankNicolson, 0.01, vec![1.1]);
        assert!(matches!(solve(&f0, &model, &cfg), Err(Error::NegativeDiffusion { .. })));
        cfg.allow_negative_diffusion = true;
        assert!(solve(&f0, &model, &cfg).is_ok());
    }

    #[test]
    fn diffusion_turning_negative_within_horizon_detected() {
        let (_, _, f0) = f3_setup(257);
        let model = CoefficientModel::new(vec![0.0], vec![1.0, -0.5]).unwrap();
        let cfg = SolverConfig::new(Integrator::CrankNicolson, 0.01, vec![3.0]);
        assert!(matches!(solve(&f0, &model, &cfg), Err(Error::NegativeDiffusion { .. })));
    }

    #[test]
    fn rk4_stability_enforced() {
        let (g, _, f0) = f3_setup(1025);
        let bound = 0.4 * g.spacing().powi(2) / 0.5;
        let cfg = SolverConfig::new(Integrator::ExplicitRk4, 1e-3, vec![2.0]);
        match solve(&f0, &CoefficientModel::constant(1.0, 0.5), &cfg) {
            Err(Error::Stability { bound: b, .. }) => assert!((b - bound).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn record_times_validated() {
        let (_, _, f0) = f3_setup(257);
        let m = CoefficientModel::constant(1.0, 0.5);
        let bad = SolverConfig::new(Integrator::CrankNicolson, 0.01, vec![1.005]);
        assert!(matches!(solve(&f0, &m, &bad), Err(Error::MisalignedRecordTime { .. })));
        let before = SolverConfig::new(Integrator::CrankNicolson, 0.01, vec![0.5]);
        assert!(solve(&f0, &m, &before).is_err());
        let unordered = SolverConfig::new(Integrator::CrankNicolson, 0.01, vec![1.5, 1.2]);
        assert!(solve(&f0, &m, &unordered).is_err());
        let ok = SolverConfig::new(Integrator::CrankNicolson, 0.01, vec![1.0, 1.2, 1.5]);
        let trace = solve(&f0, &m, &ok).unwrap();
        assert_eq!(trace.snapshots.len(), 3);
        assert_eq!(trace.snapshots[0], f0);
        assert_eq!(trace.snapshots[2].time(), 1.5);
    }

    #[test]
    fn dirichlet_boundary_runs() {
        let (_, fam, f0) = f3_setup(513);
        let mut cfg = SolverConfig::new(Integrator::CrankNicolson, 1e-3, vec![2.0]);
        cfg.boundary = Boundary::ZeroDirichlet;
        let trace = solve(&f0, &CoefficientModel::constant(1.0, 0.5), &cfg).unwrap();
        let last = trace.last().unwrap();
        assert_eq!(last.values()[0], 0.0);
        let l1 = l1_distance(last, &fam.density(f0.grid(), 2.0).unwrap()).unwrap();
        assert!(l1 < 5e-3);
    }

    #[test]
    fn blow_up_flagged_as_divergence() {
        let (_, _, f0) = f3_setup(257);
        // strongly anti-diffusive Crank-Nicolson run grows without bound
        let mut cfg = SolverConfig::new(Integrator::CrankNicolson, 0.05, vec![50.0]);
        cfg.allow_negative_diffusion = true;
        let trace = solve(&f0, &CoefficientModel::constant(0.0, -5.0), &cfg).unwrap();
        assert!(trace.diverged);
        assert!(trace.into_complete().is_err());
    }

    #[test]
    fn higher_order_accuracy() {
        let (_, fam, f0) = f3_setup(513);
        let model = CoefficientModel::constant(1.0, 0.5);
        let mut cfg = SolverConfig::new(Integrator::CrankNicolson, 1e-3, vec![2.0]);
        cfg.accuracy_order = 4;
        let trace = solve(&f0, &model, &cfg).unwrap();
        let l1 = l1_distance(trace.last().unwrap(), &fam.density(f0.grid(), 2.0).unwrap()).unwrap();
        assert!(l1 < 1e-4, "{l1}");
        let m = moments(trace.last().unwrap(), 2).unwrap();
        assert!((m.mean - 2.0).abs() < 1e-4);
    }

    #[test]
    fn single_precision_solve() {
        let g = Grid::<f32>::new(-10.0, 20.0, 513).unwrap();
        let fam = Family::F3 { drift: 1.0f32, diffusion: 0.5 };
        let f0 = fam.density(&g, 1.0).unwrap();
        let cfg = SolverConfig::new(Integrator::CrankNicolson, 0.0078125f32, vec![2.0]);
        let trace = solve(&f0, &CoefficientModel::constant(1.0, 0.5), &cfg).unwrap();
        let l1 = l1_distance(trace.last().unwrap(), &fam.density(&g, 2.0).unwrap()).unwrap();
        assert!(l1 < 1e-2, "{l1}");
    }

    #[test]
    fn segmented_matches_aligned_and_handles_irregular_times() {
        let (_, fam, f0) = f3_setup(513);
        let model = CoefficientModel::constant(1.0, 0.5);
        let op = FpeOperator::new(f0.grid(), 2, Boundary::ZeroFlux).unwrap();
        let aligned = SolverConfig::new(Integrator::CrankNicolson, 1e-2, vec![1.5, 2.0]);
        assert_eq!(solve_segmented(&op, &f0, &model, &aligned).unwrap(), solve_with(&op, &f0, &model, &aligned).unwrap());

        let times = vec![1.0, 1.0f64.exp().ln() + 0.123456789, 2.0f64.sqrt() + 0.5];
        let cfg = SolverConfig::new(Integrator::CrankNicolson, 1e-2, times.clone());
        assert!(solve_with(&op, &f0, &model, &cfg).is_err());
        let trace = solve_segmented(&op, &f0, &model, &cfg).unwrap();
        assert_eq!(trace.snapshots.len(), 3);
        for (s, &t) in trace.snapshots.iter().zip(&times) {
            assert_eq!(s.time(), t);
            let l1 = l1_distance(s, &fam.density(f0.grid(), t).unwrap()).unwrap();
            assert!(l1 < 5e-3, "{t} {l1}");
        }
    }
}
