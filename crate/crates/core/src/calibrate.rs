//! Loss-minimizing calibration of time-polynomial coefficients.
//!
//! Parameters are laid out as `[drift_0..=drift_p, diffusion_0..=diffusion_q]`.
//! The optimizer searches the unit cube mapped affinely onto the bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientModel, MAX_DEGREE};
use crate::density::{kl_divergence, l2_distance_sq, DensityField};
use crate::error::{Error, Result};
use crate::fpe_solver::{solve_segmented, FpeOperator, SolverConfig};

/// Base of the loss returned for infeasible parameters.
pub const PENALTY: f64 = 1e6;
pub const MIN_BUDGET: usize = 50;
/// Termination threshold on the simplex size in unit-cube coordinates.
pub const SIMPLEX_TOL: f64 = 1e-6;
pub const MULTISTART_STARTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `KL(target ‖ predicted)`.
    #[default]
    Kl,
    /// Squared L2 distance.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Single run from the problem's start point.
    NelderMead,
    /// Eight seeded uniform starts on half the budget, then a restart from the best point.
    RandomMultistartNelderMead { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    BudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    initial: DensityField<f64>,
    targets: Vec<DensityField<f64>>,
    weights: Vec<f64>,
    drift_degree: usize,
    diffusion_degree: usize,
    bounds: Vec<(f64, f64)>,
    solver: SolverConfig<f64>,
    distance: Distance,
    start: Option<Vec<f64>>,
    op: FpeOperator<f64>,
}

impl CalibrationProblem {
    /// Uniform weights, KL distance, start at the center of the bounds.
    ///
    /// Target times come from each target's own `time()`; the solver's
    /// record times are replaced by them.
    pub fn new(
        initial: DensityField<f64>,
        targets: Vec<DensityField<f64>>,
        drift_degree: usize,
        diffusion_degree: usize,
        bounds: Vec<(f64, f64)>,
        solver: SolverConfig<f64>,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::arg("calibration needs at least one target"));
        }
        if drift_degree > MAX_DEGREE || diffusion_degree > MAX_DEGREE {
            return Err(Error::arg(format!("polynomial degree exceeds {MAX_DEGREE}")));
        }
        let n_params = drift_degree + diffusion_degree + 2;
        if bounds.len() != n_params {
            return Err(Error::arg(format!("expected {n_params} bounds, got {}", bounds.len())));
        }
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::arg(format!("bound {i} is not finite")));
            }
            if !(lo < hi) {
                return Err(Error::arg(format!("bound {i} has zero measure: [{lo}, {hi}]")));
            }
        }
        let mut prev = initial.time();
        for t in &targets {
            if !initial.grid().same_as(t.grid()) {
                return Err(Error::GridMismatch);
            }
            if !(t.time() > prev) {
                return Err(Error::arg("target times must increase strictly after the initial time"));
            }
            prev = t.time();
        }
        let solver = SolverConfig { record_times: targets.iter().map(|t| t.time()).collect(), ..solver };
        let op = FpeOperator::new(initial.grid(), solver.accuracy_order, solver.boundary)?;
        let weights = vec![1.0; targets.len()];
        Ok(Self { initial, targets, weights, drift_degree, diffusion_degree, bounds, solver, distance: Distance::Kl, start: None, op })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.targets.len() {
            return Err(Error::arg("one weight per target"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::arg("weights must be nonnegative with a positive sum"));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn with_distance(mut self, distance: Distance) -> Self {
        self.distance = distance;
        self
    }

    /// Start point for [`Optimizer::NelderMead`].
    pub fn with_start(mut self, start: Vec<f64>) -> Result<Self> {
        self.check_params(&start)?;
        self.start = Some(start);
        Ok(self)
    }

    /// `(drift_degree, diffusion_degree)`.
    pub fn degrees(&self) -> (usize, usize) {
        (self.drift_degree, self.diffusion_degree)
    }

    pub fn n_params(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn targets(&self) -> &[DensityField<f64>] {
        &self.targets
    }

    pub fn initial(&self) -> &DensityField<f64> {
        &self.initial
    }

    pub fn model(&self, params: &[f64]) -> Result<CoefficientModel<f64>> {
        self.check_len(params)?;
        let (d1, d2) = params.split_at(self.drift_degree + 1);
        CoefficientModel::new(d1.to_vec(), d2.to_vec())
    }

    fn check_len(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::arg(format!("expected {} parameters, got {}", self.n_params(), params.len())));
        }
        Ok(())
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        self.check_len(params)?;
        for (i, (&p, &(lo, hi))) in params.iter().zip(&self.bounds).enumerate() {
            if !(lo <= p && p <= hi) {
                return Err(Error::arg(format!("parameter {i} = {p} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    fn to_params(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.bounds).map(|(&u, &(lo, hi))| lo + u * (hi - lo)).collect()
    }

    fn to_unit(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.bounds).map(|(&p, &(lo, hi))| (p - lo) / (hi - lo)).collect()
    }
}

/// `Σ w_j d(target_j, predicted_j)`, or `PENALTY + magnitude` for infeasible parameters.
pub fn loss(problem: &CalibrationProblem, params: &[f64]) -> Result<f64> {
    problem.check_params(params)?;
    let model = problem.model(params)?;
    let trace = match solve_segmented(&problem.op, &problem.initial, &model, &problem.solver) {
        Ok(t) => t,
        Err(Error::NegativeDiffusion { value, .. }) => return Ok(PENALTY + value.abs()),
        Err(Error::Stability { dt, bound }) => return Ok(PENALTY + dt / bound),
        Err(Error::Diverged { .. }) | Err(Error::Singular) => return Ok(PENALTY),
        Err(e) => return Err(e),
    };
    if trace.diverged || trace.snapshots.len() != problem.targets.len() {
        return Ok(PENALTY);
    }
    let mut total = 0.0;
    for ((target, predicted), w) in problem.targets.iter().zip(&trace.snapshots).zip(&problem.weights) {
        let d = match problem.distance {
            Distance::Kl => kl_divergence(target, predicted)?,
            Distance::L2 => l2_distance_sq(target, predicted)?,
        };
        total += w * d;
    }
    Ok(if total.is_finite() { total } else { PENALTY })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub model: CoefficientModel<f64>,
    pub params: Vec<f64>,
    pub final_loss: f64,
    /// Best loss seen after each evaluation; non-increasing.
    pub history: Vec<f64>,
    pub evaluations: usize,
    pub status: Status,
}

pub fn calibrate(problem: &CalibrationProblem, optimizer: Optimizer, budget: usize) -> Result<CalibrationResult> {
    if budget < MIN_BUDGET {
        return Err(Error::arg(format!("budget {budget} is below the minimum of {MIN_BUDGET}")));
    }
    let run = match optimizer {
        Optimizer::NelderMead => {
            let start = match &problem.start {
                Some(p) => problem.to_unit(p),
                None => vec![0.5; problem.n_params()],
            };
            nelder_mead(problem, &start, budget)?
        }
        Optimizer::RandomMultistartNelderMead { seed } => multistart(problem, seed, budget)?,
    };
    let params = problem.to_params(&run.best);
    Ok(CalibrationResult {
        model: problem.model(&params)?,
        params,
        final_loss: run.best_loss,
        history: run.history,
        evaluations: run.evaluations,
        status: run.status,
    })
}

struct Run {
    best: Vec<f64>,
    best_loss: f64,
    history: Vec<f64>,
    evaluations: usize,
    status: Status,
}

fn multistart(problem: &CalibrationProblem, seed: u64, budget: usize) -> Result<Run> {
    let n = problem.n_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<Vec<f64>> =
        (0..MULTISTART_STARTS).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
    let explore = budget / 2;
    let runs: Vec<Result<Run>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let share = explore / MULTISTART_STARTS + usize::from(i < explore % MULTISTART_STARTS);
            nelder_mead(problem, s, share)
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    // lowest loss, ties to the lowest start index
    let winner = runs
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if r.best_loss < runs[best].best_loss { i } else { best });

    let mut history = Vec::with_capacity(budget);
    let mut running = f64::INFINITY;
    let mut evaluations = 0;
    for r in &runs {
        for &h in &r.history {
            running = running.min(h);
            history.push(running);
        }
        evaluations += r.evaluations;
    }
    let polish = nelder_mead(problem, &runs[winner].best, budget - evaluations)?;
    for &h in &polish.history {
        running = running.min(h);
        history.push(running);
    }
    evaluations += polish.evaluations;
    let (best, best_loss, status) = if polish.best_loss <= runs[winner].best_loss {
        (polish.best, polish.best_loss, polish.status)
    } else {
        let w = &runs[winner];
        (w.best.clone(), w.best_loss, w.status)
    };
    Ok(Run { best, best_loss, history, evaluations, status })
}

struct Counter<'a> {
    problem: &'a CalibrationProblem,
    budget: usize,
    evaluations: usize,
    best: f64,
    history: Vec<f64>,
}

impl Counter<'_> {
    fn exhausted(&self) -> bool {
        self.evaluations >= self.budget
    }

    fn eval(&mut self, u: &[f64]) -> Result<f64> {
        let v = loss(self.problem, &self.problem.to_params(u))?;
        self.evaluations += 1;
        self.best = self.best.min(v);
        self.history.push(self.best);
        Ok(v)
    }
}

fn clamp_unit(u: &mut [f64]) {
    for v in u {
        *v = v.clamp(0.0, 1.0);
    }
}

fn simplex_size(simplex: &[(Vec<f64>, f64)]) -> f64 {
    let best = &simplex[0].0;
    simplex[1..]
        .iter()
        .map(|(v, _)| v.iter().zip(best).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

/// Nelder-Mead with standard coefficients, vertices projected onto the unit cube.
fn nelder_mead(problem: &CalibrationProblem, start: &[f64], budget: usize) -> Result<Run> {
    const ALPHA: f64 = 1.0;
    const GAMMA: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIGMA: f64 = 0.5;
    const STEP: f64 = 0.1;

    let n = start.len();
    let mut c = Counter { problem, budget, evaluations: 0, best: f64::INFINITY, history: Vec::new() };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut x0 = start.to_vec();
    clamp_unit(&mut x0);
    for i in 0..=n {
        if c.exhausted() {
            break;
        }
        let mut v = x0.clone();
        if i > 0 {
            let j = i - 1;
            v[j] = if v[j] + STEP <= 1.0 { v[j] + STEP } else { v[j] - STEP };
        }
        let f = c.eval(&v)?;
        simplex.push((v, f));
    }
    let sort = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    sort(&mut simplex);

    let mut status = Status::BudgetExhausted;
    while simplex.len() == n + 1 {
        if simplex_size(&simplex) < SIMPLEX_TOL {
            status = Status::Converged;
            break;
        }
        if c.exhausted() {
            break;
        }
        let centroid: Vec<f64> =
            (0..n).map(|k| simplex[..n].iter().map(|(v, _)| v[k]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        let towards = |coef: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid.iter().zip(&worst.0).map(|(c, w)| c + coef * (c - w)).collect();
            clamp_unit(&mut p);
            p
        };

        let xr = towards(ALPHA);
        let fr = c.eval(&xr)?;
        if fr < simplex[0].1 {
            if c.exhausted() {
                simplex[n] = (xr, fr);
            } else {
                let xe = towards(GAMMA);
                let fe = c.eval(&xe)?;
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            }
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            if c.exhausted() {
                break;
            }
            let (xc, fc) = if fr < worst.1 {
                let x = towards(RHO);
                let f = c.eval(&x)?;
                (x, f)
            } else {
                let x = towards(-RHO);
                let f = c.eval(&x)?;
                (x, f)
            };
            if fc < fr.min(worst.1) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    if c.exhausted() {
                        break;
                    }
                    let v: Vec<f64> = best.iter().zip(&vertex.0).map(|(b, x)| b + SIGMA * (x - b)).collect();
                    let f = c.eval(&v)?;
                    *vertex = (v, f);
                }
            }
        }
        sort(&mut simplex);
    }

    let (best, best_loss) = simplex
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(v, f)| (v.clone(), *f))
        .ok_or_else(|| Error::arg("budget too small to evaluate any vertex"))?;
    Ok(Run { best, best_loss, history: c.history, evaluations: c.evaluations, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::Family;
    use crate::fpe_solver::{solve, Integrator};
    use crate::grid::Grid;

    fn f3_problem() -> CalibrationProblem {
        let g = Grid::new(-10.0, 20.0, 513).unwrap();
        let fam = Family::F3 { drift: 1.0, diffusion: 0.5 };
        let f0 = fam.density(&g, 1.0).unwrap();
        let targets = vec![fam.density(&g, 1.5).unwrap(), fam.density(&g, 2.0).unwrap()];
        let cfg = SolverConfig::new(Integrator::CrankNicolson, 1e-2, vec![]);
        CalibrationProblem::new(f0, targets, 0, 0, vec![(0.0, 2.0), (0.01, 2.0)], cfg).unwrap()
    }

    #[test]
    fn loss_is_deterministic_and_small_at_truth() {
        let p = f3_problem();
        let a = loss(&p, &[1.0, 0.5]).unwrap();
        let b = loss(&p, &[1.0, 0.5]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a < 1e-3, "{a}");
        assert!(loss(&p, &[1.5, 0.5]).unwrap() > a);
    }

    #[test]
    fn identity_target_zero_loss() {
        let g = Grid::new(-5.0, 5.0, 201).unwrap();
        let fam = Family::F1 { diffusion: 0.5 };
        let f0 = fam.density(&g, 1.0).unwrap();
        let target = f0.clone().with_time(1.5);
        let cfg = SolverConfig::new(Integrator::CrankNicolson, 0.05, vec![]);
        let p = CalibrationProblem::new(f0, vec![target], 0, 0, vec![(-1.0, 1.0), (-1.0, 1.0)], cfg).unwrap();
        assert!(loss(&p, &[0.0, 0.0]).unwrap().abs() <= 1e-10);
        assert!(loss(&p, &[0.0, -0.2]).unwrap() >= PENALTY);
        assert!(loss(&p, &[0.0, 2.0]).is_err());
        assert!(loss(&p, &[0.0]).is_err());
    }

    #[test]
    fn problem_validation() {
        let p = f3_problem();
        let mk = |bounds| CalibrationProblem::new(p.initial.clone(), p.targets.clone(), 0, 0, bounds, p.solver.clone());
        assert!(mk(vec![(0.0, 0.0), (0.0, 1.0)]).is_err());
        assert!(mk(vec![(0.0, f64::INFINITY), (0.0, 1.0)]).is_err());
        assert!(mk(vec![(0.0, 1.0)]).is_err());
        let back = CalibrationProblem::new(p.initial.clone(), vec![p.initial.clone()], 0, 0, vec![(0.0, 1.0); 2], p.solver.clone());
        assert!(back.is_err());
        assert!(p.clone().with_weights(vec![0.0, 0.0]).is_err());
        assert!(p.clone().with_weights(vec![1.0]).is_err());
        assert!(calibrate(&p, Optimizer::NelderMead, 49).is_err());
    }

    #[test]
    fn recovers_f3_constants() {
        let p = f3_problem();
        let r = calibrate(&p, Optimizer::NelderMead, 300).unwrap();
        assert!((r.params[0] - 1.0).abs() < 0.02, "{:?}", r.params);
        assert!((r.params[1] - 0.5).abs() < 0.01, "{:?}", r.params);
        assert_eq!(r.final_loss.to_bits(), loss(&p, &r.params).unwrap().to_bits());
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.evaluations <= 300);
        assert_eq!(r.history.len(), r.evaluations);
    }

    #[test]
    fn multistart_small_budget_is_valid_and_deterministic() {
        let p = f3_problem();
        let opt = Optimizer::RandomMultistartNelderMead { seed: 9 };
        let a = calibrate(&p, opt, 50).unwrap();
        assert!(a.evaluations <= 50);
        assert!(a.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*a.history.last().unwrap(), a.final_loss);
        let b = calibrate(&p, opt, 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn l2_distance_variant() {
        let g = Grid::new(-10.0, 20.0, 257).unwrap();
        let f0 = Family::F3 { drift: 1.0, diffusion: 0.5 }.density(&g, 1.0).unwrap();
        let model = CoefficientModel::constant(0.8, 0.3);
        let cfg = SolverConfig::new(Integrator::CrankNicolson, 0.01, vec![1.5]);
        let target = solve(&f0, &model, &cfg).unwrap().snapshots.remove(0);
        let p = CalibrationProblem::new(f0, vec![target], 0, 0, vec![(0.0, 2.0), (0.01, 1.0)], cfg)
            .unwrap()
            .with_distance(Distance::L2);
        assert!(loss(&p, &[0.8, 0.3]).unwrap() <= 1e-20);
        let r = calibrate(&p, Optimizer::NelderMead, 300).unwrap();
        assert!((r.params[0] - 0.8).abs() < 0.01 && (r.params[1] - 0.3).abs() < 0.01, "{:?}", r.params);
    }
}
