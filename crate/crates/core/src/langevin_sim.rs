//! Euler-Maruyama ensembles of the Itô Langevin equation `dx = h(x,t) dt + g(x,t) dW`.
//!
//! Every trajectory draws from its own ChaCha stream (`stream = trajectory index`),
//! so output is bit-identical regardless of thread count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{kde_estimate, Bandwidth, DensityField};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::km_estimate::TrajectoryEnsemble;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftFn {
    /// `h = mu`
    Constant { mu: f64 },
    /// `h = a + b·t`
    LinearInT { a: f64, b: f64 },
    /// `h = a + b·x`
    LinearInX { a: f64, b: f64 },
    /// `h = −theta·(x − mean)`
    OrnsteinUhlenbeck { theta: f64, mean: f64 },
}

impl DriftFn {
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        match *self {
            DriftFn::Constant { mu } => mu,
            DriftFn::LinearInT { a, b } => a + b * t,
            DriftFn::LinearInX { a, b } => a + b * x,
            DriftFn::OrnsteinUhlenbeck { theta, mean } => -theta * (x - mean),
        }
    }

    fn params(&self) -> [f64; 2] {
        match *self {
            DriftFn::Constant { mu } => [mu, 0.0],
            DriftFn::LinearInT { a, b } | DriftFn::LinearInX { a, b } => [a, b],
            DriftFn::OrnsteinUhlenbeck { theta, mean } => [theta, mean],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseFn {
    /// `g = sigma`
    Constant { sigma: f64 },
    /// `g = a + b·x`
    LinearInX { a: f64, b: f64 },
}

impl NoiseFn {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            NoiseFn::Constant { sigma } => sigma,
            NoiseFn::LinearInX { a, b } => a + b * x,
        }
    }

    fn params(&self) -> [f64; 2] {
        match *self {
            NoiseFn::Constant { sigma } => [sigma, 0.0],
            NoiseFn::LinearInX { a, b } => [a, b],
        }
    }
}

/// Itô SDE. The implied Fokker-Planck diffusion is `g²/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeSpec {
    pub drift: DriftFn,
    pub noise: NoiseFn,
}

impl SdeSpec {
    /// `dx = mu dt + sigma dW`.
    pub fn constant(mu: f64, sigma: f64) -> Self {
        Self { drift: DriftFn::Constant { mu }, noise: NoiseFn::Constant { sigma } }
    }

    /// Constant-coefficient SDE whose density obeys `∂t f = −mu ∂x f + diffusion ∂xx f`.
    pub fn from_fokker_planck(mu: f64, diffusion: f64) -> Self {
        Self::constant(mu, (2.0 * diffusion).sqrt())
    }

    fn validate(&self) -> Result<()> {
        if self.drift.params().iter().chain(&self.noise.params()).any(|p| !p.is_finite()) {
            return Err(Error::arg("SDE parameters must be finite"));
        }
        if let NoiseFn::Constant { sigma } = self.noise {
            if sigma < 0.0 {
                return Err(Error::arg("noise amplitude must be nonnegative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    Point { x0: f64 },
    Normal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPlan {
    pub n_trajectories: usize,
    pub dt: f64,
    pub horizon: f64,
    /// Record every `stride` integration steps.
    pub stride: usize,
    pub initial: InitialCondition,
    pub seed: u64,
    #[serde(default)]
    pub t_start: f64,
}

impl SimPlan {
    fn steps(&self) -> Result<usize> {
        if self.n_trajectories == 0 {
            return Err(Error::arg("n_trajectories must be at least 1"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::arg(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() || !self.t_start.is_finite() {
            return Err(Error::arg("horizon must be positive and finite"));
        }
        if self.stride == 0 {
            return Err(Error::arg("stride must be at least 1"));
        }
        if let InitialCondition::Normal { sd, mean } = self.initial {
            if !(sd >= 0.0) || !mean.is_finite() {
                return Err(Error::arg("initial normal needs finite mean and nonnegative sd"));
            }
        }
        let ratio = self.horizon / self.dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::arg(format!("horizon {} is not a multiple of dt {}", self.horizon, self.dt)));
        }
        let steps = steps as usize;
        if !steps.is_multiple_of(self.stride) {
            return Err(Error::arg(format!("{steps} steps are not divisible by stride {}", self.stride)));
        }
        Ok(steps)
    }

    pub fn record_times(&self) -> Result<Vec<f64>> {
        let steps = self.steps()?;
        Ok((0..=steps / self.stride)
            .map(|k| self.t_start + (k * self.stride) as f64 * self.dt)
            .collect())
    }
}

/// Sample statistics of all standard-normal draws used for increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStats {
    pub count: u64,
    pub mean: f64,
    pub variance: f64,
}

impl NoiseStats {
    /// `|mean| < 4/√N` and variance within 5% of one.
    pub fn is_sane(&self) -> bool {
        self.mean.abs() < 4.0 / (self.count as f64).sqrt() && (self.variance - 1.0).abs() < 0.05
    }
}

fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn simulate(spec: &SdeSpec, plan: &SimPlan) -> Result<TrajectoryEnsemble> {
    simulate_with_stats(spec, plan).map(|(e, _)| e)
}

pub fn simulate_with_stats(spec: &SdeSpec, plan: &SimPlan) -> Result<(TrajectoryEnsemble, NoiseStats)> {
    spec.validate()?;
    let steps = plan.steps()?;
    let times = plan.record_times()?;
    let levels = times.len();
    let n = plan.n_trajectories;
    let sqrt_dt = plan.dt.sqrt();

    let mut traj_major = vec![0.0; n * levels];
    let per_traj: Vec<Result<(f64, f64)>> = traj_major
        .par_chunks_mut(levels)
        .enumerate()
        .map(|(r, out)| {
            let mut rng = trajectory_rng(plan.seed, r);
            let mut x = match plan.initial {
                InitialCondition::Point { x0 } => x0,
                InitialCondition::Normal { mean, sd } => {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mean + sd * z
                }
            };
            out[0] = x;
            let (mut s1, mut s2) = (0.0, 0.0);
            for k in 0..steps {
                let t = plan.t_start + k as f64 * plan.dt;
                let g = spec.noise.eval(x);
                if g < 0.0 {
                    return Err(Error::arg(format!("noise amplitude {g} < 0 at x = {x}, t = {t} (trajectory {r})")));
                }
                let xi: f64 = StandardNormal.sample(&mut rng);
                s1 += xi;
                s2 += xi * xi;
                x += spec.drift.eval(x, t) * plan.dt + g * sqrt_dt * xi;
                if !x.is_finite() {
                    return Err(Error::Diverged { time: t + plan.dt });
                }
                if (k + 1) % plan.stride == 0 {
                    out[(k + 1) / plan.stride] = x;
                }
            }
            Ok((s1, s2))
        })
        .collect();

    let (mut s1, mut s2) = (0.0, 0.0);
    for r in per_traj {
        let (a, b) = r?;
        s1 += a;
        s2 += b;
    }
    let count = (n * steps) as u64;
    let stats = if count > 1 {
        let mean = s1 / count as f64;
        NoiseStats { count, mean, variance: (s2 - count as f64 * mean * mean) / (count - 1) as f64 }
    } else {
        NoiseStats { count, mean: s1, variance: f64::NAN }
    };

    let mut data = vec![0.0; n * levels];
    for r in 0..n {
        for k in 0..levels {
            data[k * n + r] = traj_major[r * levels + k];
        }
    }
    Ok((TrajectoryEnsemble::from_time_major(times, n, data)?, stats))
}

/// KDE density of the ensemble at each requested time.
pub fn ensemble_to_densities(
    ens: &TrajectoryEnsemble,
    grid: &Grid<f64>,
    times: &[f64],
    bandwidth: Bandwidth<f64>,
) -> Result<Vec<DensityField<f64>>> {
    times
        .iter()
        .map(|&t| {
            let k = ens.time_index(t).ok_or(Error::TimeNotSampled(t))?;
            kde_estimate(ens.level(k), grid, bandwidth, ens.times()[k]).map_err(|e| match e {
                Error::ZeroVariance { .. } => Error::ZeroVariance { time: Some(t) },
                e => e,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::moments;
    use crate::km_estimate::moment_series;

    fn plan(n: usize, dt: f64, horizon: f64, stride: usize, seed: u64) -> SimPlan {
        SimPlan { n_trajectories: n, dt, horizon, stride, initial: InitialCondition::Point { x0: 0.0 }, seed, t_start: 0.0 }
    }

    #[test]
    fn deterministic_limit() {
        let ens = simulate(&SdeSpec::constant(1.3, 0.0), &plan(3, 1e-4, 1.0, 100, 1)).unwrap();
        assert_eq!(ens.n_times(), 101);
        for r in 0..3 {
            let last = *ens.trajectory(r).last().unwrap();
            assert!((last - 1.3).abs() <= 1e-9, "{last}");
        }
    }

    #[test]
    fn wiener_variance() {
        let n = 100_000;
        let (ens, stats) = simulate_with_stats(&SdeSpec::constant(0.0, 1.0), &plan(n, 0.01, 1.0, 100, 2)).unwrap();
        let s = moment_series(&ens);
        let v = s.variance[1];
        // SE of the sample variance of a normal: σ²·√(2/(n−1))
        let se = (2.0 / (n - 1) as f64).sqrt();
        assert!((v - 1.0).abs() < 3.0 * se, "{v}");
        assert!(stats.is_sane(), "{stats:?}");
    }

    #[test]
    fn ou_stationary_variance() {
        let n = 20_000;
        let spec = SdeSpec {
            drift: DriftFn::OrnsteinUhlenbeck { theta: 1.0, mean: 0.0 },
            noise: NoiseFn::Constant { sigma: 2f64.sqrt() },
        };
        let ens = simulate(&spec, &plan(n, 1e-3, 8.0, 8000, 3)).unwrap();
        let v = moment_series(&ens).variance[1];
        // exact EM stationary variance differs from 1 by O(dt)
        let se = (2.0 / n as f64).sqrt();
        assert!((v - 1.0).abs() < 4.0 * se + 2e-3, "{v}");
    }

    #[test]
    fn seed_determinism_across_thread_counts() {
        let spec = SdeSpec::constant(0.5, 1.0);
        let p = plan(64, 0.01, 0.5, 5, 77);
        let a = simulate(&spec, &p).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate(&spec, &p).unwrap());
        assert_eq!(a, b);
        let c = simulate(&spec, &SimPlan { seed: 78, ..p }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weak_order_one() {
        // dx = −x dt, x0 = 1: EM mean (1 − dt)^n vs exp(−t); error halves with dt
        let spec = SdeSpec { drift: DriftFn::LinearInX { a: 0.0, b: -1.0 }, noise: NoiseFn::Constant { sigma: 0.3 } };
        let err = |dt: f64| {
            let p = SimPlan { initial: InitialCondition::Point { x0: 1.0 }, ..plan(20_000, dt, 1.0, (1.0 / dt).round() as usize, 4) };
            let m = moment_series(&simulate(&spec, &p).unwrap()).mean[1];
            (m - (-1.0f64).exp()).abs()
        };
        let (e1, e2) = (err(0.1), err(0.05));
        assert!((e1 / e2 - 2.0).abs() < 0.3, "{e1} {e2}");
    }

    #[test]
    fn plan_validation() {
        let spec = SdeSpec::constant(0.0, 1.0);
        assert!(simulate(&spec, &plan(0, 0.1, 1.0, 1, 0)).is_err());
        assert!(simulate(&spec, &plan(1, 0.0, 1.0, 1, 0)).is_err());
        assert!(simulate(&spec, &plan(1, 0.3, 1.0, 1, 0)).is_err());
        assert!(simulate(&spec, &plan(1, 0.1, 1.0, 3, 0)).is_err());
        assert!(simulate(&SdeSpec::constant(f64::NAN, 1.0), &plan(1, 0.1, 1.0, 1, 0)).is_err());
        let neg = SdeSpec { drift: DriftFn::Constant { mu: 0.0 }, noise: NoiseFn::LinearInX { a: -1.0, b: 0.0 } };
        assert!(simulate(&neg, &plan(1, 0.1, 1.0, 1, 0)).is_err());
        let blowup = SdeSpec { drift: DriftFn::LinearInX { a: 0.0, b: 1e300 }, noise: NoiseFn::Constant { sigma: 0.0 } };
        let p = SimPlan { initial: InitialCondition::Point { x0: 1.0 }, ..plan(1, 1.0, 10.0, 1, 0) };
        assert!(matches!(simulate(&blowup, &p), Err(Error::Diverged { .. })));
    }

    #[test]
    fn densities_from_ensemble() {
        let ens = simulate(&SdeSpec::constant(0.0, 1.0), &plan(20_000, 0.01, 1.0, 50, 5)).unwrap();
        let g = Grid::new(-7.0, 7.0, 401).unwrap();
        let ds = ensemble_to_densities(&ens, &g, &[0.5, 1.0], Bandwidth::Auto).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].time(), 0.5);
        assert_eq!(ds[1].time(), 1.0);
        assert!((moments(&ds[1], 2).unwrap().variance - 1.0).abs() < 0.1);
        assert!(matches!(ensemble_to_densities(&ens, &g, &[0.25], Bandwidth::Auto), Err(Error::TimeNotSampled(_))));
        match ensemble_to_densities(&ens, &g, &[0.0], Bandwidth::Auto) {
            Err(Error::ZeroVariance { time: Some(t) }) => assert_eq!(t, 0.0),
            other => panic!("{other:?}"),
        }
    }
}
