use fprom_core::analytic::Family;
use fprom_core::coefficients::CoefficientModel;
use fprom_core::density::{l1_distance, moments};
use fprom_core::fpe_solver::{solve, step_rhs, Boundary, Integrator, SolverConfig};
use fprom_core::grid::{DerivativeMatrix, Grid};

const F3: Family<f64> = Family::F3 { drift: 1.0, diffusion: 0.5 };

#[test]
fn integrators_agree_at_matched_dt() {
    let g = Grid::new(-10.0, 20.0, 1025).unwrap();
    let f0 = F3.density(&g, 1.0).unwrap();
    let model = CoefficientModel::constant(1.0, 0.5);
    let run = |i| solve(&f0, &model, &SolverConfig::new(i, 5e-4, vec![2.0])).unwrap();
    let (rk4, cn) = (run(Integrator::ExplicitRk4), run(Integrator::CrankNicolson));
    let d = l1_distance(rk4.last().unwrap(), cn.last().unwrap()).unwrap();
    assert!(d <= 1e-3, "{d}");
}

#[test]
fn per_step_mass_drift_is_negligible_with_zero_flux() {
    let g = Grid::new(-10.0, 20.0, 513).unwrap();
    let f0 = F3.density(&g, 1.0).unwrap();
    let times: Vec<f64> = (1..=10).map(|k| 1.0 + 0.1 * k as f64).collect();
    for integrator in [Integrator::CrankNicolson, Integrator::ExplicitRk4] {
        let trace = solve(&f0, &CoefficientModel::constant(1.0, 0.5), &SolverConfig::new(integrator, 5e-4, times.clone())).unwrap();
        let mut prev = f0.mass();
        for &m in &trace.mass_log {
            assert!((m - prev).abs() <= 1e-8, "{integrator:?}: {m} after {prev}");
            prev = m;
        }
    }
}

#[test]
fn rhs_error_is_second_order_in_h() {
    // ∂t f1 = D ∂xx f1 at interior nodes
    let d = 0.5;
    let fam = Family::F1 { diffusion: d };
    let err = |n: usize| {
        let g: Grid<f64> = Grid::new(-8.0, 8.0, n).unwrap();
        let f = fam.density(&g, 1.0).unwrap();
        let e1 = DerivativeMatrix::new(&g, 1, 2).unwrap();
        let e2 = DerivativeMatrix::new(&g, 2, 2).unwrap();
        let rhs = step_rhs(&f, &CoefficientModel::constant(0.0, d), 1.0, &e1, &e2).unwrap();
        let s2 = 2.0 * d;
        (1..n - 1)
            .map(|i| {
                let x = g.node(i);
                let exact = f.values()[i] * (x * x / (s2 * s2) - 1.0 / s2) * d;
                (rhs[i] - exact).abs()
            })
            .fold(0.0, f64::max)
    };
    let ratio = err(101) / err(201);
    assert!(ratio > 3.5, "{ratio}");
}

#[test]
fn time_dependent_coefficients_follow_moment_dynamics() {
    // D1(t) = 0.5 + t, D2(t) = 0.2 + 0.1 t: mean and variance follow the integrals
    let g = Grid::new(-10.0, 20.0, 1025).unwrap();
    let f0 = F3.density(&g, 1.0).unwrap();
    let model = CoefficientModel::new(vec![0.5, 1.0], vec![0.2, 0.1]).unwrap();
    let trace = solve(&f0, &model, &SolverConfig::new(Integrator::CrankNicolson, 1e-3, vec![2.0])).unwrap();
    let (m0, m1) = (moments(&f0, 2).unwrap(), moments(trace.last().unwrap(), 2).unwrap());
    let mean_gain = 0.5 + 0.5 * (4.0 - 1.0);
    let var_gain = 2.0 * (0.2 + 0.05 * (4.0 - 1.0));
    assert!((m1.mean - m0.mean - mean_gain).abs() < 1e-3);
    assert!((m1.variance - m0.variance - var_gain).abs() < 1e-3);
}

#[test]
fn dirichlet_and_zero_flux_agree_when_edges_are_empty() {
    let g = Grid::new(-10.0, 20.0, 513).unwrap();
    let f0 = F3.density(&g, 1.0).unwrap();
    let model = CoefficientModel::constant(1.0, 0.5);
    let mut cfg = SolverConfig::new(Integrator::CrankNicolson, 1e-3, vec![2.0]);
    let a = solve(&f0, &model, &cfg).unwrap();
    cfg.boundary = Boundary::ZeroDirichlet;
    let b = solve(&f0, &model, &cfg).unwrap();
    assert!(l1_distance(a.last().unwrap(), b.last().unwrap()).unwrap() < 1e-8);
}
