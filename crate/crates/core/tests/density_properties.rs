use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fprom_core::density::{
    kde_estimate, kl_divergence, l1_distance, tikhonov_smooth, tikhonov_solve, Bandwidth, DensityField,
};
use fprom_core::grid::{DerivativeMatrix, Grid};

fn grid() -> Grid<f64> {
    Grid::new(-6.0, 6.0, 241).unwrap()
}

fn standard_normal(g: Grid<f64>) -> DensityField<f64> {
    DensityField::from_fn(g, 0.0, |x: f64| (-0.5 * x * x).exp()).unwrap()
}

fn roughness(e: &DerivativeMatrix<f64>, v: &[f64]) -> f64 {
    e.apply(v).iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smoothing_never_increases_roughness(
        values in proptest::collection::vec(0.0f64..1.0, 64),
        log_lambda in -10.0f64..0.0,
        degree in 1usize..=3,
    ) {
        let g = Grid::new(0.0, 1.0, 64).unwrap();
        let e = DerivativeMatrix::new(&g, degree, 2).unwrap();
        let smoothed = tikhonov_solve(&values, 10f64.powf(log_lambda), &e).unwrap();
        prop_assert!(roughness(&e, &smoothed) <= roughness(&e, &values) * (1.0 + 1e-12));
    }

    #[test]
    fn kl_nonnegative_and_zero_only_on_equal(
        a in proptest::collection::vec(0.01f64..1.0, 32),
        b in proptest::collection::vec(0.01f64..1.0, 32),
    ) {
        let g = Grid::new(0.0, 1.0, 32).unwrap();
        let p = DensityField::from_raw(g, a, 0.0).unwrap();
        let q = DensityField::from_raw(g, b, 0.0).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-10);
        if l1_distance(&p, &q).unwrap() > 1e-6 {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn smoothing_preserves_mass(
        values in proptest::collection::vec(0.0f64..1.0, 48),
        log_lambda in -9.0f64..-1.0,
    ) {
        prop_assume!(values.iter().any(|&v| v > 1e-3));
        let g = Grid::new(-1.0, 1.0, 48).unwrap();
        let f = DensityField::from_raw(g, values, 0.0).unwrap();
        let s = tikhonov_smooth(&f, 10f64.powf(log_lambda), 2).unwrap();
        prop_assert!((s.mass() - 1.0).abs() <= 1e-6);
        prop_assert!(s.values().iter().all(|&v| v >= 0.0));
    }
}

fn kde_of_200(seed: u64, bw: Bandwidth<f64>) -> DensityField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
    kde_estimate(&samples, &grid(), bw, 0.0).unwrap()
}

#[test]
fn smoothing_a_noisy_kde_does_not_move_it_away_from_the_truth() {
    // bandwidth below the grid spacing, so the estimate is rough at grid scale
    let truth = standard_normal(grid());
    let kde = kde_of_200(200, Bandwidth::Fixed(0.01));
    let smoothed = tikhonov_smooth(&kde, 1e-6, 2).unwrap();
    let before = kl_divergence(&truth, &kde).unwrap();
    let after = kl_divergence(&truth, &smoothed).unwrap();
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn smoothing_a_normal_reference_kde_barely_changes_it() {
    // already smooth at the scale λ acts on; the change stays far below the sampling error
    let truth = standard_normal(grid());
    let kde = kde_of_200(200, Bandwidth::Auto);
    let smoothed = tikhonov_smooth(&kde, 1e-6, 2).unwrap();
    let before = kl_divergence(&truth, &kde).unwrap();
    let after = kl_divergence(&truth, &smoothed).unwrap();
    assert!((after - before).abs() <= 1e-3 * before, "{after} vs {before}");
}

#[test]
fn smoothing_identity_limit() {
    let f = standard_normal(grid());
    let s = tikhonov_smooth(&f, 1e-15, 2).unwrap();
    let err = s.values().iter().zip(f.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn kde_from_normal_samples_converges() {
    let g = grid();
    let truth = standard_normal(g);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<f64> = (0..50_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let kde = kde_estimate(&samples, &g, Bandwidth::Auto, 0.0).unwrap();
    assert!(kl_divergence(&truth, &kde).unwrap() < 5e-3);
}


