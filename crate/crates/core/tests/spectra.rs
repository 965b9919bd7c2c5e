mod common;

use common::{instance, ks_one, median};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tapsphere::model::ModelConfig;
use tapsphere::spectra::{
    good_set_check, interlacing_check, ks_distance, levy_check, mp_diagnostics, singular_bound_frequency, MarchenkoPastur,
};

fn basis(p: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(p);
    e[i] = 1.0;
    e
}

fn gaussian(p: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(p, |_, _| rng.sample(StandardNormal))
}

/// `∫ x^k dF` via `∫ k x^{k-1} (1 - F(x)) dx` on a fine midpoint grid.
fn mp_moment(mp: &MarchenkoPastur, k: i32) -> f64 {
    let m = 20_000;
    let h = mp.upper / m as f64;
    (0..m)
        .map(|i| {
            let x = (i as f64 + 0.5) * h;
            k as f64 * x.powi(k - 1) * (1.0 - mp.cdf(x).unwrap()) * h
        })
        .sum()
}

#[test]
fn mp_cdf_reproduces_moments() {
    // first two moments of MP with variance-1/n entries: 1 and 1 + p/n
    for (p, n) in [(100usize, 400usize), (100, 200), (300, 200)] {
        let mp = MarchenkoPastur::new(p, n);
        let g = p as f64 / n as f64;
        assert!((mp_moment(&mp, 1) - 1.0).abs() < 1e-3, "{p} {n}");
        assert!((mp_moment(&mp, 2) - (1.0 + g)).abs() < 1e-3, "{p} {n}");
    }
}

#[test]
fn eigenvalues_sum_to_trace() {
    for seed in 0..5 {
        let inst = instance(60, 90, 10.0, seed);
        let rep = mp_diagnostics(&inst).unwrap();
        let trace: f64 = inst.x.iter().map(|v| v * v).sum();
        let sum: f64 = rep.eigvals.iter().sum();
        assert!((sum - trace).abs() <= 1e-8 * trace);
        assert!(rep.eigvals.windows(2).all(|w| w[0] <= w[1]));
        assert!(rep.eigvals[0] >= -1e-10);
        assert!((rep.sigma_max - rep.eigvals[59].sqrt()).abs() < 1e-12);
    }
}

#[test]
fn wide_design_has_rank_deficiency() {
    let rep = mp_diagnostics(&instance(400, 200, 10.0, 3)).unwrap();
    assert_eq!(rep.zero_eigenvalues, 200);
    assert!(rep.eigvals[..200].iter().all(|v| v.abs() < 1e-8));
    assert!(rep.eigvals[200] > 1e-3);
    assert!(rep.mp_ks_distance < 0.1);
}

#[test]
fn ks_distance_matches_direct_statistic() {
    let rep = mp_diagnostics(&instance(150, 300, 10.0, 1)).unwrap();
    let mp = MarchenkoPastur::new(150, 300);
    let direct = ks_one(rep.eigvals.clone(), |x| mp.cdf(x).unwrap());
    assert!((direct - rep.mp_ks_distance).abs() < 1e-12);
    assert!((ks_distance(&rep.eigvals, &mp).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn mp_fit_at_desk_scale() {
    for seed in 0..3 {
        let rep = mp_diagnostics(&instance(400, 800, 10.0, seed)).unwrap();
        assert!(rep.mp_ks_distance < 0.05, "seed {seed}: {}", rep.mp_ks_distance);
    }
}

#[test]
fn quantile_deviation_shrinks() {
    let med: Vec<f64> = [100usize, 800]
        .iter()
        .map(|&p| {
            let mut d: Vec<f64> = (0..10).map(|s| mp_diagnostics(&instance(p, 2 * p, 10.0, s)).unwrap().quantile_deviation).collect();
            median(&mut d)
        })
        .collect();
    assert!(med[1] < med[0], "{med:?}");
}

#[test]
fn spectral_edge_approaches_mp() {
    let med: Vec<f64> = [100usize, 200, 400, 800]
        .iter()
        .map(|&p| {
            let edge = (1.0 + 0.5f64.sqrt()).powi(2);
            let mut d: Vec<f64> =
                (0..10).map(|s| (mp_diagnostics(&instance(p, 2 * p, 10.0, s)).unwrap().sigma_max.powi(2) - edge).abs()).collect();
            median(&mut d)
        })
        .collect();
    assert!(med.windows(2).all(|w| w[1] < w[0]), "{med:?}");
}

#[test]
fn singular_value_bounds_hold() {
    let cfg = ModelConfig::new(100, 200, 10.0, 7).unwrap();
    let rep = singular_bound_frequency(&cfg, 3.0, 500).unwrap();
    assert!((rep.bound - (1.0 - 2.0 * (-4.5f64).exp())).abs() < 1e-15);
    assert!(rep.frequency >= 0.98, "{}", rep.frequency);
    assert!(rep.frequency >= rep.bound - rep.slack);
    assert!(rep.frequency_min >= rep.bound - rep.slack, "{}", rep.frequency_min);
    let vacuous = singular_bound_frequency(&cfg, 0.0, 100).unwrap();
    assert!(vacuous.bound <= 0.0);
    assert!(singular_bound_frequency(&cfg, 3.0, 99).is_err());
}

#[test]
fn interlacing_on_minors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..20 {
        let p = 40 + 5 * (seed as usize % 4);
        let inst = instance(p, 2 * p, 10.0, seed);
        let i = rng.random_range(0..p);
        let j = (i + 1 + rng.random_range(0..p - 1)) % p;
        let principal = interlacing_check(&inst, &basis(p, i), &basis(p, j)).unwrap();
        assert!(principal.max_violation <= 1e-10, "{}", principal.max_violation);
        let random = interlacing_check(&inst, &gaussian(p, &mut rng), &gaussian(p, &mut rng)).unwrap();
        assert!(random.holds && random.max_violation <= 1e-9);
        assert!(random.max_gap < random.spread);
    }
}

#[test]
fn degenerate_span_is_rejected() {
    let inst = instance(30, 60, 10.0, 0);
    let u = basis(30, 4);
    assert!(interlacing_check(&inst, &u, &(2.0 * &u)).is_err());
}

#[test]
fn interlacing_gap_shrinks_with_dimension() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let med: Vec<f64> = [100usize, 200, 400]
        .iter()
        .map(|&p| {
            let mut g: Vec<f64> = (0..10)
                .map(|s| {
                    let inst = instance(p, 2 * p, 10.0, s);
                    interlacing_check(&inst, &gaussian(p, &mut rng), &gaussian(p, &mut rng)).unwrap().max_gap
                })
                .collect();
            median(&mut g)
        })
        .collect();
    assert!(med.windows(2).all(|w| w[1] < w[0]), "{med:?}");
}

#[test]
fn levy_concentration() {
    let rep = levy_check(100, 0.5, 10_000, 0).unwrap();
    assert!((rep.bound - (std::f64::consts::PI - 6.25).exp()).abs() < 1e-15);
    assert!(rep.pass && rep.frequency <= rep.bound);
    // a t small enough that deviations are common still respects the bound
    let loose = levy_check(100, 0.02, 10_000, 1).unwrap();
    assert!(loose.frequency > 0.5 && loose.pass);
}

#[test]
fn good_set_membership() {
    let hits = (0..200).filter(|&s| good_set_check(&instance(200, 400, 10.0, s), 100.0)).count();
    assert!(hits >= 198, "{hits}");
    assert!(!good_set_check(&instance(200, 400, 10.0, 0), 1e-4));
    assert!(good_set_check(&common::zero_instance(50, 100, 10.0), 100.0));
}
