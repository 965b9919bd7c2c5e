#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use tapsphere::model::{self, Instance, ModelConfig};

pub fn instance(p: usize, n: usize, delta: f64, seed: u64) -> Instance {
    model::generate_instance(&ModelConfig::new(p, n, delta, seed).unwrap()).unwrap()
}

pub fn zero_instance(p: usize, n: usize, delta: f64) -> Instance {
    let cfg = ModelConfig::new(p, n, delta, 0).unwrap();
    let beta0 = instance(p, n, delta, 0).beta0;
    Instance::from_parts(cfg, DMatrix::zeros(n, p), beta0, DVector::zeros(n)).unwrap()
}

/// Instance with `X = 0` and the given response.
pub fn zero_design_with_y(p: usize, y: DVector<f64>, delta: f64) -> Instance {
    let n = y.len();
    let cfg = ModelConfig::new(p, n, delta, 0).unwrap();
    let beta0 = instance(p, n, delta, 0).beta0;
    Instance::from_parts(cfg, DMatrix::zeros(n, p), beta0, y).unwrap()
}

/// Haar-random orthogonal matrix via QR with sign correction.
pub fn random_orthogonal<R: Rng>(p: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn rotate(inst: &Instance, q: &DMatrix<f64>) -> Instance {
    let x = &inst.x * q.transpose();
    let beta0 = q * &inst.beta0;
    Instance::from_parts(inst.config, x, beta0, inst.eps.clone()).unwrap()
}

/// One-sample Kolmogorov–Smirnov statistic.
pub fn ks_one(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_crit_one(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

pub fn ks_crit_two(n: usize, m: usize) -> f64 {
    1.628 * ((n + m) as f64 / (n * m) as f64).sqrt()
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
