//! Spectral diagnostics of the design `X`.
//!
//! Conventions: entries of `X` have variance `1/n`, so the eigenvalues of
//! `XᵀX` are `O(1)`. With `γ = p/n` the Marchenko–Pastur law has support
//! `[(1-√γ)², (1+√γ)²]`, density `√((b-x)(x-a)) / (2πγx)` and, when
//! `p > n`, an atom of mass `1 - n/p` at zero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Result};
use crate::linalg;
use crate::model::{self, Instance, ModelConfig};
use crate::quad;
use crate::rng;

/// Eigenvalues below this count as exact zeros.
pub const ZERO_EIGENVALUE: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub p: usize,
    pub n: usize,
    /// Eigenvalues of `XᵀX`, ascending.
    pub eigvals: Vec<f64>,
    pub sigma_max: f64,
    pub mp_ks_distance: f64,
    /// `max_i |θ^i - θ_{i/p}|` against the MP quantiles.
    pub quantile_deviation: f64,
    pub zero_eigenvalues: usize,
    /// Good-set membership at `κ = 100`.
    pub in_good_set: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct MarchenkoPastur {
    pub gamma: f64,
    pub lower: f64,
    pub upper: f64,
    pub atom: f64,
}

impl MarchenkoPastur {
    pub fn new(p: usize, n: usize) -> Self {
        let gamma = p as f64 / n as f64;
        let r = gamma.sqrt();
        MarchenkoPastur { gamma, lower: (1.0 - r).powi(2), upper: (1.0 + r).powi(2), atom: (1.0 - 1.0 / gamma).max(0.0) }
    }

    /// Density of the continuous part.
    pub fn density(&self, x: f64) -> f64 {
        if x <= self.lower || x >= self.upper || x <= 0.0 {
            return 0.0;
        }
        ((self.upper - x) * (x - self.lower)).sqrt() / (2.0 * std::f64::consts::PI * self.gamma * x)
    }

    fn theta_of(&self, x: f64) -> f64 {
        let u = (2.0 * (x - self.lower) / (self.upper - self.lower) - 1.0).clamp(-1.0, 1.0);
        (-u).acos()
    }

    /// `F(x)`. The continuous part is integrated in `x = a + (b-a)(1 - cos θ)/2`,
    /// which removes the square-root endpoint behavior.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        if x < 0.0 {
            return Ok(0.0);
        }
        if x <= self.lower {
            return Ok(self.atom);
        }
        if x >= self.upper {
            return Ok(1.0);
        }
        let half = 0.5 * (self.upper - self.lower);
        let th = self.theta_of(x);
        let f = |t: f64| {
            let s = t.sin();
            let xx = self.lower + half * (1.0 - t.cos());
            half * half * s * s / (2.0 * std::f64::consts::PI * self.gamma * xx)
        };
        Ok(self.atom + quad::integrate(f, 0.0, th, 1e-12, 1e-10)?)
    }

    /// Smallest `x` with `F(x) ≥ q`.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if q <= self.atom {
            return Ok(0.0);
        }
        if q >= 1.0 {
            return Ok(self.upper);
        }
        let (mut lo, mut hi) = (self.lower, self.upper);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid)? < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// KS distance between the empirical law of `eigvals` (ascending) and `mp`.
pub fn ks_distance(eigvals: &[f64], mp: &MarchenkoPastur) -> Result<f64> {
    let p = eigvals.len() as f64;
    let vals: Vec<f64> = eigvals.iter().map(|&v| if v.abs() < ZERO_EIGENVALUE { 0.0 } else { v }).collect();
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < vals.len() {
        let v = vals[i];
        let mut j = i;
        while j < vals.len() && vals[j] == v {
            j += 1;
        }
        let f = mp.cdf(v)?;
        let f_left = if v == 0.0 { f - mp.atom } else { f };
        d = d.max((j as f64 / p - f).abs()).max((i as f64 / p - f_left).abs());
        i = j;
    }
    Ok(d)
}

fn spectrum(x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (vals, _) = linalg::sym_eigen(&(x.transpose() * x))?;
    Ok(vals.iter().copied().collect())
}

pub fn mp_diagnostics(instance: &Instance) -> Result<SpectrumReport> {
    let (p, n) = (instance.p(), instance.n());
    let eigvals = spectrum(&instance.x)?;
    if eigvals[0] < -1e-10 * eigvals[p - 1].max(1.0) {
        return Err(numerical(format!("XᵀX has a negative eigenvalue {:.3e}", eigvals[0])));
    }
    let mp = MarchenkoPastur::new(p, n);
    let mp_ks_distance = ks_distance(&eigvals, &mp)?;
    let mut quantile_deviation: f64 = 0.0;
    for (i, v) in eigvals.iter().enumerate() {
        quantile_deviation = quantile_deviation.max((v - mp.quantile((i + 1) as f64 / p as f64)?).abs());
    }
    Ok(SpectrumReport {
        p,
        n,
        sigma_max: eigvals[p - 1].max(0.0).sqrt(),
        zero_eigenvalues: eigvals.iter().filter(|v| v.abs() < ZERO_EIGENVALUE).count(),
        mp_ks_distance,
        quantile_deviation,
        in_good_set: good_set_check(instance, 100.0),
        eigvals,
    })
}

/// Histogram of the spectrum against the MP mass per bin; rows are
/// `(bin_left, bin_right, empirical_mass, mp_mass)`.
pub fn mp_histogram(report: &SpectrumReport, bins: usize) -> Result<Vec<(f64, f64, f64, f64)>> {
    if bins == 0 {
        return Err(invalid("need at least one bin"));
    }
    let mp = MarchenkoPastur::new(report.p, report.n);
    let hi = mp.upper.max(*report.eigvals.last().unwrap_or(&0.0)) * 1.02;
    let w = hi / bins as f64;
    let pf = report.p as f64;
    let mut prev = mp.cdf(-1.0)?;
    (0..bins)
        .map(|b| {
            let (l, r) = (b as f64 * w, (b + 1) as f64 * w);
            let in_bin = report.eigvals.iter().filter(|&&v| (b == 0 && v < r) || (v >= l && v < r)).count();
            let c = mp.cdf(r)?;
            let row = (l, r, in_bin as f64 / pf, c - prev);
            prev = c;
            Ok(row)
        })
        .collect()
}

/// `σ_max(X) < 1 + α^{-1/2} + κ` and `‖ε‖ < κ√(pΔ)`.
pub fn good_set_check(instance: &Instance, kappa: f64) -> bool {
    let p = instance.p() as f64;
    let sigma_max = match spectrum(&instance.x) {
        Ok(v) => v.last().copied().unwrap_or(0.0).max(0.0).sqrt(),
        Err(_) => return false,
    };
    sigma_max < 1.0 + instance.alpha().powf(-0.5) + kappa && instance.eps.norm() < kappa * (p * instance.config.delta).sqrt()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SingularBoundReport {
    pub p: usize,
    pub n: usize,
    pub t: f64,
    pub trials: usize,
    /// Frequency of `σ_max(X) ≤ (√n + √p + t)/√n`.
    pub frequency: f64,
    /// Frequency of `σ_min(X) ≥ (√n - √p - t)/√n`.
    pub frequency_min: f64,
    /// `1 - 2 exp(-t²/2)`.
    pub bound: f64,
    /// `3` binomial standard errors at the bound.
    pub slack: f64,
}

fn design(config: &ModelConfig, trial: usize) -> DMatrix<f64> {
    let sd = (1.0 / config.n as f64).sqrt();
    let mut r = rng::stream(config.seed, &[rng::label("spectra.design"), trial as u64]);
    DMatrix::from_fn(config.n, config.p, |_, _| sd * r.sample::<f64, _>(StandardNormal))
}

pub fn singular_bound_frequency(config: &ModelConfig, t: f64, trials: usize) -> Result<SingularBoundReport> {
    config.validate()?;
    if trials < 100 {
        return Err(invalid(format!("need at least 100 trials, got {trials}")));
    }
    let (pf, nf) = (config.p as f64, config.n as f64);
    let upper = (nf.sqrt() + pf.sqrt() + t) / nf.sqrt();
    let lower = (nf.sqrt() - pf.sqrt() - t) / nf.sqrt();
    let hits: Vec<(bool, bool)> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let x = design(config, k);
            let ev = (x.transpose() * &x).symmetric_eigenvalues();
            let smax = ev.max().max(0.0).sqrt();
            // σ_min of the n × p design is zero when p > n
            let smin = if config.p > config.n { 0.0 } else { ev.min().max(0.0).sqrt() };
            (smax <= upper, smin >= lower)
        })
        .collect();
    let tf = trials as f64;
    let bound = 1.0 - 2.0 * (-t * t / 2.0).exp();
    let b = bound.clamp(0.0, 1.0);
    Ok(SingularBoundReport {
        p: config.p,
        n: config.n,
        t,
        trials,
        frequency: hits.iter().filter(|h| h.0).count() as f64 / tf,
        frequency_min: hits.iter().filter(|h| h.1).count() as f64 / tf,
        bound,
        slack: 3.0 * (b * (1.0 - b) / tf).sqrt(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterlacingReport {
    /// `max_i |s_i - λ_i|`, minor eigenvalue against the full one of the same index.
    pub max_gap: f64,
    /// Largest violation of `λ_i ≤ s_i ≤ λ_{i+2}` (zero when they hold).
    pub max_violation: f64,
    pub holds: bool,
    pub spread: f64,
}

/// Cauchy interlacing for the compression of `XᵀX` to `Span(u, v)^⊥`.
pub fn interlacing_check(instance: &Instance, u: &DVector<f64>, v: &DVector<f64>) -> Result<InterlacingReport> {
    let gram = instance.x.transpose() * &instance.x;
    let basis = linalg::orthonormalize(&[u, v], &["u", "v"])?;
    let minor = linalg::compress_to_complement(&gram, &basis);
    let (full, _) = linalg::sym_eigen(&gram)?;
    let (sub, _) = linalg::sym_eigen(&minor)?;
    let mut max_gap: f64 = 0.0;
    let mut max_violation: f64 = 0.0;
    for i in 0..sub.len() {
        max_gap = max_gap.max((sub[i] - full[i]).abs());
        max_violation = max_violation.max(full[i] - sub[i]).max(sub[i] - full[i + 2]);
    }
    let spread = full[full.len() - 1] - full[0];
    Ok(InterlacingReport { max_gap, max_violation, holds: max_violation <= 1e-9, spread })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevyReport {
    pub p: usize,
    pub t: f64,
    pub draws: usize,
    /// Lipschitz constant of the coordinate mean on the unit sphere.
    pub lipschitz: f64,
    pub frequency: f64,
    /// `exp(π - p t²/4)`.
    pub bound: f64,
    pub pass: bool,
}

/// Deviation frequency of the coordinate mean of uniform points on
/// `S^{p-1}(1)` beyond `L·t`, `L = 1/√p`.
pub fn levy_check(p: usize, t: f64, draws: usize, seed: u64) -> Result<LevyReport> {
    if p < 2 || draws == 0 {
        return Err(invalid("levy check needs p ≥ 2 and at least one draw"));
    }
    let lipschitz = 1.0 / (p as f64).sqrt();
    let mut r = rng::stream(seed, &[rng::label("spectra.levy")]);
    let mut hits = 0;
    for _ in 0..draws {
        let s = model::sample_uniform_sphere(p, 1.0, &mut r);
        // E f = 0 by symmetry
        if (s.sum() / p as f64).abs() >= lipschitz * t {
            hits += 1;
        }
    }
    let frequency = hits as f64 / draws as f64;
    let bound = (std::f64::consts::PI - p as f64 * t * t / 4.0).exp();
    Ok(LevyReport { p, t, draws, lipschitz, frequency, bound, pass: frequency <= bound })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mp_cdf_is_normalized() {
        for (p, n) in [(100usize, 200usize), (400, 200), (50, 50)] {
            let mp = MarchenkoPastur::new(p, n);
            assert!((mp.cdf(mp.upper - 1e-12).unwrap() - 1.0).abs() < 1e-6);
            let mass = quad::integrate(|x| mp.density(x), mp.lower, mp.upper, 1e-12, 1e-10).unwrap();
            assert!((mass + mp.atom - 1.0).abs() < 1e-6, "{p} {n} {mass}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let mp = MarchenkoPastur::new(100, 300);
        for q in [0.1, 0.5, 0.9] {
            let x = mp.quantile(q).unwrap();
            assert!((mp.cdf(x).unwrap() - q).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_design_is_in_good_set() {
        let cfg = ModelConfig::new(10, 20, 1.0, 0).unwrap();
        let b = model::generate_instance(&cfg).unwrap();
        let z = Instance::from_parts(cfg, DMatrix::zeros(20, 10), b.beta0.clone(), DVector::zeros(20)).unwrap();
        assert!(good_set_check(&z, 100.0));
        assert!(!good_set_check(&b, 1e-4));
    }

    #[test]
    fn principal_minor_interlaces() {
        let i = model::generate_instance(&ModelConfig::new(30, 60, 1.0, 2).unwrap()).unwrap();
        let e = |k: usize| DVector::from_fn(30, |j, _| if j == k { 1.0 } else { 0.0 });
        let r = interlacing_check(&i, &e(0), &e(1)).unwrap();
        assert!(r.holds && r.max_violation <= 1e-10);
        assert!(interlacing_check(&i, &e(0), &(e(0) * 2.0)).is_err());
    }
}
