//! Problem instances for Bayesian linear regression with a uniform prior on
//! the sphere of radius `√p`, plus the Gaussian side channel used by the
//! perturbed model.
//!
//! Data model: `y = X β₀ + ε` with `X` an `n × p` matrix of i.i.d. `N(0, 1/n)`
//! entries, `β₀` uniform on `S^{p-1}(√p)` and `ε ~ N(0, Δ I_n)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::rng::{self, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub p: usize,
    pub n: usize,
    pub delta: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(p: usize, n: usize, delta: f64, seed: u64) -> Result<Self> {
        let cfg = ModelConfig { p, n, delta, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config with `n = round(α p)` (at least 1).
    pub fn from_alpha(p: usize, alpha: f64, delta: f64, seed: u64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(invalid(format!("alpha must be positive, got {alpha}")));
        }
        let n = ((alpha * p as f64).round() as usize).max(1);
        Self::new(p, n, delta, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 3 {
            return Err(invalid(format!("p must be at least 3, got {}", self.p)));
        }
        if self.n < 1 {
            return Err(invalid("n must be at least 1"));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(invalid(format!("delta must be positive and finite, got {}", self.delta)));
        }
        Ok(())
    }

    /// Aspect ratio `α = n / p`.
    pub fn alpha(&self) -> f64 {
        self.n as f64 / self.p as f64
    }
}

/// One draw of the disorder `(X, β₀, ε)` and the observations `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub config: ModelConfig,
    pub x: DMatrix<f64>,
    pub beta0: DVector<f64>,
    pub eps: DVector<f64>,
    pub y: DVector<f64>,
}

impl Instance {
    /// Assemble an instance from explicit parts; `y` is computed as `X β₀ + ε`.
    /// Only shapes are checked, so hand-built (e.g. misspecified) instances are
    /// allowed.
    pub fn from_parts(config: ModelConfig, x: DMatrix<f64>, beta0: DVector<f64>, eps: DVector<f64>) -> Result<Self> {
        config.validate()?;
        let (n, p) = (config.n, config.p);
        if x.shape() != (n, p) {
            return Err(invalid(format!("X has shape {:?}, expected ({n}, {p})", x.shape())));
        }
        if beta0.len() != p || eps.len() != n {
            return Err(invalid("beta0 must have length p and eps length n"));
        }
        let y = &x * &beta0 + &eps;
        Ok(Instance { config, x, beta0, eps, y })
    }

    pub fn p(&self) -> usize {
        self.config.p
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha()
    }

    /// Largest entry of `|y - (Xβ₀ + ε)|`; zero for every constructed instance.
    pub fn check_consistency(&self) -> f64 {
        (&self.y - (&self.x * &self.beta0 + &self.eps)).amax()
    }
}

/// Uniform draw on the sphere of the given radius in `R^p`: a normalized
/// standard Gaussian vector.
pub fn sample_uniform_sphere<R: Rng + ?Sized>(p: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    assert!(p >= 1 && radius > 0.0, "sample_uniform_sphere needs p ≥ 1 and radius > 0");
    loop {
        let g = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 0.0 && norm.is_finite() {
            return g * (radius / norm);
        }
    }
}

/// Sample a fresh instance. `X`, `β₀` and `ε` come from separate streams of
/// `config.seed`, so the draw is fully determined by the config.
pub fn generate_instance(config: &ModelConfig) -> Result<Instance> {
    config.validate()?;
    let (n, p) = (config.n, config.p);
    let sd = (1.0 / n as f64).sqrt();
    let mut rx = rng::stream(config.seed, &[rng::label("model.x")]);
    let mut rb = rng::stream(config.seed, &[rng::label("model.beta0")]);
    let mut re = rng::stream(config.seed, &[rng::label("model.eps")]);
    let x = DMatrix::from_fn(n, p, |_, _| sd * rx.sample::<f64, _>(StandardNormal));
    let beta0 = sample_uniform_sphere(p, (p as f64).sqrt(), &mut rb);
    let noise_sd = config.delta.sqrt();
    let eps = DVector::from_fn(n, |_, _| noise_sd * re.sample::<f64, _>(StandardNormal));
    Instance::from_parts(*config, x, beta0, eps)
}

/// Density of the normalized projection of a uniform point of `S^{p-1}(√p)`
/// onto a `k`-dimensional subspace.
///
/// * `k = 1`: density of the signed coordinate `β₁/√p` on `(-1, 1)`,
///   `Γ(p/2) / (√π Γ((p-1)/2)) (1 - x²)^{(p-3)/2}`.
/// * `k ≥ 2`: density of the projection length `‖P β‖/√p` on `[0, 1)`; its
///   square is `Beta(k/2, (p-k)/2)`. Zero for negative `x`.
pub fn projection_density(x: f64, p: usize, k: usize) -> Result<f64> {
    if !(x.abs() < 1.0) {
        return Err(Error::Domain(format!("projection density needs |x| < 1, got {x}")));
    }
    if k < 1 || p <= k {
        return Err(invalid(format!("projection density needs p > k ≥ 1, got p = {p}, k = {k}")));
    }
    Ok(log_projection_density(x, p, k).exp())
}

/// `ln` of [`projection_density`]; `-∞` where the density vanishes.
pub fn log_projection_density(x: f64, p: usize, k: usize) -> f64 {
    let (pf, kf) = (p as f64, k as f64);
    let tail = 0.5 * (pf - kf - 2.0) * (1.0 - x * x).ln();
    let tail = if pf - kf - 2.0 == 0.0 { 0.0 } else { tail };
    if k == 1 {
        ln_gamma(pf / 2.0) - ln_gamma((pf - 1.0) / 2.0) - 0.5 * std::f64::consts::PI.ln() + tail
    } else {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let log_beta = ln_gamma(kf / 2.0) + ln_gamma((pf - kf) / 2.0) - ln_gamma(pf / 2.0);
        std::f64::consts::LN_2 + (kf - 1.0) * x.ln() + tail - log_beta
    }
}

/// `H(β) = ‖y - Xβ‖² / (2Δ)`.
pub fn hamiltonian(instance: &Instance, delta: f64, beta: &DVector<f64>) -> f64 {
    let r = &instance.y - &instance.x * beta;
    r.norm_squared() / (2.0 * delta)
}

/// Perturbation schedule `ε_p = p^{-1/4}`.
pub fn eps_schedule(p: usize) -> f64 {
    (p as f64).powf(-0.25)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub lambda0: f64,
    pub eps_p: f64,
    pub seed: u64,
}

impl PerturbationConfig {
    pub fn new(lambda0: f64, eps_p: f64, seed: u64) -> Result<Self> {
        if !(0.5..=1.0).contains(&lambda0) {
            return Err(invalid(format!("lambda0 must lie in [1/2, 1], got {lambda0}")));
        }
        if !(eps_p > 0.0 && eps_p < 1.0) {
            return Err(invalid(format!("eps_p must lie in (0, 1), got {eps_p}")));
        }
        Ok(PerturbationConfig { lambda0, eps_p, seed })
    }

    /// Signal strength `λ₀ ε_p` of the side channel.
    pub fn strength(&self) -> f64 {
        self.lambda0 * self.eps_p
    }
}

/// Base instance plus the side observation `y_pert = √(λ₀ ε_p) β₀ + Z`.
#[derive(Clone, Debug)]
pub struct PerturbedInstance {
    pub base: Instance,
    pub pcfg: PerturbationConfig,
    pub z: DVector<f64>,
    pub y_pert: DVector<f64>,
}

pub fn make_perturbed(instance: &Instance, pcfg: &PerturbationConfig) -> PerturbedInstance {
    let p = instance.p();
    let mut rz = rng::stream(pcfg.seed, &[rng::label("model.side-channel")]);
    let z = DVector::from_fn(p, |_, _| rz.sample::<f64, _>(StandardNormal));
    let y_pert = &instance.beta0 * pcfg.strength().sqrt() + &z;
    PerturbedInstance { base: instance.clone(), pcfg: *pcfg, z, y_pert }
}

/// `H^Gauss(β) = -λ₀ε_p β₀ᵀβ - √(λ₀ε_p) Zᵀβ + λ₀ε_p ‖β‖²/2`.
pub fn hamiltonian_gauss(pert: &PerturbedInstance, beta: &DVector<f64>) -> f64 {
    let t = pert.pcfg.strength();
    -t * pert.base.beta0.dot(beta) - t.sqrt() * pert.z.dot(beta) + 0.5 * t * beta.norm_squared()
}

/// Full Hamiltonian of the perturbed model.
pub fn hamiltonian_perturbed(pert: &PerturbedInstance, delta: f64, beta: &DVector<f64>) -> f64 {
    hamiltonian(&pert.base, delta, beta) + hamiltonian_gauss(pert, beta)
}

/// Random stream reserved for sphere draws keyed by `(seed, path)`.
pub fn sphere_stream(seed: u64, path: &[u64]) -> RngStream {
    let mut full = vec![rng::label("model.sphere")];
    full.extend_from_slice(path);
    rng::stream(seed, &full)
}
