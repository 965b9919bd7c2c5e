//! Quenched free energy `(1/p) ln Z_p` of the spherical model and the
//! closed-form annealed quantities.
//!
//! # Exact representation
//!
//! For `β` uniform on `S^{d-1}(√d)` and a Hamiltonian
//! `H(β) = ½ βᵀMβ - hᵀβ + c`, inserting `δ(d - ‖β‖²)` as a Laplace inversion
//! integral and doing the Gaussian integral gives
//!
//! ```text
//! E exp(-H) = e^{-c} J(λ, c) / J(0, 0),   J = (1/2πi) ∫_{z*-i∞}^{z*+i∞} e^{Φ(z)} dz
//! Φ(z) = d z - ½ Σ ln(λᵢ + 2z) + ½ Σ cᵢ² / (λᵢ + 2z)
//! ```
//!
//! with `λ` the spectrum of `M` and `cᵢ` the field in its eigenbasis. `Φ` is
//! strictly convex on `z > -λ_min/2`, so the saddle `z*` is the unique real
//! root of `Φ'`. The saddle method evaluates `ln J ≈ Φ(z*) - ½ ln Φ''(z*)`;
//! the contour method integrates along the vertical line through `z*`.
//! Both are differenced against the same computation at `λ = c = 0`, so the
//! surface-measure constants cancel.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Error, Result};
use crate::linalg::{self, Reflection};
use crate::model::{self, Instance, PerturbedInstance};
use crate::quad;
use crate::rng;

/// `H(β) = ½ βᵀMβ - hᵀβ + constant` written in the eigenbasis of `M`:
/// `½ Σ λᵢ tᵢ² - Σ cᵢ tᵢ + constant` with `t = Vᵀβ`, for `β` on the sphere of
/// radius `√dim`.
#[derive(Clone, Debug)]
pub struct QuadraticForm {
    pub eigvals: DVector<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub dim: usize,
    /// Eigenvectors of `M` as columns (absent when built from a spectrum).
    pub basis: Option<DMatrix<f64>>,
}

impl QuadraticForm {
    /// Eigendecompose the symmetric `m` and rotate `field` into its eigenbasis.
    pub fn from_matrix(m: &DMatrix<f64>, field: &DVector<f64>, constant: f64) -> Result<Self> {
        let (eigvals, basis) = linalg::sym_eigen(m)?;
        let linear = basis.transpose() * field;
        let qf = QuadraticForm { dim: eigvals.len(), eigvals, linear, constant, basis: Some(basis) };
        qf.validate()?;
        Ok(qf)
    }

    pub fn from_spectrum(eigvals: DVector<f64>, linear: DVector<f64>, constant: f64) -> Result<Self> {
        let mut order: Vec<usize> = (0..eigvals.len()).collect();
        order.sort_by(|&a, &b| eigvals[a].total_cmp(&eigvals[b]));
        let e = DVector::from_iterator(eigvals.len(), order.iter().map(|&i| eigvals[i]));
        let l = DVector::from_iterator(linear.len().min(eigvals.len()), order.iter().map(|&i| linear[i]));
        if linear.len() != eigvals.len() {
            return Err(invalid("eigvals and linear must have the same length"));
        }
        let qf = QuadraticForm { dim: e.len(), eigvals: e, linear: l, constant, basis: None };
        qf.validate()?;
        Ok(qf)
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.eigvals.len() != self.dim || self.linear.len() != self.dim {
            return Err(invalid("quadratic form dimensions are inconsistent"));
        }
        let scale = self.eigvals.amax().max(1.0);
        if self.eigvals[0] < -1e-10 * scale {
            return Err(numerical(format!("quadratic form is not positive semidefinite (λ_min = {:.3e})", self.eigvals[0])));
        }
        if self.eigvals.iter().chain(self.linear.iter()).any(|v| !v.is_finite()) || !self.constant.is_finite() {
            return Err(numerical("quadratic form has non-finite entries"));
        }
        Ok(())
    }

    /// Energy at eigen-coordinates `t`.
    pub fn energy_eigen(&self, t: &DVector<f64>) -> f64 {
        let quad: f64 = self.eigvals.iter().zip(t.iter()).map(|(l, x)| l * x * x).sum();
        0.5 * quad - self.linear.dot(t) + self.constant
    }

    /// Energy at `β` in the original coordinates.
    pub fn energy(&self, beta: &DVector<f64>) -> Option<f64> {
        self.basis.as_ref().map(|v| self.energy_eigen(&(v.transpose() * beta)))
    }

    fn lambda_min(&self) -> f64 {
        self.eigvals[0].max(0.0)
    }

    /// Same form with every eigenvalue and field coefficient scaled.
    pub fn scaled(&self, eig_scale: f64, field_scale: f64) -> Self {
        QuadraticForm {
            eigvals: &self.eigvals * eig_scale,
            linear: &self.linear * field_scale,
            constant: self.constant,
            dim: self.dim,
            basis: self.basis.clone(),
        }
    }
}

/// `‖y - Xβ‖²/(2Δ) = ½ βᵀ(XᵀX/Δ)β - (Xᵀy/Δ)ᵀβ + ‖y‖²/(2Δ)`.
pub fn reduce_to_quadratic(instance: &Instance, delta: f64) -> Result<QuadraticForm> {
    if !(delta > 0.0) {
        return Err(invalid(format!("delta must be positive, got {delta}")));
    }
    let xt = instance.x.transpose();
    let m = (&xt * &instance.x) / delta;
    let h = (&xt * &instance.y) / delta;
    QuadraticForm::from_matrix(&m, &h, instance.y.norm_squared() / (2.0 * delta))
}

/// Quadratic form of the perturbed Hamiltonian `H + H^Gauss` on the sphere
/// (`‖β‖² = p`, so the `λ₀ε_p‖β‖²/2` piece is a constant).
pub fn reduce_perturbed(pert: &PerturbedInstance, delta: f64) -> Result<QuadraticForm> {
    let inst = &pert.base;
    let t = pert.pcfg.strength();
    let xt = inst.x.transpose();
    let m = (&xt * &inst.x) / delta;
    let h = (&xt * &inst.y) / delta + &inst.beta0 * t + &pert.z * t.sqrt();
    let c = inst.y.norm_squared() / (2.0 * delta) + 0.5 * t * inst.p() as f64;
    QuadraticForm::from_matrix(&m, &h, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Saddle,
    Contour,
    MonteCarlo,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Saddle => "saddle",
            Method::Contour => "contour",
            Method::MonteCarlo => "monte-carlo",
        })
    }
}

/// Per-coordinate free energy `(1/p) ln Z`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FreeEnergyEstimate {
    pub value: f64,
    pub method: Method,
    pub std_err: f64,
    /// Next-order Laplace term (per coordinate); informational.
    pub correction: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ContourResult {
    pub saddle: f64,
    pub phi_at_saddle: f64,
    pub phi_second: f64,
    pub quadrature_value: f64,
}

struct Phi<'a> {
    qf: &'a QuadraticForm,
}

impl Phi<'_> {
    fn value(&self, z: f64) -> f64 {
        let d = self.qf.dim as f64;
        let mut acc = d * z;
        for (l, c) in self.qf.eigvals.iter().zip(self.qf.linear.iter()) {
            let w = l.max(0.0) + 2.0 * z;
            acc += -0.5 * w.ln() + 0.5 * c * c / w;
        }
        acc
    }

    fn complex(&self, z: Complex64) -> Complex64 {
        let d = self.qf.dim as f64;
        let mut acc = z * d;
        for (l, c) in self.qf.eigvals.iter().zip(self.qf.linear.iter()) {
            let w = z * 2.0 + l.max(0.0);
            acc += -0.5 * w.ln() + 0.5 * c * c / w;
        }
        acc
    }

    /// `(Φ', Φ'', Φ''', Φ'''')` at real `z`.
    fn derivatives(&self, z: f64) -> [f64; 4] {
        let mut out = [self.qf.dim as f64, 0.0, 0.0, 0.0];
        for (l, c) in self.qf.eigvals.iter().zip(self.qf.linear.iter()) {
            let w = l.max(0.0) + 2.0 * z;
            let c2 = c * c;
            let (w2, w3) = (w * w, w * w * w);
            out[0] -= 1.0 / w + c2 / w2;
            out[1] += 2.0 / w2 + 4.0 * c2 / w3;
            out[2] -= 8.0 / w3 + 24.0 * c2 / (w2 * w2);
            out[3] += 48.0 / (w2 * w2) + 192.0 * c2 / (w2 * w3);
        }
        out
    }

    fn saddle(&self) -> Result<f64> {
        let lo_bound = -self.qf.lambda_min() / 2.0;
        let mut lo = lo_bound + 1e-12 * lo_bound.abs().max(1.0);
        if self.derivatives(lo)[0] >= 0.0 {
            return Err(numerical(format!("Φ' is nonnegative at the left end of the bracket (z = {lo:e})")));
        }
        let mut hi = lo + 1.0;
        let mut doublings = 0;
        while self.derivatives(hi)[0] <= 0.0 {
            hi = lo + 2.0 * (hi - lo);
            doublings += 1;
            if doublings > 200 || !hi.is_finite() {
                return Err(numerical(format!("no sign change of Φ' in ({lo:e}, {hi:e})")));
            }
        }
        for _ in 0..400 {
            if hi - lo <= 1e-13 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.derivatives(mid)[0] < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut z = 0.5 * (lo + hi);
        for _ in 0..2 {
            let d = self.derivatives(z);
            let step = d[0] / d[1];
            let cand = z - step;
            if cand > lo_bound && cand.is_finite() {
                z = cand;
            }
        }
        Ok(z)
    }
}

/// `ln J` by Laplace's method plus the next-order term.
struct SaddlePoint {
    z: f64,
    phi: f64,
    phi2: f64,
    log_j: f64,
    correction: f64,
}

fn saddle_point(qf: &QuadraticForm) -> Result<SaddlePoint> {
    let phi = Phi { qf };
    let z = phi.saddle()?;
    let v = phi.value(z);
    let d = phi.derivatives(z);
    if !(d[1] > 0.0) {
        return Err(numerical(format!("Φ'' = {} at the saddle z* = {z}", d[1])));
    }
    let correction = d[3] / (8.0 * d[1] * d[1]) - 5.0 * d[2] * d[2] / (24.0 * d[1].powi(3));
    Ok(SaddlePoint { z, phi: v, phi2: d[1], log_j: v - 0.5 * d[1].ln(), correction })
}

fn zero_form(dim: usize) -> QuadraticForm {
    QuadraticForm { eigvals: DVector::zeros(dim), linear: DVector::zeros(dim), constant: 0.0, dim, basis: None }
}

/// Total `ln E exp(-H)` (not divided by the dimension) and the Laplace
/// correction difference, by the saddle method.
pub fn log_partition_saddle_total(qf: &QuadraticForm) -> Result<(f64, f64, ContourResult)> {
    let sp = saddle_point(qf)?;
    let base = saddle_point(&zero_form(qf.dim))?;
    let value = -qf.constant + sp.log_j - base.log_j;
    let contour = ContourResult { saddle: sp.z, phi_at_saddle: sp.phi, phi_second: sp.phi2, quadrature_value: sp.log_j };
    Ok((value, sp.correction - base.correction, contour))
}

/// `(1/p) ln Z` by the saddle-point method.
pub fn log_partition_saddle(qf: &QuadraticForm) -> Result<FreeEnergyEstimate> {
    let (total, corr, _) = log_partition_saddle_total(qf)?;
    let d = qf.dim as f64;
    Ok(FreeEnergyEstimate { value: total / d, method: Method::Saddle, std_err: 0.0, correction: corr / d })
}

/// Saddle-point diagnostics (location, curvature) for a form.
pub fn saddle_diagnostics(qf: &QuadraticForm) -> Result<ContourResult> {
    Ok(log_partition_saddle_total(qf)?.2)
}

const TAIL_TOL: f64 = 1e-12;
const WIDEN: f64 = 8.0;

/// `ln J` by trapezoid quadrature along `z* + i t`.
fn contour_log_j(qf: &QuadraticForm, half_width: f64, nodes: usize) -> Result<(f64, ContourResult)> {
    let phi = Phi { qf };
    let z = phi.saddle()?;
    let p0 = phi.value(z);
    let p2 = phi.derivatives(z)[1];
    let mut t_max = half_width / p2.sqrt();
    for attempt in 0..2 {
        let tail = (phi.complex(Complex64::new(z, t_max)).re - p0).exp();
        if tail > TAIL_TOL {
            if attempt == 0 {
                log::info!("contour tail {tail:.3e} above tolerance; widening the window by {WIDEN}x");
                t_max *= WIDEN;
                continue;
            }
            return Err(numerical(format!("contour tail did not decay: |integrand| = {tail:.3e} of peak at t = {t_max:.3e}")));
        }
        // integrand is Hermitian in t, so integrate the real part on [0, T]
        let m = nodes / 2;
        let h = t_max / m as f64;
        let mut acc = 0.5; // t = 0, weight ½ for the trapezoid end, value e^0
        for k in 1..=m {
            let t = h * k as f64;
            let w = if k == m { 0.5 } else { 1.0 };
            acc += w * (phi.complex(Complex64::new(z, t)) - p0).exp().re;
        }
        let integral = 2.0 * acc * h / (2.0 * std::f64::consts::PI);
        if !(integral > 0.0) {
            return Err(numerical(format!("contour quadrature returned a non-positive integral {integral:e}")));
        }
        let log_j = p0 + integral.ln();
        return Ok((log_j, ContourResult { saddle: z, phi_at_saddle: p0, phi_second: p2, quadrature_value: log_j }));
    }
    unreachable!()
}

/// `(1/p) ln Z` by numeric contour integration; validates the saddle method.
pub fn log_partition_contour(qf: &QuadraticForm, half_width: f64, nodes: usize) -> Result<FreeEnergyEstimate> {
    if nodes < 64 {
        return Err(invalid(format!("contour quadrature needs at least 64 nodes, got {nodes}")));
    }
    if !(half_width > 0.0) {
        return Err(invalid("half_width must be positive"));
    }
    let (lj, _) = contour_log_j(qf, half_width, nodes)?;
    let (lj0, _) = contour_log_j(&zero_form(qf.dim), half_width, nodes)?;
    let d = qf.dim as f64;
    Ok(FreeEnergyEstimate { value: (-qf.constant + lj - lj0) / d, method: Method::Contour, std_err: 0.0, correction: 0.0 })
}

pub const CONTOUR_HALF_WIDTH: f64 = 12.0;
pub const CONTOUR_NODES: usize = 4096;

const MC_BLOCKS: usize = 20;

/// Brute-force `(1/p) ln E_{β∼π₀} exp(-H(β))` from uniform sphere draws.
///
/// Log-sum-exp per block, jackknife standard error over 20 blocks. Blocks
/// run in parallel on independent streams seeded from `rng`.
pub fn mc_log_partition<R: Rng + ?Sized>(instance: &Instance, delta: f64, num_samples: usize, rng: &mut R) -> Result<FreeEnergyEstimate> {
    if num_samples < 1000 {
        return Err(invalid(format!("need at least 1000 samples, got {num_samples}")));
    }
    let p = instance.p();
    let gram = instance.x.transpose() * &instance.x;
    let xty = instance.x.transpose() * &instance.y;
    let yy = instance.y.norm_squared();
    let energy = |b: &DVector<f64>| (yy - 2.0 * xty.dot(b) + (b.transpose() * &gram * b)[0]) / (2.0 * delta);
    mc_log_partition_with(p, energy, num_samples, rng)
}

/// Monte Carlo `(1/p) ln E exp(-energy(β))` over `β ∼ Unif(S^{p-1}(√p))`.
pub fn mc_log_partition_with<R, F>(p: usize, energy: F, num_samples: usize, rng: &mut R) -> Result<FreeEnergyEstimate>
where
    R: Rng + ?Sized,
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let seeds: Vec<u64> = (0..MC_BLOCKS).map(|_| rng.random()).collect();
    let radius = (p as f64).sqrt();
    let blocks: Vec<(f64, usize)> = seeds
        .par_iter()
        .enumerate()
        .map(|(b, &seed)| {
            let count = num_samples / MC_BLOCKS + usize::from(b < num_samples % MC_BLOCKS);
            let mut r = rng::stream(seed, &[rng::label("oracle.mc"), b as u64]);
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for _ in 0..count {
                let beta = model::sample_uniform_sphere(p, radius, &mut r);
                let e = -energy(&beta);
                if e > max {
                    sum = sum * (max - e).exp() + 1.0;
                    max = e;
                } else {
                    sum += (e - max).exp();
                }
            }
            (max + sum.ln(), count)
        })
        .collect();
    if blocks.iter().any(|(l, _)| !l.is_finite()) {
        return Err(numerical("all Monte Carlo weights underflowed or were non-finite; recenter the Hamiltonian before sampling"));
    }
    let total_n: usize = blocks.iter().map(|b| b.1).sum();
    let lse = |it: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = it.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let pf = p as f64;
    let full = (lse(&mut blocks.iter().map(|b| b.0)) - (total_n as f64).ln()) / pf;
    let loo: Vec<f64> = (0..blocks.len())
        .map(|k| {
            let rest = lse(&mut blocks.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, b)| b.0));
            (rest - ((total_n - blocks[k].1) as f64).ln()) / pf
        })
        .collect();
    let nb = loo.len() as f64;
    let mean = loo.iter().sum::<f64>() / nb;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (nb - 1.0) / nb;
    Ok(FreeEnergyEstimate { value: full, method: Method::MonteCarlo, std_err: var.sqrt(), correction: 0.0 })
}

/// Annealed free energy of the model without external field,
/// `φ_p(Δ) = (1/p) ln E_X E_β exp(-βᵀXᵀXβ/(2Δ)) = -(n/2p) ln(1 + p/(Δn))`.
pub fn annealed_free_energy(p: usize, n: usize, delta: f64) -> f64 {
    let (pf, nf) = (p as f64, n as f64);
    -(nf / (2.0 * pf)) * (pf / (delta * nf)).ln_1p()
}

/// `g''(t)` for the overlap exponent of the annealed second moment, with
/// `r = p/(Δn)`.
pub fn g_second(alpha: f64, r: f64, t: f64) -> f64 {
    let a = (1.0 + r).powi(2);
    let b = t * t * r * r;
    alpha * r * r * (a + b) / (a - b).powi(2) - 0.5
}

/// `C_Q = -g''(1)`; positive in the high-temperature regime.
pub fn c_q(alpha: f64, delta: f64) -> f64 {
    let r = 1.0 / (delta * alpha);
    -g_second(alpha, r, 1.0)
}

pub fn is_high_temperature(alpha: f64, delta: f64) -> bool {
    c_q(alpha, delta) > 0.0
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SecondMomentReport {
    pub p: usize,
    pub n: usize,
    pub delta: f64,
    pub r: f64,
    pub annealed_phi: f64,
    #[serde(rename = "log_EZ2_over_p")]
    pub log_ez2_over_p: f64,
    pub log_gamma0_over_p: f64,
    pub cq: f64,
    pub high_temperature: bool,
}

/// `ln E[Z²]` for the model without external field.
///
/// `E[Z²] = E_Q [(1+r)² - Q²r²]^{-n/2}` with `Q = βᵀσ/p` distributed as the
/// signed projection density. The `(1+r)^{-n}` factor is pulled out so the
/// remaining integrand is `O(1)`.
pub fn log_second_moment(p: usize, n: usize, delta: f64) -> Result<f64> {
    let (pf, nf) = (p as f64, n as f64);
    let r = pf / (delta * nf);
    let k = (r / (1.0 + r)).powi(2);
    let integrand = |q: f64| {
        let lf = model::log_projection_density(q, p, 1);
        (lf - 0.5 * nf * (-k * q * q).ln_1p()).exp()
    };
    let w = 1.0 / pf.sqrt();
    let mut pts = vec![-1.0, 1.0];
    for s in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
        let x = s * w;
        if x < 1.0 {
            pts.push(x);
            pts.push(-x);
        }
    }
    pts.push(0.0);
    pts.sort_by(f64::total_cmp);
    let j = quad::integrate_pieces(integrand, &pts, 1e-14, 1e-12)?;
    Ok(-nf * r.ln_1p() + j.ln())
}

pub fn annealed_second_moment(p: usize, n: usize, delta: f64) -> Result<SecondMomentReport> {
    if p < 3 || n < 1 || !(delta > 0.0) {
        return Err(invalid(format!("annealed second moment needs p ≥ 3, n ≥ 1, Δ > 0 (got {p}, {n}, {delta})")));
    }
    let (pf, nf) = (p as f64, n as f64);
    let r = pf / (delta * nf);
    let alpha = nf / pf;
    let log_ez2 = log_second_moment(p, n, delta)?;
    let log_ez = -0.5 * nf * r.ln_1p();
    let log_gamma0 = 4f64.ln() + log_ez2 - 2.0 * log_ez;
    let cq = -g_second(alpha, r, 1.0);
    Ok(SecondMomentReport {
        p,
        n,
        delta,
        r,
        annealed_phi: annealed_free_energy(p, n, delta),
        log_ez2_over_p: log_ez2 / pf,
        log_gamma0_over_p: log_gamma0 / pf,
        cq,
        high_temperature: cq > 0.0,
    })
}

/// `(1/p) ln γ₀` along a list of dimensions at fixed `(α, Δ)`.
pub fn log_gamma0_trend(p_list: &[usize], alpha: f64, delta: f64) -> Result<Vec<f64>> {
    if !is_high_temperature(alpha, delta) {
        return Err(invalid(format!("(α, Δ) = ({alpha}, {delta}) is not in the high-temperature regime (C_Q = {:.4})", c_q(alpha, delta))));
    }
    p_list
        .iter()
        .map(|&p| {
            let n = ((alpha * p as f64).round() as usize).max(1);
            annealed_second_moment(p, n, delta).map(|r| r.log_gamma0_over_p)
        })
        .collect()
}

/// Whether `f_p(δ)` includes the side-channel Hamiltonian.
#[derive(Clone, Copy, Debug, Default)]
pub enum SideChannel<'a> {
    #[default]
    Off,
    On(&'a PerturbedInstance),
}

/// Restricted free energy `f_p(δ)`: the contribution of the slice
/// `β₁/√p = δ` (coordinates rotated so `β₀ ∝ e₁`), normalized so that
/// `Z = ∫_{-1}^{1} exp(p f_p(δ)) dδ`.
///
/// Precomputes the eigendecomposition of `X₋₁ᵀX₋₁`; every `δ` is then a
/// rescaling of one quadratic form.
pub struct RestrictedProfile {
    p: usize,
    delta: f64,
    spectrum: DVector<f64>,
    field_y: DVector<f64>,
    field_x1: DVector<f64>,
    field_z: Option<(DVector<f64>, f64, f64)>,
    y: DVector<f64>,
    x1: DVector<f64>,
    beta0_norm: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RestrictedTerms {
    pub delta_align: f64,
    pub value: f64,
    pub log_density: f64,
    pub h_norm_sq_over_p: f64,
    pub subspace: f64,
}

impl RestrictedProfile {
    pub fn new(instance: &Instance, delta: f64, side: SideChannel<'_>) -> Result<Self> {
        let p = instance.p();
        let b0 = instance.beta0.norm();
        if b0 == 0.0 {
            return Err(invalid("restricted free energy needs a nonzero β₀"));
        }
        let (refl, sign) = Reflection::to_axis(&(&instance.beta0 / b0), 0);
        let mut xr = refl.apply_right(&instance.x);
        if sign < 0.0 {
            xr.column_mut(0).neg_mut();
        }
        let x1: DVector<f64> = xr.column(0).into_owned();
        let xrest = xr.columns(1, p - 1).into_owned();
        let a = xrest.transpose() * &xrest;
        let (spectrum, v) = linalg::sym_eigen(&a)?;
        let vt = v.transpose();
        let field_y = &vt * (xrest.transpose() * &instance.y);
        let field_x1 = &vt * (xrest.transpose() * &x1);
        let field_z = match side {
            SideChannel::Off => None,
            SideChannel::On(pert) => {
                let mut zr = refl.apply(&pert.z);
                if sign < 0.0 {
                    zr[0] = -zr[0];
                }
                let rest = DVector::from_iterator(p - 1, zr.iter().skip(1).cloned());
                Some((&vt * rest, zr[0], pert.pcfg.strength()))
            }
        };
        Ok(RestrictedProfile { p, delta, spectrum, field_y, field_x1, field_z, y: instance.y.clone(), x1, beta0_norm: b0 })
    }

    pub fn terms(&self, delta_align: f64) -> Result<RestrictedTerms> {
        if !(delta_align.abs() < 1.0) {
            return Err(Error::Domain(format!("alignment must satisfy |δ| < 1, got {delta_align}")));
        }
        let pf = self.p as f64;
        let d = (self.p - 1) as f64;
        let dl = self.delta;
        let rho = pf * (1.0 - delta_align * delta_align);
        let beta1 = pf.sqrt() * delta_align;
        // y - Xβ = h - X₋₁ β₋₁ with h = y - β₁ X₁
        let h = &self.y - &self.x1 * beta1;
        let h_sq = h.norm_squared();
        // field on β₋₁ in the eigenbasis: X₋₁ᵀh / Δ (+ side channel)
        let mut field = (&self.field_y - &self.field_x1 * beta1) / dl;
        let mut constant = h_sq / (2.0 * dl);
        if let Some((zr, z1, t)) = &self.field_z {
            field += zr * t.sqrt();
            constant += -t * self.beta0_norm * beta1 - t.sqrt() * z1 * beta1 + 0.5 * t * pf;
        }
        // β₋₁ = √(ρ/d) b with b on S^{d-1}(√d)
        let s = (rho / d).sqrt();
        let qf = QuadraticForm::from_spectrum(&self.spectrum * (s * s / dl), field * s, 0.0)?;
        let (sub, _, _) = log_partition_saddle_total(&qf)?;
        let log_density = model::log_projection_density(delta_align, self.p, 1);
        let value = (log_density - constant + sub) / pf;
        Ok(RestrictedTerms { delta_align, value, log_density: log_density / pf, h_norm_sq_over_p: h_sq / pf, subspace: sub / pf })
    }

    /// `f_p` on a uniform grid of `points` values in `[-lim, lim]`.
    pub fn grid(&self, lim: f64, points: usize) -> Result<Vec<RestrictedTerms>> {
        (0..points).map(|k| self.terms(-lim + 2.0 * lim * k as f64 / (points - 1) as f64)).collect()
    }

    /// `(1/p) ln ∫ exp(p f_p(δ)) dδ` by the trapezoid rule over a profile.
    pub fn integrate(profile: &[RestrictedTerms], p: usize) -> f64 {
        let pf = p as f64;
        let m = profile.iter().map(|t| pf * t.value).fold(f64::NEG_INFINITY, f64::max);
        let mut acc = 0.0;
        for w in profile.windows(2) {
            let h = w[1].delta_align - w[0].delta_align;
            acc += 0.5 * h * ((pf * w[0].value - m).exp() + (pf * w[1].value - m).exp());
        }
        (m + acc.ln()) / pf
    }
}

pub const RESTRICTED_GRID_POINTS: usize = 401;
pub const RESTRICTED_GRID_LIMIT: f64 = 0.999;

pub fn restricted_free_energy(instance: &Instance, delta: f64, delta_align: f64) -> Result<f64> {
    if !(delta_align.abs() < 1.0) {
        return Err(Error::Domain(format!("alignment must satisfy |δ| < 1, got {delta_align}")));
    }
    RestrictedProfile::new(instance, delta, SideChannel::Off)?.terms(delta_align).map(|t| t.value)
}

/// Three-term decomposition of the free energy restricted to the band around
/// a center `a`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BandTerms {
    pub onsager_term: f64,
    pub volume_term: f64,
    pub recentered_fit: f64,
    /// Dimension of the span that was projected out (2, or 1 when `a = 0`).
    pub span_dim: usize,
}

impl BandTerms {
    pub fn total(&self) -> f64 {
        self.onsager_term + self.volume_term + self.recentered_fit
    }
}

/// What to do when `a` and `Xᵀ(y - Xa)` are collinear.
///
/// Collinearity is exactly the stationarity condition of `f_TAP`, so it
/// always occurs at an interior TAP maximizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanPolicy {
    /// Fail with an error naming the colliding vectors.
    Strict,
    /// Fall back to the one-dimensional span of `a`.
    Collapse,
}

/// Orthonormal basis of `Span(a, Xᵀ(y - Xa))`. A zero center contributes no
/// direction (the band reduces to a slab in the field direction).
pub fn band_basis(instance: &Instance, a: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    band_basis_with(instance, a, SpanPolicy::Strict)
}

pub fn band_basis_with(instance: &Instance, a: &DVector<f64>, policy: SpanPolicy) -> Result<Vec<DVector<f64>>> {
    let g = instance.x.transpose() * (&instance.y - &instance.x * a);
    if a.norm() == 0.0 {
        if g.norm() == 0.0 {
            return Ok(Vec::new());
        }
        return linalg::orthonormalize(&[&g], &["field Xᵀ(y - Xa)"]);
    }
    match linalg::orthonormalize(&[a, &g], &["center a", "field Xᵀ(y - Xa)"]) {
        Err(Error::DegenerateSpan(msg)) if policy == SpanPolicy::Collapse && !msg.starts_with("center") => Ok(vec![a / a.norm()]),
        other => other,
    }
}

pub fn band_free_energy(instance: &Instance, delta: f64, a: &DVector<f64>) -> Result<BandTerms> {
    band_free_energy_with(instance, delta, a, SpanPolicy::Strict)
}

pub fn band_free_energy_with(instance: &Instance, delta: f64, a: &DVector<f64>, policy: SpanPolicy) -> Result<BandTerms> {
    let p = instance.p();
    let pf = p as f64;
    if a.len() != p {
        return Err(invalid("center has the wrong dimension"));
    }
    let s = a.norm_squared() / pf;
    if !(s < 1.0) {
        return Err(Error::Boundary { s });
    }
    let basis = band_basis_with(instance, a, policy)?;
    let gram = instance.x.transpose() * &instance.x;
    let compressed = linalg::compress_to_complement(&gram, &basis);
    let d = compressed.nrows();
    let delta_eff = pf * delta / (pf - a.norm_squared());
    // sphere of radius √p inside a d-dimensional subspace: β = √(p/d) b
    let m = compressed * (pf / (d as f64 * delta_eff));
    let qf = QuadraticForm::from_matrix(&m, &DVector::zeros(d), 0.0)?;
    let (ln_e, _, _) = log_partition_saddle_total(&qf)?;
    let resid = &instance.y - &instance.x * a;
    Ok(BandTerms {
        onsager_term: ln_e / pf,
        volume_term: 0.5 * (1.0 - s).ln(),
        recentered_fit: -resid.norm_squared() / (2.0 * delta * pf),
        span_dim: basis.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_instance, ModelConfig};

    fn inst(p: usize, n: usize, delta: f64, seed: u64) -> Instance {
        generate_instance(&ModelConfig::new(p, n, delta, seed).unwrap()).unwrap()
    }

    fn zero_instance(p: usize, n: usize, delta: f64, with_y: bool) -> Instance {
        let cfg = ModelConfig::new(p, n, delta, 0).unwrap();
        let base = generate_instance(&cfg).unwrap();
        let eps = if with_y { base.eps.clone() } else { DVector::zeros(n) };
        Instance::from_parts(cfg, DMatrix::zeros(n, p), base.beta0, eps).unwrap()
    }

    #[test]
    fn reduce_trivial_cases() {
        let z = zero_instance(4, 6, 2.0, true);
        let qf = reduce_to_quadratic(&z, 2.0).unwrap();
        assert!(qf.eigvals.iter().all(|v| *v == 0.0));
        assert!(qf.linear.iter().all(|v| *v == 0.0));
        assert!((qf.constant - z.y.norm_squared() / 4.0).abs() < 1e-15);

        // XᵀX = diag(2, 1) with Δ = 2
        let cfg = ModelConfig::new(3, 2, 2.0, 0).unwrap();
        let x = DMatrix::from_row_slice(2, 3, &[2f64.sqrt(), 0.0, 0.0, 0.0, 1.0, 0.0]);
        let i = Instance::from_parts(cfg, x, DVector::from_vec(vec![1.0, 1.0, 1.0]), DVector::zeros(2)).unwrap();
        let qf = reduce_to_quadratic(&i, 2.0).unwrap();
        let e: Vec<f64> = qf.eigvals.iter().cloned().collect();
        assert!((e[0]).abs() < 1e-14 && (e[1] - 0.5).abs() < 1e-14 && (e[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn reduce_matches_hamiltonian() {
        let i = inst(5, 8, 1.3, 3);
        let qf = reduce_to_quadratic(&i, 1.3).unwrap();
        let mut r = rng::stream(1, &[]);
        for _ in 0..10 {
            let b = model::sample_uniform_sphere(5, 5f64.sqrt(), &mut r);
            let h = model::hamiltonian(&i, 1.3, &b);
            assert!((qf.energy(&b).unwrap() - h).abs() < 1e-10 * h.max(1.0));
        }
    }

    #[test]
    fn saddle_zero_hamiltonian_is_exactly_zero() {
        let z = zero_instance(10, 20, 1.0, false);
        let est = log_partition_saddle(&reduce_to_quadratic(&z, 1.0).unwrap()).unwrap();
        assert_eq!(est.value, 0.0);
        // the zero-Hamiltonian contour integrand decays like t^{-d/2}; d = 50
        // keeps the default window adequate
        let z = zero_instance(50, 20, 1.0, false);
        let c = log_partition_contour(&reduce_to_quadratic(&z, 1.0).unwrap(), 12.0, 4096).unwrap();
        assert!(c.value.abs() < 1e-10);
    }

    #[test]
    fn isotropic_quadratic_closed_form() {
        // c = 0, λᵢ = λ̄: βᵀMβ = λ̄ p on the sphere, so (1/p) ln Z = -λ̄/2.
        let p = 10_000usize;
        for lam in [0.2, 1.0, 3.0] {
            let qf = QuadraticForm::from_spectrum(DVector::from_element(p, lam), DVector::zeros(p), 0.0).unwrap();
            let est = log_partition_saddle(&qf).unwrap();
            assert!((est.value + 0.5 * lam).abs() < 1e-9, "λ̄={lam}: {}", est.value);
        }
    }

    #[test]
    fn annealed_values() {
        assert!((annealed_free_energy(10, 20, 2.0) + 1.25f64.ln()).abs() < 1e-12);
        assert!(annealed_free_energy(10, 20, 1e12).abs() < 1e-10);
        for p in [100usize, 200, 400, 1000] {
            let lim = -(2.0 / 2.0) * (1.0 + 1.0 / (10.0 * 2.0f64)).ln();
            assert!((annealed_free_energy(p, 2 * p, 10.0) - lim).abs() <= 1.0 / p as f64);
        }
    }

    #[test]
    fn cq_example() {
        let g = g_second(2.0, 0.05, 1.0);
        let expect = 2.0 * 0.0025 * (1.1025 + 0.0025) / (1.1025f64 - 0.0025).powi(2) - 0.5;
        assert!((g - expect).abs() < 1e-15);
        assert!((c_q(2.0, 10.0) - 0.4954).abs() < 1e-4);
        assert!(is_high_temperature(2.0, 10.0));
    }

    #[test]
    fn second_moment_infinite_temperature() {
        let rep = annealed_second_moment(20, 40, 1e8).unwrap();
        assert!(rep.log_ez2_over_p.abs() < 1e-6);
        assert!(rep.high_temperature);
    }

    #[test]
    fn mc_trivial_cases() {
        let z = zero_instance(6, 5, 1.0, false);
        let mut r = rng::stream(0, &[]);
        let est = mc_log_partition(&z, 1.0, 2000, &mut r).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.std_err, 0.0);
        let zy = zero_instance(6, 5, 1.0, true);
        let est = mc_log_partition(&zy, 1.0, 2000, &mut r).unwrap();
        let expect = -zy.y.norm_squared() / (2.0 * 6.0);
        assert!((est.value - expect).abs() < 1e-12 * expect.abs());
        assert!(est.std_err < 1e-12);
        assert!(mc_log_partition(&zy, 1.0, 999, &mut r).is_err());
    }

    #[test]
    fn restricted_domain() {
        let i = inst(20, 40, 10.0, 1);
        assert!(matches!(restricted_free_energy(&i, 10.0, 1.0), Err(Error::Domain(_))));
        let hi = restricted_free_energy(&i, 10.0, 0.999).unwrap();
        let mid = restricted_free_energy(&i, 10.0, 0.5).unwrap();
        assert!(hi < mid - 1.0);
    }

    #[test]
    fn band_zero_center() {
        let i = inst(30, 60, 10.0, 2);
        let t = band_free_energy(&i, 10.0, &DVector::zeros(30)).unwrap();
        assert_eq!(t.volume_term, 0.0);
        assert_eq!(t.span_dim, 1);
        // XᵀX = I makes Xᵀ(y - Xa) = y - a parallel to a = t y
        let cfg = ModelConfig::new(30, 30, 10.0, 0).unwrap();
        let ortho = Instance::from_parts(cfg, DMatrix::identity(30, 30), i.beta0.clone(), DVector::zeros(30)).unwrap();
        let a = &ortho.y * (0.1 / ortho.y.norm());
        let t = band_free_energy(&ortho, 10.0, &a);
        assert!(matches!(&t, Err(Error::DegenerateSpan(m)) if m.contains("field")), "{t:?}");
        let edge = DVector::from_element(30, 1.0);
        assert!(matches!(band_free_energy(&i, 10.0, &edge), Err(Error::Boundary { .. })));
    }
}
