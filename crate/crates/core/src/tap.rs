//! The TAP functional
//!
//! ```text
//! f_TAP(a) = -‖y - Xa‖²/(2Δp) - (α/2) ln(1 + (1 - s)/(Δα)) + ½ ln(1 - s),   s = ‖a‖²/p
//! ```
//!
//! and its supremum over the ball `‖a‖ ≤ √p`.
//!
//! `f_TAP` depends on `a` only through `s` and the fit `q = ‖y - Xa‖²/p`, so
//! the supremum is a one-dimensional problem: for each `s` the best fit is a
//! ridge-type solution on the sphere `‖a‖² = ps` (a trust-region subproblem,
//! solved exactly in the SVD basis of `X`), and the outer maximization over
//! `s` is a grid scan followed by golden-section refinement. Gradient ascent on
//! `f_TAP` itself is provided as the direct estimator and as a cross-check.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Error, Result};
use crate::linalg;
use crate::model::Instance;

/// Largest `s` considered by the maximizers.
pub const S_CAP: f64 = 1.0 - 1e-6;
pub const DEFAULT_GRID: usize = 512;
pub const DEFAULT_S_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapValue {
    pub value: f64,
    pub term_fit: f64,
    pub term_onsager: f64,
    pub term_volume: f64,
    pub s: f64,
    pub q: f64,
}

/// Onsager correction `-(α/2) ln(1 + (1-s)/(Δα))`.
pub fn onsager_term(s: f64, delta: f64, alpha: f64) -> f64 {
    -0.5 * alpha * ((1.0 - s) / (delta * alpha)).ln_1p()
}

/// Volume (entropy) term `½ ln(1 - s)`.
pub fn volume_term(s: f64) -> f64 {
    0.5 * (-s).ln_1p()
}

/// `f_TAP` from the scalars `(q, s)`.
pub fn tap_from_scalars(q: f64, s: f64, delta: f64, alpha: f64) -> TapValue {
    let term_fit = -q / (2.0 * delta);
    let term_onsager = onsager_term(s, delta, alpha);
    let term_volume = volume_term(s);
    TapValue { value: term_fit + term_onsager + term_volume, term_fit, term_onsager, term_volume, s, q }
}

pub fn tap_value(instance: &Instance, delta: f64, a: &DVector<f64>) -> Result<TapValue> {
    let pf = instance.p() as f64;
    if a.len() != instance.p() {
        return Err(invalid(format!("center has length {}, expected {}", a.len(), instance.p())));
    }
    let s = a.norm_squared() / pf;
    if !(s < 1.0) {
        return Err(Error::Boundary { s });
    }
    let q = (&instance.y - &instance.x * a).norm_squared() / pf;
    Ok(tap_from_scalars(q, s, delta, instance.alpha()))
}

/// `d f_TAP / ds` of the two `s`-dependent terms.
fn radial_slope(s: f64, delta: f64, alpha: f64, with_onsager: bool) -> f64 {
    let ons = if with_onsager { 1.0 / (2.0 * (delta + (1.0 - s) / alpha)) } else { 0.0 };
    ons - 1.0 / (2.0 * (1.0 - s))
}

/// `∇f_TAP(a) = Xᵀ(y - Xa)/(Δp) + (2a/p)·[1/(2(Δ + (1-s)/α)) - 1/(2(1-s))]`.
pub fn tap_gradient(instance: &Instance, delta: f64, a: &DVector<f64>) -> Result<DVector<f64>> {
    let pf = instance.p() as f64;
    let s = a.norm_squared() / pf;
    if !(s < 1.0) {
        return Err(Error::Boundary { s });
    }
    let resid = &instance.y - &instance.x * a;
    let fit = instance.x.transpose() * resid / (delta * pf);
    Ok(fit + a * (2.0 / pf * radial_slope(s, delta, instance.alpha(), true)))
}

/// Thin SVD of `X` with `Xᵀy` expressed in the right-singular basis.
#[derive(Clone, Debug)]
pub struct SvdCache {
    pub singular_values: DVector<f64>,
    /// `cᵢ = (VᵀXᵀy)ᵢ = σᵢ (Uᵀy)ᵢ`.
    pub rotated_field: DVector<f64>,
    pub y_norm_sq: f64,
    u_ty: DVector<f64>,
    v: DMatrix<f64>,
    null_direction: Option<DVector<f64>>,
    p: usize,
}

pub fn build_svd_cache(instance: &Instance) -> Result<SvdCache> {
    let p = instance.p();
    let (u, sigma, v) = linalg::thin_svd(&instance.x)?;
    let u_ty = u.transpose() * &instance.y;
    let rotated_field = sigma.component_mul(&u_ty);
    let null_direction = if p > sigma.len() { Some(null_direction(&v)?) } else { None };
    Ok(SvdCache { singular_values: sigma, rotated_field, y_norm_sq: instance.y.norm_squared(), u_ty, v, null_direction, p })
}

/// A unit vector orthogonal to the columns of `v`: the canonical basis vector
/// with the largest residual after projection, re-orthogonalized.
fn null_direction(v: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = v.nrows();
    let mut best: Option<DVector<f64>> = None;
    let mut best_norm = 0.0;
    for j in 0..p {
        let mut e = DVector::zeros(p);
        e[j] = 1.0;
        let mut r = &e - v * (v.transpose() * &e);
        r -= v * (v.transpose() * &r);
        let nr = r.norm();
        if nr > best_norm + 1e-12 {
            best_norm = nr;
            best = Some(r);
        }
    }
    match best {
        Some(r) if best_norm > 1e-8 => Ok(r / best_norm),
        _ => Err(numerical("could not construct a null-space direction of X")),
    }
}

impl SvdCache {
    pub fn p(&self) -> usize {
        self.p
    }

    /// Minimum of `‖y - Xa‖²/p` over `a` given in the singular basis.
    fn fit_from_coeffs(&self, t: &DVector<f64>) -> f64 {
        let mut acc = self.y_norm_sq - self.u_ty.norm_squared();
        for i in 0..t.len() {
            acc += (self.u_ty[i] - self.singular_values[i] * t[i]).powi(2);
        }
        acc.max(0.0) / self.p as f64
    }

    /// Smallest eigenvalue of `XᵀX` and the index (in the singular basis) of
    /// its direction, `None` when it is a null-space direction.
    fn floor(&self) -> (f64, Option<usize>) {
        let r = self.singular_values.len();
        if self.null_direction.is_some() || r == 0 {
            (0.0, None)
        } else {
            (self.singular_values[r - 1].powi(2), Some(r - 1))
        }
    }
}

#[derive(Clone, Debug)]
pub struct SphereFit {
    pub q_star: f64,
    pub mu: f64,
    pub a: DVector<f64>,
}

/// Minimize `‖y - Xa‖²/p` subject to `‖a‖² = ps`.
///
/// Stationarity gives `tᵢ = cᵢ/(σᵢ² + μ)` in the right-singular basis with
/// `μ > -σ²_floor` (`σ²_floor` the smallest eigenvalue of `XᵀX`, zero when
/// `p > n`). `‖a(μ)‖²` is decreasing in `μ`; if even its limit at the floor
/// is short of `ps`, the multiplier sits at the floor and the remaining norm
/// is added along the floor direction at no extra cost.
pub fn min_fit_on_sphere(cache: &SvdCache, s: f64) -> Result<SphereFit> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Domain(format!("sphere fit needs s in [0, 1), got {s}")));
    }
    let p = cache.p;
    let pf = p as f64;
    let r = cache.singular_values.len();
    if s == 0.0 {
        return Ok(SphereFit { q_star: cache.y_norm_sq / pf, mu: f64::INFINITY, a: DVector::zeros(p) });
    }
    let target = pf * s;
    let sig2: Vec<f64> = cache.singular_values.iter().map(|x| x * x).collect();
    let c = &cache.rotated_field;
    let (floor, floor_idx) = cache.floor();
    let norm_at = |mu: f64| -> f64 {
        (0..r)
            .map(|i| {
                let den = sig2[i] + mu;
                if c[i] == 0.0 {
                    0.0
                } else {
                    (c[i] / den).powi(2)
                }
            })
            .sum()
    };
    let coeffs = |mu: f64| DVector::from_fn(r, |i, _| if c[i] == 0.0 { 0.0 } else { c[i] / (sig2[i] + mu) });

    // limit of ‖a(μ)‖² as μ ↓ -floor
    let pole = (0..r).any(|i| c[i] != 0.0 && sig2[i] - floor <= 0.0);
    let limit = if pole { f64::INFINITY } else { (0..r).filter(|&i| c[i] != 0.0).map(|i| (c[i] / (sig2[i] - floor)).powi(2)).sum() };

    let (mu, t, pad) = if limit >= target {
        let mut lo = -floor;
        let mut hi = -floor + c.norm() / target.sqrt();
        let mut mu = hi;
        for _ in 0..400 {
            mu = 0.5 * (lo + hi);
            let nm = norm_at(mu);
            if (nm - target).abs() <= 1e-10 * pf {
                break;
            }
            if nm > target {
                lo = mu;
            } else {
                hi = mu;
            }
            if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()) {
                break;
            }
        }
        (mu, coeffs(mu), 0.0)
    } else {
        let mu = -floor;
        let t = DVector::from_fn(r, |i, _| if c[i] == 0.0 || sig2[i] - floor <= 0.0 { 0.0 } else { c[i] / (sig2[i] - floor) });
        (mu, t, (target - limit).max(0.0).sqrt())
    };

    let mut a = &cache.v * &t;
    if pad > 0.0 {
        match (&cache.null_direction, floor_idx) {
            (Some(nd), _) => a += nd * pad,
            (None, Some(i)) => a += cache.v.column(i) * pad,
            (None, None) => return Err(numerical("no direction available to pad the sphere fit")),
        }
    }
    let q_star = cache.fit_from_coeffs(&t);
    Ok(SphereFit { q_star, mu, a })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapMethod {
    SvdPath,
    GradientAscent,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TapOptimum {
    #[serde(skip)]
    pub a_star: DVector<f64>,
    pub value: f64,
    pub s_star: f64,
    pub q_star: f64,
    pub mu_star: f64,
    pub terms: TapValue,
    pub method: TapMethod,
    pub iterations: usize,
    /// Grid values of `s` whose profile value is within `1e-6` of the best.
    pub near_optima: Vec<f64>,
}

/// One row of the `s`-profile of the reduced objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub s: f64,
    pub q_star: f64,
    pub term_onsager: f64,
    pub term_volume: f64,
    pub phi: f64,
}

fn profile_point(cache: &SvdCache, s: f64, delta: f64, alpha: f64, with_onsager: bool) -> Result<ProfilePoint> {
    let fit = min_fit_on_sphere(cache, s)?;
    let term_onsager = if with_onsager { onsager_term(s, delta, alpha) } else { 0.0 };
    let term_volume = volume_term(s);
    Ok(ProfilePoint { s, q_star: fit.q_star, term_onsager, term_volume, phi: -fit.q_star / (2.0 * delta) + term_onsager + term_volume })
}

/// `φ(s) = -q*(s)/(2Δ) + onsager(s) + volume(s)` on a uniform grid of
/// `[0, S_CAP]`.
pub fn tap_profile(cache: &SvdCache, delta: f64, alpha: f64, grid_size: usize) -> Result<Vec<ProfilePoint>> {
    scan(cache, delta, alpha, grid_size, true)
}

fn scan(cache: &SvdCache, delta: f64, alpha: f64, grid_size: usize, with_onsager: bool) -> Result<Vec<ProfilePoint>> {
    (0..grid_size).map(|k| profile_point(cache, S_CAP * k as f64 / (grid_size - 1) as f64, delta, alpha, with_onsager)).collect()
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

fn maximize_profile(
    instance: &Instance,
    cache: &SvdCache,
    delta: f64,
    grid_size: usize,
    tol: f64,
    with_onsager: bool,
) -> Result<TapOptimum> {
    if grid_size < 64 {
        return Err(invalid(format!("grid_size must be at least 64, got {grid_size}")));
    }
    let alpha = instance.alpha();
    let grid = scan(cache, delta, alpha, grid_size, with_onsager)?;
    let mut best = 0;
    for (k, pt) in grid.iter().enumerate() {
        // ties within 1e-12 go to the smaller s
        if pt.phi > grid[best].phi + 1e-12 {
            best = k;
        }
    }
    let near_optima: Vec<f64> = grid.iter().filter(|pt| pt.phi >= grid[best].phi - 1e-6).map(|pt| pt.s).collect();

    let phi = |s: f64| profile_point(cache, s, delta, alpha, with_onsager).map(|pt| pt.phi);
    let mut lo = grid[best.saturating_sub(1)].s;
    let mut hi = grid[(best + 1).min(grid_size - 1)].s;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = phi(x1)?;
    let mut f2 = phi(x2)?;
    let mut iterations = 0;
    while hi - lo > tol && iterations < 500 {
        iterations += 1;
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = phi(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = phi(x2)?;
        }
    }
    let (mut s_star, f_star) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    if grid[best].phi > f_star {
        s_star = grid[best].s;
    }
    // Golden section resolves s only to ~√ε; finish on the analytic slope
    // φ'(s) = μ(s)/(2Δ) + (onsager + volume)'(s), from dq*/ds = -μ.
    let slope = |s: f64| -> Result<f64> {
        let fit = min_fit_on_sphere(cache, s)?;
        Ok(fit.mu / (2.0 * delta) + radial_slope(s, delta, alpha, with_onsager))
    };
    let (mut a, mut b) = (grid[best.saturating_sub(1)].s, grid[(best + 1).min(grid_size - 1)].s);
    if a > 0.0 && slope(a)? > 0.0 && slope(b)? < 0.0 {
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            iterations += 1;
            if slope(m)? > 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        // φ is flat to rounding here, so the root wins over value comparison
        s_star = 0.5 * (a + b);
    }
    let fit = min_fit_on_sphere(cache, s_star)?;
    let terms = tap_value(instance, delta, &fit.a)?;
    let value = if with_onsager { terms.value } else { terms.term_fit + terms.term_volume };
    Ok(TapOptimum {
        s_star: terms.s,
        q_star: terms.q,
        value,
        mu_star: fit.mu,
        a_star: fit.a,
        terms,
        method: TapMethod::SvdPath,
        iterations,
        near_optima,
    })
}

/// `sup f_TAP` over the ball via the SVD ridge path.
pub fn sup_tap_svd(instance: &Instance, delta: f64, grid_size: usize, tol: f64) -> Result<TapOptimum> {
    let cache = build_svd_cache(instance)?;
    sup_tap_svd_cached(instance, &cache, delta, grid_size, tol)
}

pub fn sup_tap_svd_cached(instance: &Instance, cache: &SvdCache, delta: f64, grid_size: usize, tol: f64) -> Result<TapOptimum> {
    maximize_profile(instance, cache, delta, grid_size, tol, true)
}

/// Projected gradient ascent with Armijo backtracking.
///
/// Each iteration tries twice the previously accepted step (the first trial
/// is 1.0) and halves until the Armijo condition holds; iterates leaving the
/// ball are pulled back to radius `√(p(1-1e-8))`. Stops when the accepted
/// step times the gradient norm falls below `tol`.
pub fn sup_tap_gradient_ascent(instance: &Instance, delta: f64, a0: &DVector<f64>, max_iters: usize, tol: f64) -> Result<TapOptimum> {
    let p = instance.p();
    let pf = p as f64;
    let r_max = (pf * (1.0 - 1e-8)).sqrt();
    let mut a = a0.clone();
    let mut cur = tap_value(instance, delta, &a)?;
    let mut step: f64 = 0.5;
    let mut iterations = 0;
    let dump = |a: &DVector<f64>| {
        let head: Vec<String> = a.iter().take(4).map(|v| format!("{v:.4e}")).collect();
        format!("‖a‖²/p = {:.6e}, a[..4] = [{}]", a.norm_squared() / pf, head.join(", "))
    };
    while iterations < max_iters {
        iterations += 1;
        let g = tap_gradient(instance, delta, &a)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(numerical(format!("non-finite gradient at iteration {iterations}: {}", dump(&a))));
        }
        let gnorm = g.norm();
        let mut t = (2.0 * step).min(1e12);
        let mut accepted = None;
        for _ in 0..80 {
            let mut cand = &a + &g * t;
            let nc = cand.norm();
            if nc > r_max {
                cand *= r_max / nc;
            }
            match tap_value(instance, delta, &cand) {
                Ok(v) => {
                    if !v.value.is_finite() {
                        return Err(numerical(format!("non-finite objective at iteration {iterations}: {}", dump(&cand))));
                    }
                    let gain = g.dot(&(&cand - &a));
                    if v.value >= cur.value + 1e-4 * gain {
                        accepted = Some((cand, v));
                        break;
                    }
                }
                Err(Error::Boundary { .. }) => {}
                Err(e) => return Err(e),
            }
            t *= 0.5;
        }
        let Some((cand, v)) = accepted else { break };
        let moved = (&cand - &a).norm();
        a = cand;
        cur = v;
        step = t;
        if t * gnorm < tol || moved < tol {
            break;
        }
    }
    Ok(TapOptimum {
        value: cur.value,
        s_star: cur.s,
        q_star: cur.q,
        mu_star: f64::NAN,
        a_star: a,
        terms: cur,
        method: TapMethod::GradientAscent,
        iterations,
        near_optima: Vec::new(),
    })
}

/// `sup f_TAP - sup f_noons` where `f_noons` drops the Onsager term.
pub fn onsager_gap(instance: &Instance, delta: f64) -> Result<f64> {
    Ok(onsager_gap_detail(instance, delta)?.gap)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OnsagerGap {
    pub gap: f64,
    pub sup_tap: f64,
    pub sup_noons: f64,
    pub s_tap: f64,
    pub s_noons: f64,
    /// `-(α/2) ln(1 + (1-s*)/(Δα))` at the TAP maximizer.
    pub reference: f64,
}

pub fn onsager_gap_detail(instance: &Instance, delta: f64) -> Result<OnsagerGap> {
    let cache = build_svd_cache(instance)?;
    let tap = maximize_profile(instance, &cache, delta, DEFAULT_GRID, DEFAULT_S_TOL, true)?;
    let noons = maximize_profile(instance, &cache, delta, DEFAULT_GRID, DEFAULT_S_TOL, false)?;
    Ok(OnsagerGap {
        gap: tap.value - noons.value,
        sup_tap: tap.value,
        sup_noons: noons.value,
        s_tap: tap.s_star,
        s_noons: noons.s_star,
        reference: onsager_term(tap.s_star, delta, instance.alpha()),
    })
}
