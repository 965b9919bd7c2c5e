//! WebAssembly bindings for the browser demo. Each entry point draws an
//! instance from its seed and returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use tapsphere::model::{generate_instance, Instance, ModelConfig};
use tapsphere::{oracle, spectra, tap};

fn js(e: tapsphere::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn instance(p: usize, alpha: f64, delta: f64, seed: u64) -> Result<Instance, tapsphere::error::Error> {
    generate_instance(&ModelConfig::from_alpha(p, alpha, delta, seed)?)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[derive(Serialize)]
struct TapCurve {
    s: Vec<f64>,
    phi: Vec<f64>,
    phi_naive: Vec<f64>,
    s_star: f64,
    sup_tap: f64,
    s_naive: f64,
    sup_naive: f64,
    free_energy: f64,
}

/// TAP profile `φ(s)` with and without the Onsager term, plus the exact
/// free energy for comparison.
#[wasm_bindgen]
pub fn tap_curve(p: usize, alpha: f64, delta: f64, seed: u64, grid: usize) -> Result<String, JsError> {
    let inst = instance(p, alpha, delta, seed).map_err(js)?;
    let cache = tap::build_svd_cache(&inst).map_err(js)?;
    let pts = tap::tap_profile(&cache, delta, inst.alpha(), grid.max(16)).map_err(js)?;
    let gap = tap::onsager_gap_detail(&inst, delta).map_err(js)?;
    let f = oracle::log_partition_saddle(&oracle::reduce_to_quadratic(&inst, delta).map_err(js)?).map_err(js)?;
    to_json(&TapCurve {
        s: pts.iter().map(|q| q.s).collect(),
        phi: pts.iter().map(|q| q.phi).collect(),
        phi_naive: pts.iter().map(|q| q.phi - q.term_onsager).collect(),
        s_star: gap.s_tap,
        sup_tap: gap.sup_tap,
        s_naive: gap.s_noons,
        sup_naive: gap.sup_noons,
        free_energy: f.value,
    })
}

#[derive(Serialize)]
struct Histogram {
    left: Vec<f64>,
    right: Vec<f64>,
    empirical: Vec<f64>,
    mp: Vec<f64>,
    ks: f64,
    sigma_max: f64,
    edge: f64,
}

/// Eigenvalue histogram of `XᵀX` against the Marchenko–Pastur law.
#[wasm_bindgen]
pub fn mp_histogram(p: usize, alpha: f64, seed: u64, bins: usize) -> Result<String, JsError> {
    let inst = instance(p, alpha, 1.0, seed).map_err(js)?;
    let rep = spectra::mp_diagnostics(&inst).map_err(js)?;
    let h = spectra::mp_histogram(&rep, bins.max(2)).map_err(js)?;
    to_json(&Histogram {
        left: h.iter().map(|b| b.0).collect(),
        right: h.iter().map(|b| b.1).collect(),
        empirical: h.iter().map(|b| b.2).collect(),
        mp: h.iter().map(|b| b.3).collect(),
        ks: rep.mp_ks_distance,
        sigma_max: rep.sigma_max,
        edge: 1.0 + alpha.recip().sqrt(),
    })
}

#[derive(Serialize)]
struct Restricted {
    delta_align: Vec<f64>,
    value: Vec<f64>,
    argmax: f64,
    free_energy: f64,
    integrated: f64,
}

/// Restricted free energy `f_p(δ)` across the alignment grid.
#[wasm_bindgen]
pub fn restricted_curve(p: usize, alpha: f64, delta: f64, seed: u64, points: usize) -> Result<String, JsError> {
    let inst = instance(p, alpha, delta, seed).map_err(js)?;
    let prof = oracle::RestrictedProfile::new(&inst, delta, oracle::SideChannel::Off).map_err(js)?;
    let grid = prof.grid(oracle::RESTRICTED_GRID_LIMIT, points.max(3)).map_err(js)?;
    let best = grid.iter().max_by(|a, b| a.value.total_cmp(&b.value)).expect("nonempty grid");
    let f = oracle::log_partition_saddle(&oracle::reduce_to_quadratic(&inst, delta).map_err(js)?).map_err(js)?;
    to_json(&Restricted {
        delta_align: grid.iter().map(|t| t.delta_align).collect(),
        value: grid.iter().map(|t| t.value).collect(),
        argmax: best.delta_align,
        free_energy: f.value,
        integrated: oracle::RestrictedProfile::integrate(&grid, p),
    })
}
