//! Named experiments, seed sweeps and result persistence.
//!
//! An experiment expands its spec into tasks, one per `(p, Δ, α, seed)` cell
//! (the overlap-concentration sweep handles its `p` list inside one task).
//! Tasks are pure functions of their cell and run on a pool of `workers`
//! threads; a single writer emits rows in task-id order as soon as the
//! preceding tasks are done, so the output bytes and their digest do not
//! depend on the worker count, and an interrupted run keeps every completed
//! prefix. Every row starts with the provenance columns
//! `experiment, row_kind, task_id, p, n, delta, alpha, seed, status`.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::io::{Cell, Format, Table, TableWriter};
use crate::model::{self, Instance, ModelConfig, PerturbationConfig};
use crate::oracle::{self, SideChannel, SpanPolicy};
use crate::rng;
use crate::sampler::{self, ChainConfig, SweepOptions, Target};
use crate::spectra;
use crate::tap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    #[serde(rename = "theorem1-gap")]
    Theorem1Gap,
    BandDecomposition,
    OverlapConcentration,
    AnnealedChecks,
    RestrictedProfile,
    OnsagerGap,
    SpectraReport,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 7] = [
        ExperimentName::Theorem1Gap,
        ExperimentName::BandDecomposition,
        ExperimentName::OverlapConcentration,
        ExperimentName::AnnealedChecks,
        ExperimentName::RestrictedProfile,
        ExperimentName::OnsagerGap,
        ExperimentName::SpectraReport,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::Theorem1Gap => "theorem1-gap",
            ExperimentName::BandDecomposition => "band-decomposition",
            ExperimentName::OverlapConcentration => "overlap-concentration",
            ExperimentName::AnnealedChecks => "annealed-checks",
            ExperimentName::RestrictedProfile => "restricted-profile",
            ExperimentName::OnsagerGap => "onsager-gap",
            ExperimentName::SpectraReport => "spectra-report",
        }
    }
}

impl std::fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExperimentName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL.iter().copied().find(|n| n.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = ExperimentName::ALL.iter().map(|n| n.as_str()).collect();
            invalid(format!("unknown experiment '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

/// Knobs shared by the experiments; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentParams {
    pub grid_size: usize,
    pub tap_tol: f64,
    pub chains: usize,
    pub retained: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub target_accept: f64,
    pub disorder_draws: usize,
    pub lambda0_draws: usize,
    pub lambda0: f64,
    pub eps_band: f64,
    pub band_samples: usize,
    pub mc_disorder_draws: usize,
    pub mc_max_p: usize,
    pub restricted_points: usize,
    pub r1star_tolerance: f64,
    pub inject_degenerate: bool,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            grid_size: tap::DEFAULT_GRID,
            tap_tol: tap::DEFAULT_S_TOL,
            chains: 4,
            retained: 2000,
            burn_in: 2000,
            thin: 10,
            target_accept: 0.3,
            disorder_draws: 8,
            lambda0_draws: 2,
            lambda0: 0.75,
            eps_band: 0.05,
            band_samples: 2_000_000,
            mc_disorder_draws: 10_000,
            mc_max_p: 30,
            restricted_points: oracle::RESTRICTED_GRID_POINTS,
            r1star_tolerance: 0.05,
            inject_degenerate: false,
        }
    }
}

impl ExperimentParams {
    fn chain(&self, seed: u64) -> ChainConfig {
        ChainConfig { target_accept: self.target_accept, ..ChainConfig::with_retained(self.retained, self.burn_in, self.thin, seed) }
    }
}

fn one() -> usize {
    1
}

fn csv_format() -> Format {
    Format::Csv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    pub p: Vec<usize>,
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub output_path: Option<String>,
    #[serde(default = "csv_format")]
    pub format: Format,
    #[serde(default)]
    pub params: ExperimentParams,
}

impl ExperimentSpec {
    /// Default grid for each experiment.
    pub fn preset(name: ExperimentName) -> Self {
        let seeds = |k: u64| (0..k).collect::<Vec<u64>>();
        let (p, delta, alpha, s) = match name {
            ExperimentName::Theorem1Gap | ExperimentName::OnsagerGap => {
                (vec![100, 200, 400], vec![5.0, 10.0, 20.0], vec![1.0, 2.0, 4.0], seeds(20))
            }
            ExperimentName::BandDecomposition => (vec![120], vec![10.0], vec![2.0], seeds(10)),
            ExperimentName::OverlapConcentration => (vec![50, 100, 200], vec![10.0], vec![2.0], seeds(1)),
            ExperimentName::AnnealedChecks => (vec![15, 50, 100, 200, 400], vec![10.0], vec![2.0], seeds(1)),
            ExperimentName::RestrictedProfile => (vec![200], vec![10.0], vec![2.0], seeds(5)),
            ExperimentName::SpectraReport => (vec![100, 200, 400, 800], vec![10.0], vec![2.0], seeds(10)),
        };
        ExperimentSpec {
            name,
            p,
            delta,
            alpha,
            seeds: s,
            workers: 1,
            output_path: None,
            format: Format::Csv,
            params: ExperimentParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.is_empty() || self.delta.is_empty() || self.alpha.is_empty() || self.seeds.is_empty() {
            return Err(invalid("experiment ranges for p, delta, alpha and seeds must be nonempty"));
        }
        if self.workers == 0 {
            return Err(invalid("workers must be at least 1"));
        }
        for &p in &self.p {
            for &a in &self.alpha {
                for &d in &self.delta {
                    ModelConfig::from_alpha(p, a, d, 0)?;
                }
            }
        }
        if self.name == ExperimentName::Theorem1Gap {
            for &d in &self.delta {
                for &a in &self.alpha {
                    if !oracle::is_high_temperature(a, d) {
                        return Err(invalid(format!(
                            "theorem1-gap needs the high-temperature regime; C_Q = {} at delta = {d}, alpha = {a}",
                            oracle::c_q(a, d)
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One unit of work. `p` is `None` when the task covers the whole `p` list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub p: Option<usize>,
    pub delta: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Task {
    fn n(&self, p: usize) -> usize {
        (self.alpha * p as f64).round() as usize
    }

    /// Seed of the instance drawn by this task for dimension `p`. Shared
    /// across `Δ` so cells that differ only in `Δ` see the same draws.
    pub fn instance_seed(&self, name: ExperimentName, p: usize) -> u64 {
        rng::derive_seed(self.seed, &[rng::label(name.as_str()), p as u64, self.n(p) as u64])
    }

    fn instance(&self, name: ExperimentName, p: usize) -> Result<Instance> {
        model::generate_instance(&ModelConfig::from_alpha(p, self.alpha, self.delta, self.instance_seed(name, p))?)
    }
}

pub fn build_tasks(spec: &ExperimentSpec) -> Vec<Task> {
    let mut out = Vec::new();
    let ps: Vec<Option<usize>> =
        if spec.name == ExperimentName::OverlapConcentration { vec![None] } else { spec.p.iter().map(|&p| Some(p)).collect() };
    for &p in &ps {
        for &delta in &spec.delta {
            for &alpha in &spec.alpha {
                for &seed in &spec.seeds {
                    out.push(Task { id: out.len(), p, delta, alpha, seed });
                }
            }
        }
    }
    out
}

pub const PROVENANCE: [&str; 9] = ["experiment", "row_kind", "task_id", "p", "n", "delta", "alpha", "seed", "status"];

pub fn value_columns(name: ExperimentName) -> &'static [&'static str] {
    match name {
        ExperimentName::Theorem1Gap => &["F_p", "sup_tap", "gap", "s_star", "out_of_model", "gap_median", "gap_p90", "trend_decreasing"],
        ExperimentName::BandDecomposition => &[
            "s_star",
            "tap_value",
            "fit",
            "onsager",
            "volume",
            "band_total",
            "mc_value",
            "reference",
            "mc_se",
            "c_bound",
            "accepted",
            "pass",
        ],
        ExperimentName::OverlapConcentration => &[
            "eps_p",
            "estimate",
            "se",
            "posterior_var",
            "fixed_lambda_estimate",
            "max_perturbation_shift",
            "perturbation_ok",
            "samples",
            "trend_ok",
        ],
        ExperimentName::AnnealedChecks => &[
            "annealed_phi",
            "mc_phi",
            "mc_se",
            "z_score",
            "log_gamma0_over_p",
            "ln4_over_p",
            "cq",
            "high_temperature",
            "gamma0_decreasing",
            "gamma0_above_floor",
        ],
        ExperimentName::RestrictedProfile => {
            &["delta_align", "f_p", "argmax", "F_integrated", "F_saddle", "r1star", "r1star_se", "argmax_gap", "pass"]
        }
        ExperimentName::OnsagerGap => &["gap", "sup_tap", "sup_noons", "s_tap", "s_noons", "reference", "gap_minus_reference"],
        ExperimentName::SpectraReport => {
            &["sigma_max", "edge_deviation", "mp_ks_distance", "quantile_deviation", "zero_eigenvalues", "in_good_set"]
        }
    }
}

pub fn columns(name: ExperimentName) -> Vec<String> {
    PROVENANCE.iter().chain(value_columns(name)).map(|s| s.to_string()).collect()
}

/// A row produced by a task, before the provenance columns are added.
#[derive(Clone, Debug)]
pub struct TaskRow {
    pub kind: &'static str,
    pub p: usize,
    pub values: Vec<(&'static str, Cell)>,
}

impl TaskRow {
    fn new(kind: &'static str, p: usize, values: Vec<(&'static str, Cell)>) -> Self {
        TaskRow { kind, p, values }
    }

    pub fn get(&self, col: &str) -> Option<f64> {
        self.values.iter().find(|(c, _)| *c == col).and_then(|(_, v)| v.as_f64())
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    name: ExperimentName,
    task_id: Option<usize>,
    p: usize,
    n: usize,
    delta: f64,
    alpha: f64,
    seed: Cell,
    kind: &str,
    status: &str,
    values: &[(&'static str, Cell)],
) -> Vec<Cell> {
    let mut row = vec![
        Cell::from(name.as_str()),
        Cell::from(kind),
        task_id.map(Cell::from).unwrap_or(Cell::Empty),
        Cell::from(p),
        Cell::from(n),
        Cell::from(delta),
        Cell::from(alpha),
        seed,
        Cell::from(status),
    ];
    for col in value_columns(name) {
        row.push(values.iter().find(|(c, _)| c == col).map(|(_, v)| v.clone()).unwrap_or(Cell::Empty));
    }
    row
}

fn run_task(name: ExperimentName, spec: &ExperimentSpec, task: &Task) -> Result<Vec<TaskRow>> {
    let pr = &spec.params;
    match name {
        ExperimentName::Theorem1Gap => {
            let p = task.p.expect("per-p task");
            let inst = task.instance(name, p)?;
            let f = oracle::log_partition_saddle(&oracle::reduce_to_quadratic(&inst, task.delta)?)?.value;
            let opt = tap::sup_tap_svd(&inst, task.delta, pr.grid_size, pr.tap_tol)?;
            Ok(vec![TaskRow::new(
                "task",
                p,
                vec![
                    ("F_p", f.into()),
                    ("sup_tap", opt.value.into()),
                    ("gap", (f - opt.value).abs().into()),
                    ("s_star", opt.s_star.into()),
                    ("out_of_model", false.into()),
                ],
            )])
        }
        ExperimentName::BandDecomposition => {
            let p = task.p.expect("per-p task");
            let inst = task.instance(name, p)?;
            let opt = tap::sup_tap_svd(&inst, task.delta, pr.grid_size, pr.tap_tol)?;
            let terms = oracle::band_free_energy_with(&inst, task.delta, &opt.a_star, SpanPolicy::Collapse)?;
            let mc = sampler::band_mc_check(&inst, task.delta, &opt.a_star, pr.eps_band, pr.band_samples)?;
            Ok(vec![TaskRow::new(
                "task",
                p,
                vec![
                    ("s_star", opt.s_star.into()),
                    ("tap_value", opt.value.into()),
                    ("fit", terms.recentered_fit.into()),
                    ("onsager", terms.onsager_term.into()),
                    ("volume", terms.volume_term.into()),
                    ("band_total", terms.total().into()),
                    ("mc_value", mc.mc_value.into()),
                    ("reference", mc.reference.into()),
                    ("mc_se", mc.se.into()),
                    ("c_bound", mc.c_bound.into()),
                    ("accepted", mc.accepted.into()),
                    ("pass", mc.pass.into()),
                ],
            )])
        }
        ExperimentName::OverlapConcentration => {
            let base_seed = rng::derive_seed(task.seed, &[rng::label(name.as_str())]);
            let pcfg = PerturbationConfig::new(pr.lambda0, 0.5, base_seed)?;
            let opts = SweepOptions {
                disorder_draws: pr.disorder_draws,
                lambda0_draws: pr.lambda0_draws,
                num_chains: pr.chains,
                compare_fixed_lambda: true,
            };
            let rows = sampler::overlap_concentration_sweep(task.alpha, task.delta, &spec.p, &pcfg, &pr.chain(base_seed), &opts)?;
            let trend = sampler::concentration_trend_ok(&rows);
            Ok(rows
                .iter()
                .map(|r| {
                    TaskRow::new(
                        "task",
                        r.p,
                        vec![
                            ("eps_p", r.eps_p.into()),
                            ("estimate", r.estimate.into()),
                            ("se", r.se.into()),
                            ("posterior_var", r.posterior_var.into()),
                            ("fixed_lambda_estimate", r.fixed_lambda_estimate.into()),
                            ("max_perturbation_shift", r.max_perturbation_shift.into()),
                            ("perturbation_ok", (r.max_perturbation_shift <= 2.0 * r.eps_p).into()),
                            ("samples", r.samples.into()),
                            ("trend_ok", trend.into()),
                        ],
                    )
                })
                .collect())
        }
        ExperimentName::AnnealedChecks => {
            let p = task.p.expect("per-p task");
            let n = task.n(p);
            let rep = oracle::annealed_second_moment(p, n, task.delta)?;
            let mut values = vec![
                ("annealed_phi", rep.annealed_phi.into()),
                ("log_gamma0_over_p", rep.log_gamma0_over_p.into()),
                ("ln4_over_p", (4f64.ln() / p as f64).into()),
                ("cq", rep.cq.into()),
                ("high_temperature", rep.high_temperature.into()),
            ];
            if p <= pr.mc_max_p {
                let (mc, se) = annealed_mc(p, n, task.delta, pr.mc_disorder_draws, task.instance_seed(name, p))?;
                values.push(("mc_phi", mc.into()));
                values.push(("mc_se", se.into()));
                values.push(("z_score", ((mc - rep.annealed_phi) / se).into()));
            }
            Ok(vec![TaskRow::new("task", p, values)])
        }
        ExperimentName::RestrictedProfile => {
            let p = task.p.expect("per-p task");
            let inst = task.instance(name, p)?;
            let prof = oracle::RestrictedProfile::new(&inst, task.delta, SideChannel::Off)?;
            let grid = prof.grid(oracle::RESTRICTED_GRID_LIMIT, pr.restricted_points)?;
            let best = grid.iter().max_by(|a, b| a.value.total_cmp(&b.value)).expect("nonempty grid");
            let f_int = oracle::RestrictedProfile::integrate(&grid, p);
            let f_saddle = oracle::log_partition_saddle(&oracle::reduce_to_quadratic(&inst, task.delta)?)?.value;
            let chain_seed = rng::derive_seed(task.instance_seed(name, p), &[rng::label("chains")]);
            let reps = sampler::mcmc_posterior(Target::Base(&inst), task.delta, &pr.chain(chain_seed), pr.chains)?;
            let st = sampler::overlap_stats(&reps, &inst.beta0)?;
            let gap = (st.mean_r1star - best.delta_align).abs();
            let mut rows: Vec<TaskRow> = grid
                .iter()
                .map(|t| TaskRow::new("grid", p, vec![("delta_align", t.delta_align.into()), ("f_p", t.value.into())]))
                .collect();
            rows.push(TaskRow::new(
                "task",
                p,
                vec![
                    ("argmax", best.delta_align.into()),
                    ("F_integrated", f_int.into()),
                    ("F_saddle", f_saddle.into()),
                    ("r1star", st.mean_r1star.into()),
                    ("r1star_se", st.se_r1star.into()),
                    ("argmax_gap", gap.into()),
                    ("pass", (gap <= pr.r1star_tolerance).into()),
                ],
            ));
            Ok(rows)
        }
        ExperimentName::OnsagerGap => {
            let p = task.p.expect("per-p task");
            let inst = task.instance(name, p)?;
            let g = tap::onsager_gap_detail(&inst, task.delta)?;
            Ok(vec![TaskRow::new(
                "task",
                p,
                vec![
                    ("gap", g.gap.into()),
                    ("sup_tap", g.sup_tap.into()),
                    ("sup_noons", g.sup_noons.into()),
                    ("s_tap", g.s_tap.into()),
                    ("s_noons", g.s_noons.into()),
                    ("reference", g.reference.into()),
                    ("gap_minus_reference", (g.gap - g.reference).into()),
                ],
            )])
        }
        ExperimentName::SpectraReport => {
            let p = task.p.expect("per-p task");
            let inst = task.instance(name, p)?;
            let r = spectra::mp_diagnostics(&inst)?;
            let edge = (1.0 + (p as f64 / inst.n() as f64).sqrt()).powi(2);
            Ok(vec![TaskRow::new(
                "task",
                p,
                vec![
                    ("sigma_max", r.sigma_max.into()),
                    ("edge_deviation", (r.sigma_max.powi(2) - edge).into()),
                    ("mp_ks_distance", r.mp_ks_distance.into()),
                    ("quantile_deviation", r.quantile_deviation.into()),
                    ("zero_eigenvalues", r.zero_eigenvalues.into()),
                    ("in_good_set", r.in_good_set.into()),
                ],
            )])
        }
    }
}

/// Brute-force `(1/p) ln E_X E_β exp(-‖Xβ‖²/(2Δ))` with its delta-method
/// standard error.
pub fn annealed_mc(p: usize, n: usize, delta: f64, draws: usize, seed: u64) -> Result<(f64, f64)> {
    if draws < 2 {
        return Err(invalid("need at least 2 disorder draws"));
    }
    let blocks = 16usize;
    let sums: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, &[rng::label("harness.annealed"), b as u64]);
            let sd = (1.0 / n as f64).sqrt();
            let count = draws / blocks + usize::from(b < draws % blocks);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let x = nalgebra::DMatrix::from_fn(n, p, |_, _| sd * r.sample::<f64, _>(rand_distr::StandardNormal));
                let beta = model::sample_uniform_sphere(p, (p as f64).sqrt(), &mut r);
                let z = (-(&x * beta).norm_squared() / (2.0 * delta)).exp();
                s += z;
                s2 += z * z;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let k = draws as f64;
    let mean = s / k;
    let var = (s2 / k - mean * mean).max(0.0) * k / (k - 1.0);
    let pf = p as f64;
    Ok((mean.ln() / pf, (var / k).sqrt() / mean / pf))
}

fn median(v: &mut [f64]) -> f64 {
    quantile(v, 0.5)
}

/// Linear-interpolation quantile.
fn quantile(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let h = q * (v.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

type Completed = (Task, Vec<TaskRow>);

fn summarize(name: ExperimentName, spec: &ExperimentSpec, done: &[Completed]) -> Vec<Vec<Cell>> {
    let mut out = Vec::new();
    let group = |p: usize, d: f64, a: f64| {
        done.iter()
            .filter(move |(t, _)| t.delta == d && t.alpha == a)
            .flat_map(move |(_, rows)| rows.iter().filter(move |r| r.p == p && r.kind == "task"))
    };
    match name {
        ExperimentName::Theorem1Gap => {
            for &d in &spec.delta {
                for &a in &spec.alpha {
                    let meds: Vec<f64> =
                        spec.p.iter().map(|&p| median(&mut group(p, d, a).filter_map(|r| r.get("gap")).collect::<Vec<_>>())).collect();
                    let decreasing = meds.windows(2).all(|w| w[1] < w[0]);
                    for (k, &p) in spec.p.iter().enumerate() {
                        let mut gaps: Vec<f64> = group(p, d, a).filter_map(|r| r.get("gap")).collect();
                        let n = (a * p as f64).round() as usize;
                        let vals = vec![
                            ("gap_median", Cell::from(meds[k])),
                            ("gap_p90", Cell::from(quantile(&mut gaps, 0.9))),
                            ("trend_decreasing", Cell::from(decreasing)),
                        ];
                        out.push(assemble(name, None, p, n, d, a, Cell::from("all"), "summary", "ok", &vals));
                        if spec.params.inject_degenerate {
                            // X = 0, y = 0 gives F_p = 0 exactly
                            let ctl = degenerate_instance(p, a, d)
                                .and_then(|inst| tap::sup_tap_svd(&inst, d, spec.params.grid_size, spec.params.tap_tol));
                            match ctl {
                                Ok(opt) => {
                                    let vals = vec![
                                        ("F_p", Cell::from(0.0)),
                                        ("sup_tap", Cell::from(opt.value)),
                                        ("gap", Cell::from(opt.value.abs())),
                                        ("s_star", Cell::from(opt.s_star)),
                                        ("out_of_model", Cell::from(true)),
                                    ];
                                    out.push(assemble(name, None, p, n, d, a, Cell::from("degenerate"), "control", "ok", &vals));
                                }
                                Err(e) => {
                                    let status = format!("failed: {e}");
                                    out.push(assemble(name, None, p, n, d, a, Cell::from("degenerate"), "control", &status, &[]));
                                }
                            }
                        }
                    }
                }
            }
        }
        ExperimentName::AnnealedChecks => {
            for &d in &spec.delta {
                for &a in &spec.alpha {
                    let g: Vec<(usize, f64)> = spec
                        .p
                        .iter()
                        .filter_map(|&p| group(p, d, a).next().and_then(|r| r.get("log_gamma0_over_p")).map(|v| (p, v)))
                        .collect();
                    let decreasing = g.windows(2).all(|w| w[1].1 < w[0].1);
                    let floor = g.iter().all(|(p, v)| *v >= 4f64.ln() / *p as f64);
                    for &(p, _) in &g {
                        let n = (a * p as f64).round() as usize;
                        let vals = vec![("gamma0_decreasing", Cell::from(decreasing)), ("gamma0_above_floor", Cell::from(floor))];
                        out.push(assemble(name, None, p, n, d, a, Cell::from("all"), "summary", "ok", &vals));
                    }
                }
            }
        }
        _ => {}
    }
    out
}

/// Per-task seed record for the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSeed {
    pub task_id: usize,
    pub p: Option<usize>,
    pub delta: f64,
    pub alpha: f64,
    pub seed: u64,
    pub instance_seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task_id: usize,
    pub message: String,
    pub numerical: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: ExperimentSpec,
    pub code_version: String,
    pub task_seeds: Vec<TaskSeed>,
    pub wall_time_secs: f64,
    /// First 8 bytes of the SHA-256 of the output, as 16 hex digits.
    pub results_digest: String,
    pub rows: usize,
    pub failures: Vec<TaskFailure>,
}

struct DigestWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for DigestWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// 64-bit digest of `bytes` as 16 hex digits (the first 8 bytes of SHA-256).
pub fn digest_hex(bytes: &[u8]) -> String {
    hex8(&Sha256::digest(bytes))
}

fn hex8(d: &[u8]) -> String {
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub struct RunOutput<W> {
    pub manifest: RunManifest,
    pub table: Table,
    pub sink: W,
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "task panicked".into())
}

/// Run `spec`, streaming rows to `sink` in the spec's format.
pub fn run_experiment<W: Write>(spec: &ExperimentSpec, sink: W) -> Result<RunOutput<W>> {
    spec.validate()?;
    let start = Instant::now();
    let name = spec.name;
    let tasks = build_tasks(spec);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build a pool of {} workers: {e}", spec.workers)))?;
    let mut writer = TableWriter::new(columns(name), spec.format, DigestWriter { inner: sink, hasher: Sha256::new() })?;
    let mut table = Table { columns: columns(name), rows: Vec::new() };
    let mut failures = Vec::new();
    let mut done: Vec<Completed> = Vec::new();
    let emit = |row: Vec<Cell>, table: &mut Table, writer: &mut TableWriter<DigestWriter<W>>| -> Result<()> {
        writer.write_row(&row)?;
        table.rows.push(row);
        Ok(())
    };

    let (tx, rx) = mpsc::channel::<(usize, std::result::Result<Vec<TaskRow>, (String, bool)>)>();
    let write_result: Result<()> = std::thread::scope(|scope| {
        let tasks_ref = &tasks;
        scope.spawn(move || {
            pool.install(|| {
                tasks_ref.par_iter().for_each_with(tx, |tx, t| {
                    let r = match catch_unwind(AssertUnwindSafe(|| run_task(name, spec, t))) {
                        Ok(Ok(rows)) => Ok(rows),
                        Ok(Err(e)) => Err((e.to_string(), e.is_numerical())),
                        Err(p) => Err((panic_message(p), false)),
                    };
                    let _ = tx.send((t.id, r));
                })
            })
        });
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (id, r) in rx {
            pending.insert(id, r);
            while let Some(r) = pending.remove(&next) {
                let t = &tasks[next];
                match r {
                    Ok(rows) => {
                        for row in &rows {
                            let cells = assemble(
                                name,
                                Some(t.id),
                                row.p,
                                t.n(row.p),
                                t.delta,
                                t.alpha,
                                Cell::from(t.seed),
                                row.kind,
                                "ok",
                                &row.values,
                            );
                            emit(cells, &mut table, &mut writer)?;
                        }
                        done.push((t.clone(), rows));
                    }
                    Err((message, numerical)) => {
                        log::error!("task {} failed: {message}", t.id);
                        let p = t.p.unwrap_or(0);
                        let status = format!("failed: {message}");
                        let cells = assemble(name, Some(t.id), p, t.n(p), t.delta, t.alpha, Cell::from(t.seed), "task", &status, &[]);
                        emit(cells, &mut table, &mut writer)?;
                        failures.push(TaskFailure { task_id: t.id, message, numerical });
                    }
                }
                next += 1;
            }
        }
        Ok(())
    });
    write_result?;
    for row in summarize(name, spec, &done) {
        emit(row, &mut table, &mut writer)?;
    }
    let dw = writer.finish()?;
    let results_digest = hex8(&dw.hasher.finalize());
    let task_seeds = tasks
        .iter()
        .map(|t| TaskSeed {
            task_id: t.id,
            p: t.p,
            delta: t.delta,
            alpha: t.alpha,
            seed: t.seed,
            instance_seed: t.p.map(|p| t.instance_seed(name, p)),
        })
        .collect();
    let manifest = RunManifest {
        spec: spec.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        task_seeds,
        wall_time_secs: start.elapsed().as_secs_f64(),
        results_digest,
        rows: table.rows.len(),
        failures,
    };
    Ok(RunOutput { manifest, table, sink: dw.inner })
}

/// Run into memory.
pub fn run_in_memory(spec: &ExperimentSpec) -> Result<RunOutput<Vec<u8>>> {
    run_experiment(spec, Vec::new())
}

fn run_named(name: ExperimentName, spec: &ExperimentSpec) -> Result<RunOutput<Vec<u8>>> {
    if spec.name != name {
        return Err(invalid(format!("spec is for {}, not {name}", spec.name)));
    }
    run_in_memory(spec)
}

pub fn run_theorem1_gap(spec: &ExperimentSpec) -> Result<RunOutput<Vec<u8>>> {
    run_named(ExperimentName::Theorem1Gap, spec)
}
pub fn run_band_decomposition(spec: &ExperimentSpec) -> Result<RunOutput<Vec<u8>>> {
    run_named(ExperimentName::BandDecomposition, spec)
}
pub fn run_overlap_concentration(spec: &ExperimentSpec) -> Result<RunOutput<Vec<u8>>> {
    run_named(ExperimentName::OverlapConcentration, spec)
}
pub fn run_annealed_checks(spec: &ExperimentSpec) -> Result<RunOutput<Vec<u8>>> {
    run_named(ExperimentName::AnnealedChecks, spec)
}
pub fn run_restricted_profile(spec: &ExperimentSpec) -> Result<RunOutput<Vec<u8>>> {
    run_named(ExperimentName::RestrictedProfile, spec)
}
pub fn run_onsager_gap(spec: &ExperimentSpec) -> Result<RunOutput<Vec<u8>>> {
    run_named(ExperimentName::OnsagerGap, spec)
}
pub fn run_spectra_report(spec: &ExperimentSpec) -> Result<RunOutput<Vec<u8>>> {
    run_named(ExperimentName::SpectraReport, spec)
}

/// Zero design and zero response, for out-of-model controls.
pub fn degenerate_instance(p: usize, alpha: f64, delta: f64) -> Result<Instance> {
    let cfg = ModelConfig::from_alpha(p, alpha, delta, 0)?;
    let base = model::generate_instance(&cfg)?;
    Instance::from_parts(cfg, nalgebra::DMatrix::zeros(cfg.n, p), base.beta0, DVector::zeros(cfg.n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for n in ExperimentName::ALL {
            assert_eq!(n.as_str().parse::<ExperimentName>().unwrap(), n);
            let j = serde_json::to_string(&n).unwrap();
            assert_eq!(j, format!("\"{}\"", n.as_str()));
        }
        assert!("nope".parse::<ExperimentName>().is_err());
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((quantile(&mut [0.0, 10.0], 0.9) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn spec_json_uses_defaults() {
        let s: ExperimentSpec = serde_json::from_str(r#"{"name":"onsager-gap","p":[20],"delta":[10],"alpha":[2],"seeds":[1,2]}"#).unwrap();
        assert_eq!(s.workers, 1);
        assert_eq!(s.format, Format::Csv);
        assert_eq!(s.params.grid_size, tap::DEFAULT_GRID);
        assert_eq!(build_tasks(&s).len(), 2);
    }

    #[test]
    fn presets_validate() {
        for name in ExperimentName::ALL {
            ExperimentSpec::preset(name).validate().unwrap();
        }
    }

    #[test]
    fn low_temperature_is_refused() {
        let mut s = ExperimentSpec::preset(ExperimentName::Theorem1Gap);
        s.delta = vec![0.01];
        let e = s.validate().unwrap_err().to_string();
        assert!(e.contains("C_Q"), "{e}");
    }

    fn small(name: ExperimentName) -> ExperimentSpec {
        let mut s = ExperimentSpec::preset(name);
        s.p = vec![20, 30];
        s.delta = vec![10.0];
        s.alpha = vec![2.0];
        s.seeds = vec![0, 1, 2];
        s.params.retained = 200;
        s.params.burn_in = 200;
        s.params.thin = 2;
        s.params.band_samples = 200_000;
        s.params.mc_disorder_draws = 500;
        s.params.restricted_points = 41;
        s.params.disorder_draws = 2;
        s.params.lambda0_draws = 1;
        s
    }

    #[test]
    fn output_is_independent_of_workers() {
        let mut s = small(ExperimentName::OnsagerGap);
        let a = run_in_memory(&s).unwrap();
        s.workers = 3;
        let b = run_in_memory(&s).unwrap();
        assert_eq!(a.sink, b.sink);
        assert_eq!(a.manifest.results_digest, b.manifest.results_digest);
        assert_eq!(a.manifest.results_digest, digest_hex(&a.sink));
        assert_eq!(a.manifest.rows, 6);
    }

    #[test]
    fn rows_follow_task_order_and_carry_provenance() {
        let out = run_in_memory(&small(ExperimentName::SpectraReport)).unwrap();
        let ids = out.table.reals("task_id");
        assert_eq!(ids, (0..6).map(|i| i as f64).collect::<Vec<_>>());
        let text = String::from_utf8(out.sink).unwrap();
        assert!(text.starts_with("experiment,row_kind,task_id,p,n,delta,alpha,seed,status,"));
        let tasks = build_tasks(&small(ExperimentName::SpectraReport));
        assert_eq!(tasks[3].p, Some(30));
        assert_eq!(tasks[3].seed, 0);
    }

    #[test]
    fn every_experiment_runs_small() {
        for name in ExperimentName::ALL {
            let mut s = small(name);
            if name == ExperimentName::BandDecomposition {
                s.p = vec![30];
                s.seeds = vec![0];
            }
            let out = run_in_memory(&s).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(out.manifest.failures.is_empty(), "{name}: {:?}", out.manifest.failures);
            assert!(out.manifest.rows > 0);
        }
    }

    #[test]
    fn degenerate_control_is_flagged() {
        let mut s = small(ExperimentName::Theorem1Gap);
        s.params.inject_degenerate = true;
        let out = run_in_memory(&s).unwrap();
        let (k, f) = (out.table.column("row_kind").unwrap(), out.table.column("out_of_model").unwrap());
        let n_ctl = out.table.rows.iter().filter(|r| r[k].to_text() == "control" && r[f].to_text() == "true").count();
        assert_eq!(n_ctl, 2);
    }

    #[test]
    fn json_output_parses() {
        let mut s = small(ExperimentName::OnsagerGap);
        s.format = Format::Json;
        let out = run_in_memory(&s).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&out.sink).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 6);
    }
}
