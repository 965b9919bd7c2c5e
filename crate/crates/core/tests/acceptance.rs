//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use tapsphere::harness::{self, ExperimentName, ExperimentSpec};
use tapsphere::io::Table;
use tapsphere::model::{self, Instance, ModelConfig};
use tapsphere::sampler::{self, ChainConfig};
use tapsphere::{oracle, rng, spectra, tap};

struct Verdict {
    pass: bool,
    detail: String,
}

type Check = fn() -> Verdict;

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn instance(p: usize, n: usize, delta: f64, seed: u64) -> Instance {
    model::generate_instance(&ModelConfig::new(p, n, delta, seed).unwrap()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn within_budget(t: Duration, limit_secs: u64) -> bool {
    t <= Duration::from_secs(limit_secs)
}

fn text_column<'a>(table: &'a Table, row: &'a [tapsphere::io::Cell], col: &str) -> String {
    row[table.column(col).unwrap()].to_text()
}

fn oracle_cross_validation() -> Verdict {
    let start = Instant::now();
    let hits: Vec<bool> = (0..20u64)
        .map(|seed| {
            let inst = instance(20, 40, 10.0, seed);
            let exact = oracle::log_partition_saddle(&oracle::reduce_to_quadratic(&inst, 10.0).unwrap()).unwrap().value;
            let mut r = rng::stream(seed, &[rng::label("acceptance.mc")]);
            let mc = oracle::mc_log_partition(&inst, 10.0, 1_000_000, &mut r).unwrap();
            (exact - mc.value).abs() <= 3.0 * mc.std_err
        })
        .collect();
    let k = hits.iter().filter(|h| **h).count();
    let t = start.elapsed();
    verdict(k >= 18 && within_budget(t, 120), format!("{k}/20 seeds within 3 SE (need 18), {:.1}s (limit 120s)", t.as_secs_f64()))
}

fn theorem1_trend() -> Verdict {
    let start = Instant::now();
    let mut spec = ExperimentSpec::preset(ExperimentName::Theorem1Gap);
    spec.p = vec![100, 200, 400];
    spec.delta = vec![10.0];
    spec.alpha = vec![2.0];
    spec.seeds = (0..20).collect();
    spec.workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let out = harness::run_theorem1_gap(&spec).unwrap();
    let t = &out.table;
    // medians recomputed from the per-seed rows
    let meds: Vec<f64> = spec
        .p
        .iter()
        .map(|&p| {
            median(
                t.rows
                    .iter()
                    .filter(|r| text_column(t, r, "row_kind") == "task" && r[t.column("p").unwrap()].as_f64() == Some(p as f64))
                    .map(|r| r[t.column("gap").unwrap()].as_f64().unwrap())
                    .collect(),
            )
        })
        .collect();
    let reported: Vec<f64> = t
        .rows
        .iter()
        .filter(|r| text_column(t, r, "row_kind") == "summary")
        .map(|r| r[t.column("gap_median").unwrap()].as_f64().unwrap())
        .collect();
    let decreasing = meds.windows(2).all(|w| w[1] < w[0]);
    let ratio = meds[2] / meds[0];
    let elapsed = start.elapsed();
    verdict(
        decreasing && ratio <= 2.0 / 3.0 && reported == meds && out.manifest.failures.is_empty() && within_budget(elapsed, 300),
        format!(
            "median gaps {:.3e} > {:.3e} > {:.3e}, p=400/p=100 ratio {ratio:.3} (need <= 0.667), {:.1}s (limit 300s)",
            meds[0],
            meds[1],
            meds[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_correctness() -> Verdict {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for k in 0..20u64 {
        let p = rng.random_range(10..60usize);
        let n = rng.random_range(p / 2..3 * p);
        let delta = [0.5, 2.0, 10.0, 40.0][k as usize % 4];
        let inst = instance(p, n, delta, 1000 + k);
        let s: f64 = rng.random_range(0.05..0.95);
        let dir = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = dir.normalize() * (s * p as f64).sqrt();
        let g = tap::tap_gradient(&inst, delta, &a).unwrap();
        let fd = DVector::from_fn(p, |i, _| {
            let (mut ap, mut am) = (a.clone(), a.clone());
            ap[i] += h;
            am[i] -= h;
            (tap::tap_value(&inst, delta, &ap).unwrap().value - tap::tap_value(&inst, delta, &am).unwrap().value) / (2.0 * h)
        });
        worst = worst.max((&g - &fd).amax() / g.amax());
    }
    verdict(worst < 1e-6, format!("max relative component error {worst:.2e} over 20 pairs (need < 1e-6)"))
}

fn optimizer_agreement() -> Verdict {
    let (p, delta) = (200usize, 10.0);
    let diffs: Vec<f64> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let inst = instance(p, 2 * p, delta, seed);
            let svd = tap::sup_tap_svd(&inst, delta, tap::DEFAULT_GRID, tap::DEFAULT_S_TOL).unwrap().value;
            let mut r = rng::stream(seed, &[rng::label("acceptance.starts")]);
            let best = (0..16)
                .map(|_| {
                    let s: f64 = r.random_range(0.0..0.9);
                    let a0 = model::sample_uniform_sphere(p, (s * p as f64).sqrt(), &mut r);
                    tap::sup_tap_gradient_ascent(&inst, delta, &a0, 10_000, 1e-12).unwrap().value
                })
                .fold(f64::NEG_INFINITY, f64::max);
            (best - svd).abs()
        })
        .collect();
    let worst = diffs.iter().cloned().fold(0.0, f64::max);
    verdict(worst <= 1e-6, format!("max |ascent - svd| {worst:.2e} over 10 seeds (need <= 1e-6)"))
}

fn annealed_closed_forms() -> Verdict {
    let closed = (oracle::annealed_free_energy(10, 20, 2.0) + 1.25f64.ln()).abs();
    let (mc, se) = harness::annealed_mc(15, 30, 10.0, 10_000, 5).unwrap();
    let exact = oracle::annealed_free_energy(15, 30, 10.0);
    let z = (mc - exact).abs() / se;
    let ps = [50usize, 100, 200, 400];
    let g = oracle::log_gamma0_trend(&ps, 2.0, 10.0).unwrap();
    let decreasing = g.windows(2).all(|w| w[1] < w[0]);
    let floor = g.iter().zip(ps).all(|(v, p)| *v >= 4f64.ln() / p as f64);
    verdict(
        closed <= 1e-12 && z <= 3.0 && decreasing && floor,
        format!(
            "closed form error {closed:.1e}; MC at p=15 off by {z:.2} SE; (1/p) ln γ₀ = {:?} decreasing={decreasing} floor={floor}",
            g.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn no_field_subspace() -> Verdict {
    let target = -1.05f64.ln();
    let vals: Vec<f64> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let inst = instance(400, 800, 10.0, seed);
            oracle::band_free_energy(&inst, 10.0, &DVector::zeros(400)).unwrap().onsager_term
        })
        .collect();
    let m = median(vals);
    verdict((m - target).abs() <= 0.01, format!("median onsager term {m:.5} vs {target:.5} (tolerance 0.01)"))
}

fn nishimori_identity() -> Verdict {
    let start = Instant::now();
    let cfg = ChainConfig::with_retained(10_000, 2_000, 5, 17);
    let rep = sampler::nishimori_check(&ModelConfig::new(50, 100, 10.0, 17).unwrap(), 10.0, &cfg, 50).unwrap();
    let t = start.elapsed();
    verdict(
        rep.difference.abs() <= 3.0 * rep.se && within_budget(t, 600),
        format!(
            "E<R12> = {:.4}, E<R1*> = {:.4}, |diff| = {:.2e} vs 3 SE = {:.2e}, {:.1}s (limit 600s)",
            rep.mean_r12,
            rep.mean_r1star,
            rep.difference.abs(),
            3.0 * rep.se,
            t.as_secs_f64()
        ),
    )
}

fn overlap_bounds_and_concentration() -> Verdict {
    let cfg = ChainConfig::with_retained(2_000, 2_000, 10, 23);
    let b = sampler::overlap_bounds_check(2.0, 10.0, 200, 8, &cfg).unwrap();
    let in_bounds = b.estimate >= -3.0 * b.se && b.estimate <= 0.99;
    let mut spec = ExperimentSpec::preset(ExperimentName::OverlapConcentration);
    spec.workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let out = harness::run_overlap_concentration(&spec).unwrap();
    let t = &out.table;
    let est = t.reals("estimate");
    let rows: Vec<sampler::ConcentrationRow> = t
        .rows
        .iter()
        .map(|r| sampler::ConcentrationRow {
            p: r[t.column("p").unwrap()].as_f64().unwrap() as usize,
            n: r[t.column("n").unwrap()].as_f64().unwrap() as usize,
            eps_p: r[t.column("eps_p").unwrap()].as_f64().unwrap(),
            estimate: r[t.column("estimate").unwrap()].as_f64().unwrap(),
            se: r[t.column("se").unwrap()].as_f64().unwrap(),
            posterior_var: 0.0,
            fixed_lambda_estimate: None,
            max_perturbation_shift: 0.0,
            samples: 0,
        })
        .collect();
    let trend = sampler::concentration_trend_ok(&rows);
    verdict(
        in_bounds && trend && rows.len() == 3,
        format!(
            "E<R12> at p=200 = {:.4} ± {:.4} (in [-3 SE, 0.99]: {in_bounds}); second moment over p=50,100,200 {:?} trend={trend}",
            b.estimate,
            b.se,
            est.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>()
        ),
    )
}

fn spectral_predicates() -> Verdict {
    let sb = spectra::singular_bound_frequency(&ModelConfig::new(100, 200, 10.0, 29).unwrap(), 3.0, 500).unwrap();
    let ks = spectra::mp_diagnostics(&instance(400, 800, 10.0, 29)).unwrap().mp_ks_distance;
    let mut r = ChaCha8Rng::seed_from_u64(29);
    let mut violation: f64 = 0.0;
    for seed in 0..20u64 {
        let inst = instance(60, 120, 10.0, 300 + seed);
        let u = DVector::from_fn(60, |_, _| r.sample::<f64, _>(StandardNormal));
        let v = DVector::from_fn(60, |_, _| r.sample::<f64, _>(StandardNormal));
        violation = violation.max(spectra::interlacing_check(&inst, &u, &v).unwrap().max_violation);
        let (i, j) = (r.random_range(0..30usize), r.random_range(30..60usize));
        let (ei, ej) = (DVector::from_fn(60, |k, _| (k == i) as u8 as f64), DVector::from_fn(60, |k, _| (k == j) as u8 as f64));
        violation = violation.max(spectra::interlacing_check(&inst, &ei, &ej).unwrap().max_violation);
    }
    verdict(
        sb.frequency >= 0.97 && ks < 0.05 && violation <= 1e-9,
        format!(
            "singular bound frequency {:.3} (need >= 0.97); KS {ks:.4} (need < 0.05); interlacing violation {violation:.1e} (need <= 1e-9)",
            sb.frequency
        ),
    )
}

fn determinism() -> Verdict {
    let specs = {
        let mut out = Vec::new();
        for name in [ExperimentName::Theorem1Gap, ExperimentName::SpectraReport, ExperimentName::RestrictedProfile] {
            let mut s = ExperimentSpec::preset(name);
            s.p = vec![30, 50];
            s.seeds = vec![0, 1, 2];
            s.delta = vec![10.0];
            s.alpha = vec![2.0];
            s.params.retained = 200;
            s.params.burn_in = 300;
            s.params.restricted_points = 101;
            out.push(s);
        }
        out
    };
    let mut all_equal = true;
    let mut shown = Vec::new();
    for mut s in specs {
        let digests: Vec<String> = [1usize, 8, 1, 4]
            .iter()
            .map(|&w| {
                s.workers = w;
                harness::run_in_memory(&s).unwrap().manifest.results_digest
            })
            .collect();
        all_equal &= digests.windows(2).all(|w| w[0] == w[1]);
        shown.push(format!("{}={}", s.name, digests[0]));
    }
    verdict(all_equal, format!("reruns with workers 1,8,1,4 agree: {}", shown.join(" ")))
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("oracle cross-validation", oracle_cross_validation),
        ("theorem 1 trend", theorem1_trend),
        ("gradient correctness", gradient_correctness),
        ("optimizer agreement", optimizer_agreement),
        ("annealed closed forms", annealed_closed_forms),
        ("no-field subspace free energy", no_field_subspace),
        ("nishimori identity", nishimori_identity),
        ("overlap bounds and concentration", overlap_bounds_and_concentration),
        ("spectral predicates", spectral_predicates),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let v = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| verdict(false, format!("panicked: {:?}", e.downcast_ref::<String>().cloned().unwrap_or_default())));
        if !v.pass {
            failed += 1;
        }
        println!("criterion {:>2} {}: {} ({})", k + 1, if v.pass { "PASS" } else { "FAIL" }, name, v.detail);
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
