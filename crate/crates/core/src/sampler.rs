//! Posterior sampling on the sphere and replica overlap statistics.
//!
//! Chains run geodesic random-walk Metropolis in the eigenbasis of the
//! quadratic form, where a step costs `O(p)`. Overlaps are rotation invariant,
//! so retained draws stay in that basis; [`ReplicaSet::beta`] maps them back.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Error, Result};
use crate::model::{self, Instance, ModelConfig, PerturbationConfig, PerturbedInstance};
use crate::oracle::{self, QuadraticForm, SpanPolicy};
use crate::quad;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub target_accept: f64,
    /// Initial geodesic step in radians.
    pub initial_angle: f64,
    pub seed: u64,
}

impl ChainConfig {
    /// `retained` draws per chain, thinned by `thin`, after `burn_in` steps.
    pub fn with_retained(retained: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        ChainConfig { steps: burn_in + retained * thin, burn_in, thin, target_accept: 0.3, initial_angle: 0.5, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.steps {
            return Err(invalid(format!("burn_in ({}) must be smaller than steps ({})", self.burn_in, self.steps)));
        }
        if self.thin == 0 {
            return Err(invalid("thin must be at least 1"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(invalid(format!("target_accept must lie in (0, 1), got {}", self.target_accept)));
        }
        if !(self.initial_angle > 0.0) {
            return Err(invalid("initial_angle must be positive"));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.steps - self.burn_in).div_ceil(self.thin)
    }

    fn reseeded(&self, seed: u64) -> Self {
        ChainConfig { seed, ..*self }
    }
}

#[derive(Clone, Debug)]
pub struct ReplicaSet {
    /// `(chain_id, coordinates)`; coordinates are in `basis` when present.
    pub samples: Vec<(usize, DVector<f64>)>,
    pub basis: Option<DMatrix<f64>>,
    pub accept_rate: f64,
    pub ess: f64,
    pub num_chains: usize,
    pub per_chain_accept: Vec<f64>,
    pub final_angles: Vec<f64>,
    /// Energy of each retained draw, per chain.
    pub energy_traces: Vec<Vec<f64>>,
}

impl ReplicaSet {
    /// Replicas given directly in the original coordinates.
    pub fn from_samples(samples: Vec<(usize, DVector<f64>)>) -> Result<Self> {
        let num_chains = samples.iter().map(|s| s.0 + 1).max().unwrap_or(0);
        Ok(ReplicaSet {
            samples,
            basis: None,
            accept_rate: f64::NAN,
            ess: f64::NAN,
            num_chains,
            per_chain_accept: Vec::new(),
            final_angles: Vec::new(),
            energy_traces: Vec::new(),
        })
    }

    /// Sample `i` in the original coordinates.
    pub fn beta(&self, i: usize) -> DVector<f64> {
        match &self.basis {
            Some(v) => v * &self.samples[i].1,
            None => self.samples[i].1.clone(),
        }
    }

    /// A fixed vector expressed in the sample coordinates.
    pub fn to_sample_coords(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.basis {
            Some(b) => b.transpose() * v,
            None => v.clone(),
        }
    }

    /// Cross-chain overlaps `(chain_i, chain_j, R₁₂)` of draws aligned by
    /// retention index.
    pub fn pair_overlaps(&self) -> Vec<(usize, usize, f64)> {
        let chains = self.by_chain();
        let k = chains.iter().map(|c| c.len()).min().unwrap_or(0);
        let mut out = Vec::new();
        for i in 0..chains.len() {
            for j in i + 1..chains.len() {
                for (a, b) in chains[i].iter().zip(&chains[j]).take(k) {
                    out.push((i, j, a.dot(b) / a.len() as f64));
                }
            }
        }
        out
    }

    fn by_chain(&self) -> Vec<Vec<&DVector<f64>>> {
        let mut out = vec![Vec::new(); self.num_chains];
        for (c, v) in &self.samples {
            out[*c].push(v);
        }
        out
    }
}

/// Which posterior to sample.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Base(&'a Instance),
    Perturbed(&'a PerturbedInstance),
}

impl Target<'_> {
    fn form(&self, delta: f64) -> Result<QuadraticForm> {
        match self {
            Target::Base(i) => oracle::reduce_to_quadratic(i, delta),
            Target::Perturbed(p) => oracle::reduce_perturbed(p, delta),
        }
    }
}

struct ChainOutput {
    retained: Vec<DVector<f64>>,
    energies: Vec<f64>,
    accept: f64,
    angle: f64,
}

fn run_chain(qf: &QuadraticForm, cfg: &ChainConfig, chain: usize) -> ChainOutput {
    let p = qf.dim;
    let pf = p as f64;
    let root = pf.sqrt();
    let mut r = rng::stream(cfg.seed, &[rng::label("sampler.chain"), chain as u64]);
    let lam = qf.eigvals.as_slice();
    let lin = qf.linear.as_slice();
    let energy = |t: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..p {
            acc += t[i] * (0.5 * lam[i] * t[i] - lin[i]);
        }
        acc + qf.constant
    };
    let mut t: Vec<f64> = model::sample_uniform_sphere(p, root, &mut r).iter().copied().collect();
    let mut e = energy(&t);
    let mut log_theta = cfg.initial_angle.ln();
    let mut g = vec![0.0; p];
    let mut prop = vec![0.0; p];
    let mut retained = Vec::with_capacity(cfg.retained());
    let mut energies = Vec::with_capacity(cfg.retained());
    let mut accepted = 0usize;
    let (mut avg_sum, mut avg_n) = (0.0, 0usize);
    for step in 0..cfg.steps {
        let theta = log_theta.exp();
        // uniform unit tangent at t
        for gi in g.iter_mut() {
            *gi = r.sample(StandardNormal);
        }
        let c = g.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / pf;
        let mut wn = 0.0;
        for i in 0..p {
            g[i] -= c * t[i];
            wn += g[i] * g[i];
        }
        let scale = theta.sin() * root / wn.sqrt();
        let cos = theta.cos();
        let mut pn = 0.0;
        for i in 0..p {
            prop[i] = cos * t[i] + scale * g[i];
            pn += prop[i] * prop[i];
        }
        let fix = root / pn.sqrt();
        for v in prop.iter_mut() {
            *v *= fix;
        }
        let e_new = energy(&prop);
        let u: f64 = r.random();
        let acc = u.ln() < e - e_new;
        if acc {
            std::mem::swap(&mut t, &mut prop);
            e = e_new;
        }
        if step < cfg.burn_in {
            // Robbins–Monro on the log step
            let gain = 1.0 / ((step + 1) as f64).powf(0.6);
            log_theta += gain * (f64::from(u8::from(acc)) - cfg.target_accept);
            // beyond π/2 the acceptance is no longer monotone in θ, and θ = π flips to the antipode
            log_theta = log_theta.clamp(-12.0, std::f64::consts::FRAC_PI_2.ln());
            if step >= cfg.burn_in / 2 {
                avg_sum += log_theta;
                avg_n += 1;
            }
            if step + 1 == cfg.burn_in {
                // freeze at the average over the second half of burn-in
                log_theta = avg_sum / avg_n as f64;
            }
        } else {
            accepted += usize::from(acc);
            if (step - cfg.burn_in).is_multiple_of(cfg.thin) {
                retained.push(DVector::from_column_slice(&t));
                energies.push(e);
            }
        }
    }
    let accept = accepted as f64 / (cfg.steps - cfg.burn_in) as f64;
    ChainOutput { retained, energies, accept, angle: log_theta.exp() }
}

/// Integrated autocorrelation time with Sokal's automatic window (c = 5).
pub fn integrated_autocorr_time(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return 1.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let ck = (0..n - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum::<f64>() / n as f64;
        tau += 2.0 * ck / c0;
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

/// Sample a quadratic-form posterior on `S^{p-1}(√p)` with `num_chains`
/// independent chains.
pub fn mcmc_quadratic(qf: &QuadraticForm, cfg: &ChainConfig, num_chains: usize) -> Result<ReplicaSet> {
    cfg.validate()?;
    if num_chains < 2 {
        return Err(invalid(format!("need at least 2 chains, got {num_chains}")));
    }
    let outs: Vec<ChainOutput> = (0..num_chains).into_par_iter().map(|c| run_chain(qf, cfg, c)).collect();
    let mut samples = Vec::with_capacity(num_chains * cfg.retained());
    let mut traces = Vec::with_capacity(num_chains);
    let mut per_chain_accept = Vec::with_capacity(num_chains);
    let mut final_angles = Vec::with_capacity(num_chains);
    let mut ess = 0.0;
    for (c, o) in outs.into_iter().enumerate() {
        ess += o.energies.len() as f64 / integrated_autocorr_time(&o.energies);
        per_chain_accept.push(o.accept);
        final_angles.push(o.angle);
        traces.push(o.energies);
        samples.extend(o.retained.into_iter().map(|v| (c, v)));
    }
    let accept_rate = per_chain_accept.iter().sum::<f64>() / num_chains as f64;
    if accept_rate < 0.01 {
        log::warn!(
            "stuck chain: acceptance {accept_rate:.4} after adaptation (per chain {per_chain_accept:?}, final angles {final_angles:?})"
        );
    }
    Ok(ReplicaSet { samples, basis: qf.basis.clone(), accept_rate, ess, num_chains, per_chain_accept, final_angles, energy_traces: traces })
}

pub fn mcmc_posterior(target: Target<'_>, delta: f64, cfg: &ChainConfig, num_chains: usize) -> Result<ReplicaSet> {
    let qf = target.form(delta)?;
    mcmc_quadratic(&qf, cfg, num_chains)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub mean_r12: f64,
    pub var_r12: f64,
    pub mean_r1star: f64,
    pub se_r12: f64,
    pub se_r1star: f64,
    pub num_pairs: usize,
}

/// Sum that does not depend on the order of `v`.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// `R₁₂` over aligned cross-chain pairs (draw `k` of chain `i` against draw
/// `k` of chain `j`, `i < j`) and `R₁,*` over all draws. Standard errors are
/// jackknife over chains for `R₁₂` and between-chain for `R₁,*`.
pub fn overlap_stats(replicas: &ReplicaSet, beta0: &DVector<f64>) -> Result<OverlapStats> {
    let chains = replicas.by_chain();
    let nc = chains.len();
    if nc < 2 {
        return Err(invalid("overlap statistics need at least 2 chains"));
    }
    let k = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if k < 10 {
        return Err(invalid(format!("need at least 10 retained samples per chain, got {k}")));
    }
    let p = beta0.len() as f64;
    let b0 = replicas.to_sample_coords(beta0);

    // pair[i][j] holds the R₁₂ values of the pair (i, j)
    let mut pair_vals: Vec<((usize, usize), Vec<f64>)> = Vec::new();
    for i in 0..nc {
        for j in i + 1..nc {
            let v: Vec<f64> = (0..k).map(|m| chains[i][m].dot(chains[j][m]) / p).collect();
            pair_vals.push(((i, j), v));
        }
    }
    let all: Vec<f64> = pair_vals.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let num_pairs = all.len();
    let mean_r12 = sorted_sum(all.clone()) / num_pairs as f64;
    let var_r12 = sorted_sum(all.iter().map(|v| (v - mean_r12).powi(2)).collect()) / num_pairs as f64;

    let se_r12 = if nc >= 3 {
        let loo: Vec<f64> = (0..nc)
            .map(|c| {
                let rest: Vec<f64> =
                    pair_vals.iter().filter(|((i, j), _)| *i != c && *j != c).flat_map(|(_, v)| v.iter().copied()).collect();
                let n = rest.len() as f64;
                sorted_sum(rest) / n
            })
            .collect();
        let m = sorted_sum(loo.clone()) / nc as f64;
        ((nc - 1) as f64 / nc as f64 * sorted_sum(loo.iter().map(|v| (v - m).powi(2)).collect())).sqrt()
    } else {
        (var_r12 / num_pairs as f64).sqrt()
    };

    let chain_means: Vec<f64> = chains.iter().map(|c| sorted_sum(c.iter().map(|v| v.dot(&b0) / p).collect()) / c.len() as f64).collect();
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mean_r1star = sorted_sum(chains.iter().flat_map(|c| c.iter().map(|v| v.dot(&b0) / p)).collect()) / total as f64;
    let cm = sorted_sum(chain_means.clone()) / nc as f64;
    let se_r1star = (sorted_sum(chain_means.iter().map(|v| (v - cm).powi(2)).collect()) / ((nc - 1) as f64 * nc as f64)).sqrt();
    Ok(OverlapStats { mean_r12, var_r12, mean_r1star, se_r12, se_r1star, num_pairs })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NishimoriDraw {
    pub seed: u64,
    pub mean_r12: f64,
    pub mean_r1star: f64,
    pub accept_rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NishimoriReport {
    pub draws: usize,
    pub mean_r12: f64,
    pub mean_r1star: f64,
    pub difference: f64,
    /// Standard error of the paired per-draw difference.
    pub se: f64,
    pub pass: bool,
    pub per_draw: Vec<NishimoriDraw>,
}

pub const NISHIMORI_CHAINS: usize = 4;

/// Nishimori check over fresh instances drawn from `template` with derived
/// seeds.
pub fn nishimori_check(template: &ModelConfig, delta: f64, cfg: &ChainConfig, disorder_draws: usize) -> Result<NishimoriReport> {
    nishimori_check_with(|seed| generate_instance(&ModelConfig { seed, ..*template }), template.seed, delta, cfg, disorder_draws)
}

fn generate_instance(cfg: &ModelConfig) -> Result<Instance> {
    model::generate_instance(cfg)
}

/// Nishimori check over instances produced by `draw(seed)`.
pub fn nishimori_check_with<F>(draw: F, base_seed: u64, delta: f64, cfg: &ChainConfig, disorder_draws: usize) -> Result<NishimoriReport>
where
    F: Fn(u64) -> Result<Instance> + Sync,
{
    if disorder_draws < 10 {
        return Err(invalid(format!("need at least 10 disorder draws, got {disorder_draws}")));
    }
    let per_draw: Vec<NishimoriDraw> = (0..disorder_draws)
        .into_par_iter()
        .map(|d| -> Result<NishimoriDraw> {
            let seed = rng::derive_seed(base_seed, &[rng::label("sampler.nishimori"), d as u64]);
            let inst = draw(seed)?;
            let chain_cfg = cfg.reseeded(rng::derive_seed(cfg.seed, &[rng::label("sampler.nishimori.chains"), d as u64]));
            let reps = mcmc_posterior(Target::Base(&inst), delta, &chain_cfg, NISHIMORI_CHAINS)?;
            let st = overlap_stats(&reps, &inst.beta0)?;
            Ok(NishimoriDraw { seed, mean_r12: st.mean_r12, mean_r1star: st.mean_r1star, accept_rate: reps.accept_rate })
        })
        .collect::<Result<_>>()?;
    let n = per_draw.len() as f64;
    let mean_r12 = per_draw.iter().map(|d| d.mean_r12).sum::<f64>() / n;
    let mean_r1star = per_draw.iter().map(|d| d.mean_r1star).sum::<f64>() / n;
    let diffs: Vec<f64> = per_draw.iter().map(|d| d.mean_r12 - d.mean_r1star).collect();
    let difference = mean_r12 - mean_r1star;
    let se = (diffs.iter().map(|v| (v - difference).powi(2)).sum::<f64>() / ((n - 1.0) * n)).sqrt();
    Ok(NishimoriReport { draws: per_draw.len(), mean_r12, mean_r1star, difference, se, pass: difference.abs() <= 3.0 * se, per_draw })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub p: usize,
    pub n: usize,
    pub eps_p: f64,
    /// `E_λ₀ E⟨(R₁₂ - E⟨R₁₂⟩)²⟩` with `λ₀` averaged.
    pub estimate: f64,
    pub se: f64,
    /// The posterior part `E⟨(R₁₂ - ⟨R₁₂⟩)²⟩` alone.
    pub posterior_var: f64,
    /// Same estimate with `λ₀` fixed at the base value.
    pub fixed_lambda_estimate: Option<f64>,
    /// `max |(1/p)(ln Z^Pert - ln Z)|` over the draws (saddle oracle).
    pub max_perturbation_shift: f64,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SweepOptions {
    pub disorder_draws: usize,
    pub lambda0_draws: usize,
    pub num_chains: usize,
    pub compare_fixed_lambda: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { disorder_draws: 8, lambda0_draws: 8, num_chains: 4, compare_fixed_lambda: false }
    }
}

struct CellStats {
    mean_r12: f64,
    var_r12: f64,
}

/// Centered second moment of `R₁₂` under the `λ₀`-averaged perturbation for
/// each `p`, with `ε_p = p^{-1/4}`. `pcfg_base` supplies the base seed and the
/// fixed `λ₀` used by the optional comparison.
pub fn overlap_concentration_sweep(
    alpha: f64,
    delta: f64,
    p_list: &[usize],
    pcfg_base: &PerturbationConfig,
    cfg: &ChainConfig,
    opts: &SweepOptions,
) -> Result<Vec<ConcentrationRow>> {
    if p_list.is_empty() || opts.disorder_draws < 2 || opts.lambda0_draws < 1 {
        return Err(invalid("sweep needs a nonempty p list, ≥ 2 disorder draws and ≥ 1 λ₀ draw"));
    }
    p_list
        .iter()
        .map(|&p| {
            let eps_p = model::eps_schedule(p);
            let cells: Vec<(f64, Vec<CellStats>, Option<CellStats>)> = (0..opts.disorder_draws)
                .into_par_iter()
                .map(|d| -> Result<(f64, Vec<CellStats>, Option<CellStats>)> {
                    let path = [rng::label("sampler.concentration"), p as u64, d as u64];
                    let mcfg = ModelConfig::from_alpha(p, alpha, delta, rng::derive_seed(pcfg_base.seed, &path))?;
                    let inst = model::generate_instance(&mcfg)?;
                    let base_lnz = oracle::log_partition_saddle(&oracle::reduce_to_quadratic(&inst, delta)?)?.value;
                    let mut lr = rng::stream(pcfg_base.seed, &path);
                    let mut shift: f64 = 0.0;
                    let mut run = |lambda0: f64, l: u64| -> Result<CellStats> {
                        let pc =
                            PerturbationConfig::new(lambda0, eps_p, rng::derive_seed(pcfg_base.seed, &[path[0], path[1], path[2], l]))?;
                        let pert = model::make_perturbed(&inst, &pc);
                        let lnz = oracle::log_partition_saddle(&oracle::reduce_perturbed(&pert, delta)?)?.value;
                        shift = shift.max((lnz - base_lnz).abs());
                        let ccfg = cfg.reseeded(rng::derive_seed(cfg.seed, &[path[0], path[1], path[2], l]));
                        let reps = mcmc_posterior(Target::Perturbed(&pert), delta, &ccfg, opts.num_chains)?;
                        let st = overlap_stats(&reps, &inst.beta0)?;
                        Ok(CellStats { mean_r12: st.mean_r12, var_r12: st.var_r12 })
                    };
                    let mut stats = Vec::with_capacity(opts.lambda0_draws);
                    for l in 0..opts.lambda0_draws {
                        let lambda0 = 0.5 + 0.5 * lr.random::<f64>();
                        stats.push(run(lambda0, l as u64)?);
                    }
                    let fixed = if opts.compare_fixed_lambda { Some(run(pcfg_base.lambda0, u64::MAX)?) } else { None };
                    Ok((shift, stats, fixed))
                })
                .collect::<Result<_>>()?;
            let all: Vec<&CellStats> = cells.iter().flat_map(|c| c.1.iter()).collect();
            let grand = all.iter().map(|c| c.mean_r12).sum::<f64>() / all.len() as f64;
            let per_draw: Vec<f64> = cells
                .iter()
                .map(|c| c.1.iter().map(|s| s.var_r12 + (s.mean_r12 - grand).powi(2)).sum::<f64>() / c.1.len() as f64)
                .collect();
            let nd = per_draw.len() as f64;
            let estimate = per_draw.iter().sum::<f64>() / nd;
            let se = (per_draw.iter().map(|v| (v - estimate).powi(2)).sum::<f64>() / ((nd - 1.0) * nd)).sqrt();
            let posterior_var = all.iter().map(|c| c.var_r12).sum::<f64>() / all.len() as f64;
            let fixed_lambda_estimate = if opts.compare_fixed_lambda {
                let fx: Vec<&CellStats> = cells.iter().filter_map(|c| c.2.as_ref()).collect();
                let g = fx.iter().map(|c| c.mean_r12).sum::<f64>() / fx.len() as f64;
                Some(fx.iter().map(|c| c.var_r12 + (c.mean_r12 - g).powi(2)).sum::<f64>() / fx.len() as f64)
            } else {
                None
            };
            let max_shift = cells.iter().map(|c| c.0).fold(0.0, f64::max);
            Ok(ConcentrationRow {
                p,
                n: (alpha * p as f64).round() as usize,
                eps_p,
                estimate,
                se,
                posterior_var,
                fixed_lambda_estimate,
                max_perturbation_shift: max_shift,
                samples: all.len(),
            })
        })
        .collect()
}

/// Decreasing in `p`, tolerating one inversion that is within the combined
/// standard errors of the two rows.
pub fn concentration_trend_ok(rows: &[ConcentrationRow]) -> bool {
    let mut inversions = 0;
    for w in rows.windows(2) {
        if w[1].estimate >= w[0].estimate {
            let se = (w[0].se.powi(2) + w[1].se.powi(2)).sqrt();
            if w[1].estimate - w[0].estimate > se {
                return false;
            }
            inversions += 1;
        }
    }
    inversions <= 1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlapBoundsReport {
    pub p: usize,
    pub n: usize,
    pub delta: f64,
    pub estimate: f64,
    pub se: f64,
    pub margin: f64,
    pub pass: bool,
}

/// Disorder-averaged `E⟨R₁₂⟩`; passes when it lies in `[-3 SE, 1 - 0.01]`.
pub fn overlap_bounds_check(alpha: f64, delta: f64, p: usize, disorder_draws: usize, cfg: &ChainConfig) -> Result<OverlapBoundsReport> {
    if disorder_draws < 2 {
        return Err(invalid("need at least 2 disorder draws"));
    }
    let vals: Vec<f64> = (0..disorder_draws)
        .into_par_iter()
        .map(|d| -> Result<f64> {
            let path = [rng::label("sampler.bounds"), p as u64, d as u64];
            let inst = model::generate_instance(&ModelConfig::from_alpha(p, alpha, delta, rng::derive_seed(cfg.seed, &path))?)?;
            let reps = mcmc_posterior(Target::Base(&inst), delta, &cfg.reseeded(rng::derive_seed(cfg.seed ^ 1, &path)), 4)?;
            Ok(overlap_stats(&reps, &inst.beta0)?.mean_r12)
        })
        .collect::<Result<_>>()?;
    let nd = vals.len() as f64;
    let estimate = vals.iter().sum::<f64>() / nd;
    let se = (vals.iter().map(|v| (v - estimate).powi(2)).sum::<f64>() / ((nd - 1.0) * nd)).sqrt();
    let margin = 0.01;
    Ok(OverlapBoundsReport {
        p,
        n: (alpha * p as f64).round() as usize,
        delta,
        estimate,
        se,
        margin,
        pass: estimate >= -3.0 * se && estimate <= 1.0 - margin,
    })
}

/// `ln P(β ∈ box)` for `β` uniform on `S^{p-1}(√p)`, where the box constrains
/// the normalized projections `uᵢᵀβ/√p` onto `k ∈ {1, 2}` orthonormal
/// directions to `(centerᵢ - ε, centerᵢ + ε)`.
pub fn log_box_probability(p: usize, center: &[f64], eps: f64) -> Result<f64> {
    let k = center.len();
    let pf = p as f64;
    let clip = |c: f64, r: f64| ((c - eps).max(-r), (c + eps).min(r));
    match k {
        1 => {
            let (lo, hi) = clip(center[0], 1.0);
            if lo >= hi {
                return Ok(f64::NEG_INFINITY);
            }
            // peak of the density inside the interval
            let xm = if lo <= 0.0 && hi >= 0.0 { 0.0 } else { lo.abs().min(hi.abs()) };
            let ref_ln = model::log_projection_density(xm, p, 1);
            let v = quad::integrate(|x| (model::log_projection_density(x, p, 1) - ref_ln).exp(), lo, hi, 1e-14, 1e-10)?;
            Ok(ref_ln + v.ln())
        }
        2 => {
            // joint density of two normalized coordinates: (p-2)/(2π) (1 - r²)^{(p-4)/2}
            let ln_norm = (pf - 2.0).ln() - (2.0 * std::f64::consts::PI).ln();
            let expo = 0.5 * (pf - 4.0);
            let (lo1, hi1) = clip(center[0], 1.0);
            let near = |lo: f64, hi: f64| if lo <= 0.0 && hi >= 0.0 { 0.0 } else { lo.abs().min(hi.abs()) };
            let r2_min = near(lo1, hi1).powi(2) + near(center[1] - eps, center[1] + eps).powi(2);
            if lo1 >= hi1 || r2_min >= 1.0 {
                return Ok(f64::NEG_INFINITY);
            }
            let ref_ln = expo * (1.0 - r2_min).ln();
            let inner = |x1: f64| -> f64 {
                let w = (1.0 - x1 * x1).max(0.0).sqrt();
                let (lo2, hi2) = clip(center[1], w);
                if lo2 >= hi2 {
                    return 0.0;
                }
                quad::integrate(
                    |x2| {
                        let r = 1.0 - x1 * x1 - x2 * x2;
                        if r <= 0.0 {
                            0.0
                        } else {
                            (expo * r.ln() - ref_ln).exp()
                        }
                    },
                    lo2,
                    hi2,
                    1e-15,
                    1e-11,
                )
                .unwrap_or(f64::NAN)
            };
            let v = quad::integrate(inner, lo1, hi1, 1e-14, 1e-10)?;
            if !v.is_finite() {
                return Err(numerical("box probability quadrature produced a non-finite value"));
            }
            Ok(ln_norm + ref_ln + v.ln())
        }
        _ => Err(invalid(format!("box probability supports 1 or 2 directions, got {k}"))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandMcReport {
    pub p: usize,
    pub eps_band: f64,
    pub span_dim: usize,
    pub num_samples: usize,
    pub accepted: usize,
    /// `(1/p) ln(acceptance fraction)`.
    pub mc_volume: f64,
    /// `(1/p) ln P(box)` by quadrature of the projection density.
    pub exact_volume: f64,
    /// Leading volume term `½ ln(1 - s)`.
    pub leading_volume: f64,
    /// `(1/p)[ln(acceptance fraction) + ln(mean weight among accepted)]`.
    pub mc_value: f64,
    pub onsager_term: f64,
    /// `onsager_term + exact_volume`.
    pub reference: f64,
    pub se: f64,
    /// `C` in the `C·ε_band + 3·SE` tolerance.
    pub c_bound: f64,
    pub pass: bool,
}

struct BandDraws {
    accepted: usize,
    log_weights: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn band_draws<R: Rng + ?Sized>(
    instance: &Instance,
    delta: Option<f64>,
    a: &DVector<f64>,
    basis: &[DVector<f64>],
    center: &[f64],
    eps: f64,
    num_samples: usize,
    rng: &mut R,
) -> Result<BandDraws> {
    let p = instance.p();
    let k = basis.len();
    let pf = p as f64;
    let chi = ChiSquared::new((p - k) as f64).map_err(|e| numerical(e.to_string()))?;
    let mut accepted = 0;
    let mut log_weights = Vec::new();
    for _ in 0..num_samples {
        let gs: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let rest: f64 = chi.sample(rng);
        let rr = (gs.iter().map(|g| g * g).sum::<f64>() + rest).sqrt();
        if !gs.iter().zip(center).all(|(g, c)| (g / rr - c).abs() < eps) {
            continue;
        }
        accepted += 1;
        if let Some(delta) = delta {
            // complete the draw: uniform direction in the complement of the span
            let mut w = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            for _ in 0..2 {
                for u in basis {
                    let c = u.dot(&w);
                    w.axpy(-c, u, 1.0);
                }
            }
            let wn = w.norm();
            let mut beta = w * (rest.sqrt() / wn);
            for (u, g) in basis.iter().zip(&gs) {
                beta.axpy(*g, u, 1.0);
            }
            beta *= pf.sqrt() / rr;
            let d = &instance.x * (beta - a);
            log_weights.push(-d.norm_squared() / (2.0 * delta));
        }
    }
    Ok(BandDraws { accepted, log_weights })
}

/// Geometry-only band check: `(1/p) ln(acceptance fraction)` against the box
/// probability. Returns `(mc, se, exact, accepted)`.
pub fn band_volume_mc(
    instance: &Instance,
    a: &DVector<f64>,
    eps_band: f64,
    num_samples: usize,
    seed: u64,
) -> Result<(f64, f64, f64, usize)> {
    let basis = oracle::band_basis_with(instance, a, SpanPolicy::Collapse)?;
    let pf = instance.p() as f64;
    let center: Vec<f64> = basis.iter().map(|u| u.dot(a) / pf.sqrt()).collect();
    let mut r = rng::stream(seed, &[rng::label("sampler.band.volume")]);
    let d = band_draws(instance, None, a, &basis, &center, eps_band, num_samples, &mut r)?;
    if d.accepted < 100 {
        return Err(too_few(d.accepted));
    }
    let f = d.accepted as f64 / num_samples as f64;
    let se = ((1.0 - f) / (num_samples as f64 * f)).sqrt() / pf;
    Ok((f.ln() / pf, se, log_box_probability(instance.p(), &center, eps_band)? / pf, d.accepted))
}

fn too_few(accepted: usize) -> Error {
    numerical(format!("only {accepted} of the band draws were accepted (need 100); use a larger eps_band or importance sampling"))
}

/// Monte Carlo check of the band decomposition
/// `(1/p) ln ∫_B exp(-(β-a)ᵀXᵀX(β-a)/(2Δ)) dπ₀ ≈ onsager_term + (1/p) ln Vol(a, ε)`.
///
/// Inside the band the cross term between the in-span and complement parts
/// of `β - a` and the shift of the complement radius are bounded by
/// `C·ε` with `C = (λ_max(XᵀX)/Δ)(√2 + √(2s) + 2ε)`.
pub fn band_mc_check(instance: &Instance, delta: f64, a: &DVector<f64>, eps_band: f64, num_samples: usize) -> Result<BandMcReport> {
    let p = instance.p();
    let pf = p as f64;
    let terms = oracle::band_free_energy_with(instance, delta, a, SpanPolicy::Collapse)?;
    let basis = oracle::band_basis_with(instance, a, SpanPolicy::Collapse)?;
    if basis.is_empty() {
        return Err(Error::DegenerateSpan("the band needs a nonzero center or field".into()));
    }
    let center: Vec<f64> = basis.iter().map(|u| u.dot(a) / pf.sqrt()).collect();
    let mut r = rng::stream(instance.config.seed, &[rng::label("sampler.band"), eps_band.to_bits()]);
    let d = band_draws(instance, Some(delta), a, &basis, &center, eps_band, num_samples, &mut r)?;
    if d.accepted < 100 {
        return Err(too_few(d.accepted));
    }
    let f = d.accepted as f64 / num_samples as f64;
    let m = d.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = d.log_weights.iter().map(|l| (l - m).exp()).collect();
    let k = w.len() as f64;
    let wm = w.iter().sum::<f64>() / k;
    let wsd = (w.iter().map(|v| (v - wm).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    let mc_value = (f.ln() + m + wm.ln()) / pf;
    let se = (((1.0 - f) / (num_samples as f64 * f)) + (wsd / wm).powi(2) / k).sqrt() / pf;
    let exact_volume = log_box_probability(p, &center, eps_band)? / pf;
    let s = a.norm_squared() / pf;
    let lmax = crate::linalg::thin_svd(&instance.x)?.1.iter().cloned().fold(0.0, f64::max).powi(2);
    let c_bound = lmax / delta * (2f64.sqrt() + (2.0 * s).sqrt() + 2.0 * eps_band);
    let reference = terms.onsager_term + exact_volume;
    Ok(BandMcReport {
        p,
        eps_band,
        span_dim: basis.len(),
        num_samples,
        accepted: d.accepted,
        mc_volume: f.ln() / pf,
        exact_volume,
        leading_volume: terms.volume_term,
        mc_value,
        onsager_term: terms.onsager_term,
        reference,
        se,
        c_bound,
        pass: (mc_value - reference).abs() <= c_bound * eps_band + 3.0 * se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qf_uniform(p: usize) -> QuadraticForm {
        QuadraticForm::from_spectrum(DVector::zeros(p), DVector::zeros(p), 0.0).unwrap()
    }

    #[test]
    fn chain_config_validation() {
        let mut c = ChainConfig::with_retained(100, 50, 2, 0);
        assert!(c.validate().is_ok());
        assert_eq!(c.retained(), 100);
        c.burn_in = c.steps;
        assert!(c.validate().is_err());
    }

    #[test]
    fn uniform_target_always_accepts() {
        let cfg = ChainConfig::with_retained(500, 200, 1, 3);
        let reps = mcmc_quadratic(&qf_uniform(20), &cfg, 3).unwrap();
        assert_eq!(reps.accept_rate, 1.0);
        assert_eq!(reps.samples.len(), 1500);
        for (_, v) in &reps.samples {
            assert!((v.norm_squared() - 20.0).abs() < 1e-8);
        }
    }

    #[test]
    fn overlaps_of_fixed_replicas() {
        let b = DVector::from_fn(8, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let reps = ReplicaSet::from_samples((0..3).flat_map(|c| (0..12).map(move |_| c)).map(|c| (c, b.clone())).collect()).unwrap();
        let st = overlap_stats(&reps, &b).unwrap();
        assert!((st.mean_r12 - 1.0).abs() < 1e-15 && st.var_r12 < 1e-30 && (st.mean_r1star - 1.0).abs() < 1e-15);

        let reps = ReplicaSet::from_samples((0..12).flat_map(|_| [(0, b.clone()), (1, -&b)]).collect()).unwrap();
        let st = overlap_stats(&reps, &b).unwrap();
        assert!((st.mean_r12 + 1.0).abs() < 1e-15);

        let short = ReplicaSet::from_samples((0..5).flat_map(|_| [(0, b.clone()), (1, b.clone())]).collect()).unwrap();
        assert!(overlap_stats(&short, &b).is_err());
    }

    #[test]
    fn autocorr_of_white_noise_is_near_one() {
        let mut r = rng::stream(1, &[]);
        let x: Vec<f64> = (0..5000).map(|_| r.sample(StandardNormal)).collect();
        let t = integrated_autocorr_time(&x);
        assert!(t > 0.8 && t < 1.3, "{t}");
    }

    #[test]
    fn box_probability_whole_sphere() {
        // a box covering the disk has probability one
        assert!(log_box_probability(30, &[0.0, 0.0], 1.0).unwrap().abs() < 1e-8);
        assert!(log_box_probability(30, &[0.0], 1.0).unwrap().abs() < 1e-9);
    }
}
