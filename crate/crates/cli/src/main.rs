use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::Rng;
use serde_json::{json, Value};

use tapsphere::error::Error;
use tapsphere::harness::{self, ExperimentName, ExperimentSpec};
use tapsphere::io::{self as tio, Format, Table};
use tapsphere::model::{self, Instance, ModelConfig};
use tapsphere::{oracle, rng, sampler, spectra, tap};

#[derive(Parser)]
#[command(name = "tapsphere", version, about = "TAP free energy and posterior diagnostics for spherical-prior linear regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw an instance and write it as JSON (or binary with a .bin extension).
    Gen {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Log-partition function per coordinate.
    FreeEnergy {
        #[command(flatten)]
        model: ModelArgs,
        /// saddle, contour, mc or all.
        #[arg(long, default_value = "saddle")]
        method: String,
        /// Prior samples for the Monte Carlo estimate.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Maximize the TAP functional.
    Tap {
        #[command(flatten)]
        model: ModelArgs,
        /// svd or ascent.
        #[arg(long, default_value = "svd")]
        method: String,
        #[arg(long, default_value_t = tap::DEFAULT_GRID)]
        grid: usize,
        /// Random starts for gradient ascent.
        #[arg(long, default_value_t = 1)]
        starts: usize,
        #[arg(long, default_value_t = 20_000)]
        max_iters: usize,
        /// Write the profile φ(s) here.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// csv or json, for the side table.
        #[arg(long, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample the posterior with parallel chains.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        /// Retained draws per chain.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 2000)]
        burn_in: usize,
        #[arg(long, default_value_t = 10)]
        thin: usize,
        #[arg(long, default_value_t = 4)]
        chains: usize,
        #[arg(long, default_value_t = 0.3)]
        target_accept: f64,
        /// Write cross-chain overlaps here.
        #[arg(long)]
        overlaps: Option<PathBuf>,
        /// Write per-chain energy traces here.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// csv or json, for the side table.
        #[arg(long, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Annealed free energy and second-moment diagnostics.
    Annealed {
        #[arg(long, default_value_t = 100)]
        p: usize,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 10.0)]
        delta: f64,
        /// Dimensions for the (1/p) ln γ₀ trend.
        #[arg(long, value_delimiter = ',')]
        gamma0: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spectrum of XᵀX against Marchenko–Pastur.
    Spectra {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        /// Write the histogram here.
        #[arg(long)]
        histogram: Option<PathBuf>,
        /// csv or json, for the side table.
        #[arg(long, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named experiment.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Dimension [default: 100].
    #[arg(long)]
    p: Option<usize>,
    /// Number of observations [default: round(alpha·p), or 2p].
    #[arg(long)]
    n: Option<usize>,
    /// Sampling ratio n/p.
    #[arg(long)]
    alpha: Option<f64>,
    /// Noise variance [default: 10].
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Load the instance from a file written by `gen`.
    #[arg(long)]
    instance: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// theorem1-gap, band-decomposition, overlap-concentration, annealed-checks,
    /// restricted-profile, onsager-gap or spectra-report.
    name: String,
    /// Comma-separated dimensions.
    #[arg(long, value_delimiter = ',')]
    p: Vec<usize>,
    /// Comma-separated noise variances.
    #[arg(long, value_delimiter = ',')]
    delta: Vec<f64>,
    /// Comma-separated sampling ratios.
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    /// `a..b` or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, env = "TAPSPHERE_WORKERS")]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<Format>,
    /// JSON experiment spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest path (default: `<out>.manifest.json`, or stderr).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Json(_) | Error::Format(_) => Failure::Usage(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Numerical(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl ModelArgs {
    fn load(&self) -> CliResult<(Instance, f64)> {
        if let Some(path) = &self.instance {
            let inst = read_instance(path)?;
            let delta = self.delta.unwrap_or(inst.config.delta);
            return Ok((inst, delta));
        }
        let p = self.p.unwrap_or(100);
        let delta = self.delta.unwrap_or(10.0);
        let n = resolve_n(p, self.n, self.alpha)?;
        let inst = model::generate_instance(&ModelConfig::new(p, n, delta, self.seed)?)?;
        Ok((inst, delta))
    }
}

fn resolve_n(p: usize, n: Option<usize>, alpha: Option<f64>) -> CliResult<usize> {
    match (n, alpha) {
        (Some(n), Some(a)) if (a * p as f64).round() as usize != n => Err(usage(format!("--n {n} and --alpha {a} disagree at p = {p}"))),
        (Some(n), _) => Ok(n),
        (None, Some(a)) => Ok((a * p as f64).round() as usize),
        (None, None) => Ok(2 * p),
    }
}

fn read_instance(path: &Path) -> CliResult<Instance> {
    let f = File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "bin") {
        Ok(tio::read_instance_binary(BufReader::new(f))?)
    } else {
        Ok(tio::instance_from_json(&io::read_to_string(f)?)?)
    }
}

fn sink(out: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit_json(out: &Option<PathBuf>, v: &Value) -> CliResult<()> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(|e| Failure::Numerical(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_table(path: &Path, table: &Table, format: Format) -> CliResult<()> {
    let w = BufWriter::new(File::create(path)?);
    table.write(format, w)?.flush()?;
    Ok(())
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn provenance(inst: &Instance, delta: f64) -> Value {
    json!({"p": inst.p(), "n": inst.n(), "delta": delta, "seed": inst.config.seed})
}

fn cmd_gen(model: &ModelArgs, out: &Option<PathBuf>) -> CliResult<()> {
    let (inst, _) = model.load()?;
    match out {
        Some(p) if p.extension().is_some_and(|e| e == "bin") => {
            let mut w = BufWriter::new(File::create(p)?);
            tio::write_instance_binary(&inst, &mut w)?;
            w.flush()?;
        }
        _ => {
            let mut w = sink(out)?;
            writeln!(w, "{}", tio::instance_to_json(&inst)?)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_free_energy(model: &ModelArgs, method: &str, samples: usize, out: &Option<PathBuf>) -> CliResult<()> {
    let (inst, delta) = model.load()?;
    let qf = oracle::reduce_to_quadratic(&inst, delta)?;
    let mut v = provenance(&inst, delta);
    let all = method == "all";
    if !matches!(method, "saddle" | "contour" | "mc" | "all") {
        return Err(usage(format!("unknown method '{method}' (expected saddle, contour, mc or all)")));
    }
    if all || method == "saddle" {
        v["saddle"] = to_value(&oracle::log_partition_saddle(&qf)?);
    }
    if all || method == "contour" {
        v["contour"] = to_value(&oracle::log_partition_contour(&qf, oracle::CONTOUR_HALF_WIDTH, oracle::CONTOUR_NODES)?);
    }
    if all || method == "mc" {
        let mut r = rng::stream(inst.config.seed, &[rng::label("cli.mc")]);
        v["mc"] = to_value(&oracle::mc_log_partition(&inst, delta, samples, &mut r)?);
    }
    v["annealed"] = json!(oracle::annealed_free_energy(inst.p(), inst.n(), delta));
    emit_json(out, &v)
}

#[allow(clippy::too_many_arguments)]
fn cmd_tap(
    model: &ModelArgs,
    method: &str,
    grid: usize,
    starts: usize,
    max_iters: usize,
    profile: &Option<PathBuf>,
    format: Format,
    out: &Option<PathBuf>,
) -> CliResult<()> {
    let (inst, delta) = model.load()?;
    let opt = match method {
        "svd" => tap::sup_tap_svd(&inst, delta, grid, tap::DEFAULT_S_TOL)?,
        "ascent" => {
            if starts == 0 {
                return Err(usage("--starts must be at least 1"));
            }
            let p = inst.p();
            let mut best: Option<tap::TapOptimum> = None;
            for k in 0..starts {
                let a0 = if k == 0 {
                    DVector::zeros(p)
                } else {
                    let mut r = rng::stream(inst.config.seed, &[rng::label("cli.starts"), k as u64]);
                    let u: f64 = r.random_range(0.0..0.9);
                    model::sample_uniform_sphere(p, (p as f64 * u).sqrt(), &mut r)
                };
                let o = tap::sup_tap_gradient_ascent(&inst, delta, &a0, max_iters, 1e-12)?;
                if best.as_ref().is_none_or(|b| o.value > b.value) {
                    best = Some(o);
                }
            }
            best.expect("at least one start")
        }
        m => return Err(usage(format!("unknown method '{m}' (expected svd or ascent)"))),
    };
    if let Some(path) = profile {
        let cache = tap::build_svd_cache(&inst)?;
        let pts = tap::tap_profile(&cache, delta, inst.alpha(), grid)?;
        let mut t = Table::new(&["s", "q_star", "term_onsager", "term_volume", "phi"]);
        for pt in &pts {
            t.rows.push(vec![pt.s.into(), pt.q_star.into(), pt.term_onsager.into(), pt.term_volume.into(), pt.phi.into()]);
        }
        write_table(path, &t, format)?;
    }
    let mut v = provenance(&inst, delta);
    for (k, x) in [
        ("value", json!(opt.value)),
        ("s_star", json!(opt.s_star)),
        ("q_star", json!(opt.q_star)),
        ("terms", to_value(&opt.terms)),
        ("method", to_value(&opt.method)),
        ("iterations", json!(opt.iterations)),
        ("near_optima", to_value(&opt.near_optima)),
    ] {
        v[k] = x;
    }
    emit_json(out, &v)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    model: &ModelArgs,
    steps: usize,
    burn_in: usize,
    thin: usize,
    chains: usize,
    target_accept: f64,
    overlaps: &Option<PathBuf>,
    traces: &Option<PathBuf>,
    format: Format,
    out: &Option<PathBuf>,
) -> CliResult<()> {
    let (inst, delta) = model.load()?;
    let chain_seed = rng::derive_seed(model.seed, &[rng::label("cli.sample")]);
    let cfg = sampler::ChainConfig { target_accept, ..sampler::ChainConfig::with_retained(steps, burn_in, thin, chain_seed) };
    let reps = sampler::mcmc_posterior(sampler::Target::Base(&inst), delta, &cfg, chains)?;
    let stats = sampler::overlap_stats(&reps, &inst.beta0)?;
    if let Some(path) = overlaps {
        let mut t = Table::new(&["chain_i", "chain_j", "r12"]);
        for (i, j, r) in reps.pair_overlaps() {
            t.rows.push(vec![i.into(), j.into(), r.into()]);
        }
        write_table(path, &t, format)?;
    }
    if let Some(path) = traces {
        let mut t = Table::new(&["chain", "index", "energy"]);
        for (c, tr) in reps.energy_traces.iter().enumerate() {
            for (i, e) in tr.iter().enumerate() {
                t.rows.push(vec![c.into(), i.into(), (*e).into()]);
            }
        }
        write_table(path, &t, format)?;
    }
    let mut v = provenance(&inst, delta);
    v["chain"] = to_value(&cfg);
    v["chains"] = json!(chains);
    v["accept_rate"] = json!(reps.accept_rate);
    v["per_chain_accept"] = json!(reps.per_chain_accept);
    v["ess"] = json!(reps.ess);
    v["overlaps"] = to_value(&stats);
    emit_json(out, &v)
}

fn cmd_annealed(p: usize, n: Option<usize>, alpha: Option<f64>, delta: f64, gamma0: &[usize], out: &Option<PathBuf>) -> CliResult<()> {
    let n = resolve_n(p, n, alpha)?;
    let rep = oracle::annealed_second_moment(p, n, delta)?;
    let mut v = to_value(&rep);
    if !gamma0.is_empty() {
        let a = n as f64 / p as f64;
        let trend = oracle::log_gamma0_trend(gamma0, a, delta)?;
        v["gamma0_trend"] = gamma0.iter().zip(&trend).map(|(p, g)| json!({"p": p, "log_gamma0_over_p": g})).collect();
    }
    emit_json(out, &v)
}

fn cmd_spectra(model: &ModelArgs, bins: usize, histogram: &Option<PathBuf>, format: Format, out: &Option<PathBuf>) -> CliResult<()> {
    let (inst, delta) = model.load()?;
    let rep = spectra::mp_diagnostics(&inst)?;
    if let Some(path) = histogram {
        let mut t = Table::new(&["bin_left", "bin_right", "empirical_mass", "mp_mass"]);
        for (l, r, e, m) in spectra::mp_histogram(&rep, bins)? {
            t.rows.push(vec![l.into(), r.into(), e.into(), m.into()]);
        }
        write_table(path, &t, format)?;
    }
    let mut v = to_value(&rep);
    v["delta"] = json!(delta);
    v["seed"] = json!(inst.config.seed);
    emit_json(out, &v)
}

fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let bad = || usage(format!("cannot parse seeds '{s}' (expected a..b or a comma-separated list)"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b <= a {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

fn cmd_experiment(args: &ExperimentArgs) -> CliResult<()> {
    let name: ExperimentName = args.name.parse()?;
    let mut spec = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            let spec: ExperimentSpec = serde_json::from_str(&text).map_err(|e| usage(format!("bad config {}: {e}", path.display())))?;
            if spec.name != name {
                return Err(usage(format!("config is for {}, not {name}", spec.name)));
            }
            spec
        }
        None => ExperimentSpec::preset(name),
    };
    if !args.p.is_empty() {
        spec.p = args.p.clone();
    }
    if !args.delta.is_empty() {
        spec.delta = args.delta.clone();
    }
    if !args.alpha.is_empty() {
        spec.alpha = args.alpha.clone();
    }
    if let Some(s) = &args.seeds {
        spec.seeds = parse_seeds(s)?;
    }
    if let Some(w) = args.workers {
        spec.workers = w;
    }
    if let Some(f) = args.format {
        spec.format = f;
    }
    if let Some(o) = &args.out {
        spec.output_path = Some(o.display().to_string());
    }
    spec.validate()?;

    let out_path = spec.output_path.clone().map(PathBuf::from);
    let run = harness::run_experiment(&spec, sink(&out_path)?)?;
    let mut w = run.sink;
    w.flush()?;
    drop(w);

    let manifest = serde_json::to_string_pretty(&run.manifest).map_err(|e| Failure::Numerical(e.to_string()))?;
    let manifest_path =
        args.manifest.clone().or_else(|| out_path.as_ref().map(|p| PathBuf::from(format!("{}.manifest.json", p.display()))));
    match manifest_path {
        Some(p) => std::fs::write(p, manifest + "\n")?,
        None => eprintln!("{manifest}"),
    }
    log::info!("{} rows, digest {}, {:.1} s", run.manifest.rows, run.manifest.results_digest, run.manifest.wall_time_secs);
    if !run.manifest.failures.is_empty() {
        return Err(Failure::Numerical(format!("{} task(s) failed; see the failure rows", run.manifest.failures.len())));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen { model, out } => cmd_gen(model, out),
        Command::FreeEnergy { model, method, samples, out } => cmd_free_energy(model, method, *samples, out),
        Command::Tap { model, method, grid, starts, max_iters, profile, format, out } => {
            cmd_tap(model, method, *grid, *starts, *max_iters, profile, *format, out)
        }
        Command::Sample { model, steps, burn_in, thin, chains, target_accept, overlaps, traces, format, out } => {
            cmd_sample(model, *steps, *burn_in, *thin, *chains, *target_accept, overlaps, traces, *format, out)
        }
        Command::Annealed { p, n, alpha, delta, gamma0, out } => cmd_annealed(*p, *n, *alpha, *delta, gamma0, out),
        Command::Spectra { model, bins, histogram, format, out } => cmd_spectra(model, *bins, histogram, *format, out),
        Command::Experiment(args) => cmd_experiment(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
