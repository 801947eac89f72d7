//! Command-line front end: TOML config parsing, `run`, `bench` and
//! `diagnose` subcommands. Every emitted record carries the SHA-256 of the
//! config file bytes and the master seed.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::batching::{BatchParams, Schedule, UpdateMode};
use crate::dynamics::{consensus_condition, HeavisideMode, Variant, VariantParams};
use crate::ensemble::InitialDistribution;
use crate::error::CboError;
use crate::harness::{
    campaign, diagnostic_frozen_moment, diagnostic_laplace, diagnostic_pairwise,
    run_with, summarize, DecaySetup, NoiseGeometry, Norm, RunConfig, RunResult, SuccessCriterion,
    Termination,
};
use crate::integrators::Integrator;
use crate::objectives::{benchmark, ObjectiveFunction};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_DIAGNOSTIC_FAIL: i32 = 3;

const CONFIG_HELP: &str = "\
Config file (TOML). Unknown keys are rejected. Defaults in brackets.

  [objective]  name (ackley | rastrigin | griewank | zakharov | wavy), dimension
  [variant]    kind [anisotropic] (original | anisotropic | common_noise | personal_best | sphere)
               integrator [euler] (euler | split | frozen)
               heaviside [off for original, exact for personal_best] (off | exact | regularized)
  [params]     lambda [1.0]  sigma [0.7]  alpha [30.0]  dt [0.01]  beta [30.0]  epsilon [0.01]
  [batching]   batch_size (required in this section)  update_mode [partial] (partial | full)
               gamma [params.dt]  sigma [params.sigma]
                 (a number, or { kind = \"geometric\", value = .., rate = .. })
               stop_eps [1e-12]  max_epochs [harness.max_steps]
               Random-batch runs use the anisotropic variant.
  [harness]    particles [100]  max_steps [10000]  record_every [100]  seed [0]  runs [100]
               init [uniform on the objective's search box; sphere for the sphere variant]
                 ({ kind = \"uniform\", lo, hi } | { kind = \"gaussian\", mean, variance } | { kind = \"sphere\" })
               variants [variant.kind]  success_tol [0.25]  success_norm [infinity] (infinity | euclidean)
               stop_eps [none]  replicas [100] (pairwise diagnostic)
               alphas [[1, 10, 100]] (laplace diagnostic)
  [output]     dir [none]

Exit codes: 0 success, 1 config error, 2 divergence (run), 3 diagnostic FAIL.
CBO_THREADS sets the worker count; results do not depend on it.";

#[derive(Debug, Parser)]
#[command(name = "cbo", version, about = "Consensus-based optimisation runs, campaigns and diagnostics")]
#[command(after_long_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Path to the TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overrides harness.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files, overrides output.dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Trajectory recording interval, overrides harness.record_every.
    #[arg(long, global = true)]
    pub record_every: Option<u64>,
    /// Enables random-batch mode with this batch size.
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// partial | full
    #[arg(long, global = true)]
    pub update_mode: Option<String>,
    #[arg(long, global = true)]
    pub stop_eps: Option<f64>,
    #[arg(long, global = true)]
    pub max_epochs: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One run; trajectory JSON lines and a summary line on stdout.
    Run,
    /// Seeded campaign per variant; CSV summary on stdout.
    Bench,
    /// Diagnostic suite: moments | pairwise | laplace | variance.
    Diagnose { suite: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub variant: VariantSection,
    #[serde(default)]
    pub params: ParamsSection,
    pub batching: Option<BatchingSection>,
    pub harness: Option<HarnessSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub name: String,
    pub dimension: usize,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSection {
    pub kind: Option<Variant>,
    #[serde(default)]
    pub integrator: Integrator,
    pub heaviside: Option<HeavisideMode>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub lambda: Option<f64>,
    pub sigma: Option<f64>,
    pub alpha: Option<f64>,
    pub dt: Option<f64>,
    pub beta: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Constant(f64),
    Schedule(Schedule),
}

impl ScheduleSpec {
    fn resolve(&self) -> Schedule {
        match self {
            ScheduleSpec::Constant(value) => Schedule::Constant { value: *value },
            ScheduleSpec::Schedule(s) => *s,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchingSection {
    pub batch_size: usize,
    #[serde(default)]
    pub update_mode: UpdateMode,
    pub gamma: Option<ScheduleSpec>,
    pub sigma: Option<ScheduleSpec>,
    pub stop_eps: Option<f64>,
    pub max_epochs: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessSection {
    #[serde(default = "defaults::particles")]
    pub particles: usize,
    pub init: Option<InitialDistribution>,
    #[serde(default = "defaults::max_steps")]
    pub max_steps: u64,
    #[serde(default = "defaults::record_every")]
    pub record_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::runs")]
    pub runs: usize,
    pub variants: Option<Vec<Variant>>,
    #[serde(default = "defaults::success_tol")]
    pub success_tol: f64,
    #[serde(default = "defaults::success_norm")]
    pub success_norm: Norm,
    pub stop_eps: Option<f64>,
    #[serde(default = "defaults::replicas")]
    pub replicas: usize,
    #[serde(default = "defaults::alphas")]
    pub alphas: Vec<f64>,
}

impl Default for HarnessSection {
    fn default() -> Self {
        toml::from_str("").expect("all harness keys have defaults")
    }
}

mod defaults {
    use crate::harness::Norm;

    pub fn particles() -> usize {
        100
    }
    pub fn max_steps() -> u64 {
        10_000
    }
    pub fn record_every() -> u64 {
        100
    }
    pub fn runs() -> usize {
        100
    }
    pub fn success_tol() -> f64 {
        0.25
    }
    pub fn success_norm() -> Norm {
        Norm::Infinity
    }
    pub fn replicas() -> usize {
        100
    }
    pub fn alphas() -> Vec<f64> {
        vec![1.0, 10.0, 100.0]
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// Config error with the offending key path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn at(section: &str, err: CboError) -> ConfigError {
    match err {
        CboError::InvalidParameter { name, reason } => {
            let path = match name.as_str() {
                "integrator" | "heaviside" => format!("variant.{name}"),
                _ => format!("{section}.{name}"),
            };
            ConfigError(format!("invalid value for `{path}`: {reason}"))
        }
        other => ConfigError(format!("{section}: {other}")),
    }
}

/// A parsed config with overrides applied, plus what is needed for provenance.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub file: ConfigFile,
    pub harness: HarnessSection,
    pub run: RunConfig,
    pub objective: ObjectiveFunction,
    pub config_hash: String,
    pub out_dir: Option<PathBuf>,
}

pub fn parse_config(text: &str) -> Result<ConfigFile, ConfigError> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        if path.is_empty() || path == "." {
            ConfigError(format!("config: {msg}"))
        } else {
            ConfigError(format!("config key `{path}`: {msg}"))
        }
    })
}

pub fn config_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Build the run configuration for `variant` from a parsed file.
fn build_run(
    file: &ConfigFile,
    harness: &HarnessSection,
    variant: Variant,
    objective: &ObjectiveFunction,
) -> Result<RunConfig, ConfigError> {
    let d = file.objective.dimension;
    let base = VariantParams::new(variant);
    let p = &file.params;
    let params = VariantParams {
        variant,
        lambda: p.lambda.unwrap_or(base.lambda),
        sigma: p.sigma.unwrap_or(base.sigma),
        alpha: p.alpha.unwrap_or(base.alpha),
        dt: p.dt.unwrap_or(base.dt),
        beta: p.beta.unwrap_or(base.beta),
        epsilon: p.epsilon.unwrap_or(base.epsilon),
        heaviside: file.variant.heaviside.unwrap_or(base.heaviside),
        integrator: file.variant.integrator,
    };
    params.validate().map_err(|e| at("params", e))?;

    let init = match harness.init.clone() {
        Some(init) => init,
        None if variant == Variant::Sphere => InitialDistribution::Sphere,
        None => {
            let (lo, hi) = objective.metadata().expect("benchmarks carry metadata").search_box;
            InitialDistribution::Uniform { lo, hi }
        }
    };
    init.validate().map_err(|e| at("harness", e))?;

    let mut max_steps = harness.max_steps;
    let batching = match &file.batching {
        None => None,
        Some(b) => {
            if variant != Variant::Anisotropic {
                return Err(ConfigError(format!(
                    "invalid value for `variant.kind`: random-batch runs need the anisotropic variant, got {}",
                    variant.name()
                )));
            }
            if let Some(epochs) = b.max_epochs {
                max_steps = epochs;
            }
            let bp = BatchParams {
                batch_size: b.batch_size,
                update_mode: b.update_mode,
                gamma: b.gamma.as_ref().map_or(Schedule::Constant { value: params.dt }, ScheduleSpec::resolve),
                sigma: b.sigma.as_ref().map_or(Schedule::Constant { value: params.sigma }, ScheduleSpec::resolve),
                stop_eps: b.stop_eps.unwrap_or(1e-12),
                integrator: params.integrator,
            };
            bp.validate(harness.particles).map_err(|e| at("batching", e))?;
            Some(bp)
        }
    };

    let run = RunConfig {
        objective: file.objective.name.clone(),
        dimension: d,
        params,
        batching,
        particles: harness.particles,
        init,
        max_steps,
        seed: harness.seed,
        record_every: harness.record_every,
        stop_eps: harness.stop_eps,
    };
    run.validate().map_err(|e| at("harness", e))?;
    Ok(run)
}

/// Read, parse and validate a config file, then apply command-line overrides.
pub fn resolve(cli: &Cli) -> Result<Resolved, ConfigError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError("missing --config PATH".into()))?;
    let bytes = fs::read(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| ConfigError(format!("{} is not valid UTF-8", path.display())))?;
    let mut file = parse_config(&text)?;

    if let Some(m) = cli.batch_size {
        let section = file.batching.get_or_insert(BatchingSection {
            batch_size: m,
            update_mode: UpdateMode::Partial,
            gamma: None,
            sigma: None,
            stop_eps: None,
            max_epochs: None,
        });
        section.batch_size = m;
    }
    let batch_flags = cli.update_mode.is_some() || cli.max_epochs.is_some() || cli.stop_eps.is_some();
    if let Some(b) = file.batching.as_mut() {
        if let Some(mode) = &cli.update_mode {
            b.update_mode = match mode.as_str() {
                "partial" => UpdateMode::Partial,
                "full" => UpdateMode::Full,
                other => {
                    return Err(ConfigError(format!(
                        "invalid value for `--update-mode`: expected partial or full, got {other}"
                    )))
                }
            };
        }
        if let Some(e) = cli.max_epochs {
            b.max_epochs = Some(e);
        }
        if let Some(e) = cli.stop_eps {
            b.stop_eps = Some(e);
        }
    } else if batch_flags {
        return Err(ConfigError(
            "--update-mode, --stop-eps and --max-epochs need a [batching] section or --batch-size".into(),
        ));
    }

    let mut harness = file.harness.clone().unwrap_or_default();
    if let Some(seed) = cli.seed {
        harness.seed = seed;
    }
    if let Some(k) = cli.record_every {
        harness.record_every = k;
    }
    if harness.success_tol.is_nan() || harness.success_tol <= 0.0 {
        return Err(ConfigError(format!(
            "invalid value for `harness.success_tol`: must be > 0, got {}",
            harness.success_tol
        )));
    }

    let objective = benchmark(&file.objective.name, file.objective.dimension).map_err(|e| match e {
        CboError::Unknown { .. } => ConfigError(format!("invalid value for `objective.name`: {e}")),
        other => ConfigError(format!("invalid value for `objective.dimension`: {other}")),
    })?;
    let variant = file.variant.kind.unwrap_or(Variant::Anisotropic);
    let run = build_run(&file, &harness, variant, &objective)?;
    let out_dir = cli.out.clone().or_else(|| file.output.dir.clone());
    Ok(Resolved {
        file,
        harness,
        run,
        objective,
        config_hash: config_hash(&bytes),
        out_dir,
    })
}

fn success_criterion(r: &Resolved) -> SuccessCriterion {
    SuccessCriterion {
        target: r.objective.metadata().expect("benchmarks carry metadata").minimizer.clone(),
        tolerance: r.harness.success_tol,
        norm: r.harness.success_norm,
    }
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::StopCriterion => "stop_criterion",
        Termination::MaxSteps => "max_steps",
        Termination::Divergence => "divergence",
    }
}

fn norm_name(n: Norm) -> &'static str {
    match n {
        Norm::Infinity => "infinity",
        Norm::Euclidean => "euclidean",
    }
}

/// JSON lines for a run: one per recorded trajectory point, then a summary.
pub fn run_records(r: &Resolved, result: &RunResult) -> Vec<String> {
    let mut lines = Vec::with_capacity(result.trajectory.len() + 1);
    for p in &result.trajectory {
        lines.push(
            json!({
                "record": "trajectory",
                "config_hash": r.config_hash,
                "seed": result.seed,
                "step": p.step,
                "time": p.time,
                "v_f": p.v_f,
                "f_at_v": p.f_at_v,
                "mean": p.mean,
                "variance": p.variance,
            })
            .to_string(),
        );
    }
    let crit = success_criterion(r);
    lines.push(
        json!({
            "record": "summary",
            "config_hash": r.config_hash,
            "seed": result.seed,
            "objective": r.run.objective,
            "d": r.run.dimension,
            "N": r.run.particles,
            "variant": r.run.params.variant.name(),
            "integrator": r.run.params.integrator.name(),
            "terminated_by": termination_name(result.terminated_by),
            "steps": result.steps,
            "v_f": result.final_consensus.v_f,
            "f_at_v": result.final_consensus.f_at_v,
            "success": crit.is_success(&result.final_consensus.v_f),
            "success_tol": crit.tolerance,
            "success_norm": norm_name(crit.norm),
            "error": result.error,
        })
        .to_string(),
    );
    lines
}

fn emit(out: &mut dyn Write, text: &str) -> std::io::Result<()> {
    out.write_all(text.as_bytes())
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<(), ConfigError> {
    fs::create_dir_all(dir).map_err(|e| ConfigError(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| ConfigError(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_run(r: &Resolved, out: &mut dyn Write) -> Result<i32, ConfigError> {
    let result = run_with(&r.run, &r.objective).map_err(|e| at("harness", e))?;
    let mut text = String::new();
    for line in run_records(r, &result) {
        text.push_str(&line);
        text.push('\n');
    }
    emit(out, &text).map_err(|e| ConfigError(format!("stdout: {e}")))?;
    if let Some(dir) = &r.out_dir {
        write_file(dir, "trajectory.jsonl", &text)?;
        if let Some(e) = &result.final_ensemble {
            write_file(dir, "final_ensemble.csv", &e.to_csv())?;
        }
    }
    Ok(match result.terminated_by {
        Termination::Divergence => EXIT_DIVERGENCE,
        _ => EXIT_OK,
    })
}

#[derive(Debug, Serialize)]
struct BenchRow<'a> {
    objective: &'a str,
    d: usize,
    #[serde(rename = "N")]
    n: usize,
    variant: &'a str,
    success_rate: f64,
    mean_final_f: f64,
    median_steps: f64,
    config_hash: &'a str,
    seed: u64,
}

pub fn cmd_bench(r: &Resolved, out: &mut dyn Write) -> Result<i32, ConfigError> {
    if r.file.harness.is_none() {
        return Err(ConfigError("bench needs a [harness] section describing the campaign".into()));
    }
    if r.harness.runs == 0 {
        return Err(ConfigError("invalid value for `harness.runs`: must be >= 1".into()));
    }
    let mut variants = r.harness.variants.clone().unwrap_or_else(|| vec![r.run.params.variant]);
    variants.sort_by_key(|v| v.name());
    variants.dedup();

    let crit = success_criterion(r);
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    let mut jsonl = String::new();
    for variant in variants {
        let cfg = build_run(&r.file, &r.harness, variant, &r.objective)?;
        let results = campaign(&cfg, &r.objective, r.harness.runs).map_err(|e| at("harness", e))?;
        let s = summarize(&cfg, &results, &crit).map_err(|e| at("harness", e))?;
        csv_out
            .serialize(BenchRow {
                objective: &s.objective,
                d: s.d,
                n: s.n,
                variant: &s.variant,
                success_rate: s.success_rate,
                mean_final_f: s.mean_final_f,
                median_steps: s.median_steps,
                config_hash: &r.config_hash,
                seed: r.harness.seed,
            })
            .map_err(|e| ConfigError(format!("csv: {e}")))?;
        for (index, res) in results.iter().enumerate() {
            let line = json!({
                "record": "run",
                "config_hash": r.config_hash,
                "seed": r.harness.seed,
                "run_index": index,
                "run_seed": res.seed,
                "variant": variant.name(),
                "terminated_by": termination_name(res.terminated_by),
                "steps": res.steps,
                "v_f": res.final_consensus.v_f,
                "f_at_v": res.final_consensus.f_at_v,
                "success": crit.is_success(&res.final_consensus.v_f),
            });
            jsonl.push_str(&line.to_string());
            jsonl.push('\n');
        }
    }
    let bytes = csv_out.into_inner().map_err(|e| ConfigError(format!("csv: {e}")))?;
    let text = String::from_utf8(bytes).expect("csv output is UTF-8");
    emit(out, &text).map_err(|e| ConfigError(format!("stdout: {e}")))?;
    if let Some(dir) = &r.out_dir {
        write_file(dir, "summary.csv", &text)?;
        write_file(dir, "runs.jsonl", &jsonl)?;
    }
    Ok(EXIT_OK)
}

pub const SUITES: [&str; 4] = ["moments", "pairwise", "laplace", "variance"];

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn decay_setup(r: &Resolved) -> DecaySetup {
    let p = &r.run.params;
    DecaySetup {
        lambda: p.lambda,
        sigma: p.sigma,
        d: r.run.dimension,
        n: r.run.particles,
        dt: p.dt,
        t_end: p.dt * r.run.max_steps as f64,
        seed: r.harness.seed,
        samples: 50,
    }
}

/// Runs a diagnostic suite and writes a small report ending in PASS or FAIL.
///
/// Tolerances: moments 5% relative (1% when σ = 0); pairwise 3% relative
/// when `2λ > σ²`, otherwise a negative fitted rate (growth); laplace 3
/// delta-method standard errors plus monotonicity in α; variance `V(T) <
/// V(0)` in at least 95% of runs when the consensus condition holds,
/// otherwise a run-averaged `V(T)` no smaller than the averaged `V(0)`.
pub fn cmd_diagnose(suite: &str, r: &Resolved, out: &mut dyn Write) -> Result<i32, ConfigError> {
    let tag = format!("config_hash={} seed={}", r.config_hash, r.harness.seed);
    let mut report = format!("suite={suite} {tag}\n");
    let pass = match suite {
        "moments" => {
            let geometry = if r.run.params.variant.is_componentwise() {
                NoiseGeometry::Anisotropic
            } else {
                NoiseGeometry::Isotropic
            };
            let setup = decay_setup(r);
            let diag = diagnostic_frozen_moment(geometry, &setup).map_err(|e| at("harness", e))?;
            let tol = if setup.sigma == 0.0 { 0.01 } else { 0.05 };
            let _ = writeln!(
                report,
                "predicted_rate={:?} fitted_rate={:?} relative_error={:?} tolerance={tol:?}",
                diag.predicted_rate,
                diag.fitted_rate,
                diag.relative_error()
            );
            diag.relative_error() <= tol
        }
        "pairwise" => {
            let setup = decay_setup(r);
            let diag =
                diagnostic_pairwise(&r.objective, &setup, r.harness.replicas).map_err(|e| at("harness", e))?;
            let _ = writeln!(
                report,
                "predicted_rate={:?} fitted_rate={:?} replicas={}",
                diag.predicted_rate, diag.fitted_rate, r.harness.replicas
            );
            if diag.predicted_rate > 0.0 {
                diag.relative_error() <= 0.03
            } else {
                diag.fitted_rate < 0.0
            }
        }
        "laplace" => {
            let d = r.run.dimension;
            let quad = ObjectiveFunction::new("quadratic", d, |x| x.iter().map(|v| v * v).sum())
                .expect("dimension validated");
            let init = InitialDistribution::Gaussian {
                mean: 0.0,
                variance: 1.0,
            };
            let rows = diagnostic_laplace(&quad, &init, &r.harness.alphas, r.run.particles, r.harness.seed)
                .map_err(|e| at("harness", e))?;
            let _ = writeln!(report, "alpha,closed_form,monte_carlo,std_error");
            let mut ok = rows.windows(2).all(|w| w[1].value <= w[0].value);
            for row in &rows {
                let closed = d as f64 / (2.0 * row.alpha) * (1.0 + 2.0 * row.alpha).ln();
                let _ = writeln!(report, "{:?},{closed:?},{:?},{:?}", row.alpha, row.value, row.std_error);
                ok &= (row.value - closed).abs() <= 3.0 * row.std_error;
            }
            ok
        }
        "variance" => {
            let runs = r.harness.runs.max(1);
            let results = campaign(&r.run, &r.objective, runs).map_err(|e| at("harness", e))?;
            let condition = consensus_condition(&r.run.params, r.run.dimension);
            let (mut decayed, mut v0, mut vt) = (0usize, 0.0, 0.0);
            for res in &results {
                if let (Some(first), Some(last)) = (res.trajectory.first(), res.trajectory.last()) {
                    decayed += usize::from(last.variance < first.variance);
                    v0 += first.variance;
                    vt += last.variance;
                }
            }
            let count = results.len() as f64;
            let frac = decayed as f64 / count;
            let _ = writeln!(
                report,
                "consensus_condition={condition} runs={} decayed_fraction={frac:?} mean_V0={:?} mean_VT={:?}",
                results.len(),
                v0 / count,
                vt / count
            );
            if condition {
                frac >= 0.95
            } else {
                // Single paths may still contract; the run average must not.
                vt >= v0
            }
        }
        other => {
            return Err(ConfigError(format!(
                "unknown diagnostic suite `{other}`; expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    let _ = writeln!(report, "verdict={}", verdict(pass));
    emit(out, &report).map_err(|e| ConfigError(format!("stdout: {e}")))?;
    if let Some(dir) = &r.out_dir {
        write_file(dir, &format!("diagnose_{suite}.txt"), &report)?;
    }
    Ok(if pass { EXIT_OK } else { EXIT_DIAGNOSTIC_FAIL })
}

fn configure_threads() -> Result<(), ConfigError> {
    let Ok(value) = std::env::var("CBO_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| ConfigError(format!("CBO_THREADS must be a positive integer, got `{value}`")))?;
    // A second initialisation (e.g. repeated calls in one process) is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Parse `args`, run the subcommand and return the process exit code.
pub fn execute<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = write!(err, "{}", e.render());
            return EXIT_CONFIG;
        }
        Err(e) => {
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    if let Command::Diagnose { suite } = &cli.command {
        if !SUITES.contains(&suite.as_str()) {
            let _ = writeln!(
                err,
                "error: unknown diagnostic suite `{suite}`; expected one of {}",
                SUITES.join(", ")
            );
            return EXIT_CONFIG;
        }
    }
    let outcome = configure_threads().and_then(|()| {
        let resolved = resolve(&cli)?;
        match &cli.command {
            Command::Run => cmd_run(&resolved, out),
            Command::Bench => cmd_bench(&resolved, out),
            Command::Diagnose { suite } => cmd_diagnose(suite, &resolved, out),
        }
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_CONFIG
        }
    }
}
