//! Runs, seeded campaigns and the diagnostics that check the moment laws
//! of the dynamics against Monte Carlo estimates.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batching::{stop_check, BatchDriver, BatchParams};
use crate::consensus::{evaluate, laplace_from_values, weighted_mean, ConsensusPoint};
use crate::dynamics::{
    componentwise_update, isotropic_update, step_common_noise, Dynamics, Variant, VariantParams,
};
use crate::ensemble::{init_ensemble, mean_pairwise_sq_dist, moments, Ensemble, InitialDistribution};
use crate::error::{CboError, Result};
use crate::integrators::Integrator;
use crate::objectives::{benchmark, ObjectiveFunction};
use crate::rng::RngPlan;

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub objective: String,
    pub dimension: usize,
    pub params: VariantParams,
    /// Random-batch driver; when present `max_steps` counts epochs.
    pub batching: Option<BatchParams>,
    pub particles: usize,
    pub init: InitialDistribution,
    pub max_steps: u64,
    pub seed: u64,
    pub record_every: u64,
    /// Stop once `(1/d)|Δv_f|² <= stop_eps` between consecutive steps.
    pub stop_eps: Option<f64>,
}

impl RunConfig {
    pub fn new(objective: &str, dimension: usize, variant: Variant) -> Self {
        let init = if variant == Variant::Sphere {
            InitialDistribution::Sphere
        } else {
            InitialDistribution::Uniform { lo: -3.0, hi: 3.0 }
        };
        Self {
            objective: objective.to_string(),
            dimension,
            params: VariantParams::new(variant),
            batching: None,
            particles: 100,
            init,
            max_steps: 10_000,
            seed: 0,
            record_every: 100,
            stop_eps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(CboError::param("dimension", "must be >= 1"));
        }
        if self.particles == 0 {
            return Err(CboError::param("particles", "must be >= 1"));
        }
        if self.record_every == 0 {
            return Err(CboError::param("record_every", "must be >= 1"));
        }
        if let Some(eps) = self.stop_eps {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(CboError::param("stop_eps", format!("must be > 0, got {eps}")));
            }
        }
        self.params.validate()?;
        self.init.validate()?;
        if self.params.variant == Variant::Sphere && self.init != InitialDistribution::Sphere {
            return Err(CboError::param("init", "the sphere variant needs a sphere initialisation"));
        }
        if let Some(b) = &self.batching {
            b.validate(self.particles)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub time: f64,
    pub v_f: Vec<f64>,
    pub f_at_v: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    StopCriterion,
    MaxSteps,
    Divergence,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_consensus: ConsensusPoint,
    pub terminated_by: Termination,
    /// Completed steps (epochs for batched runs).
    pub steps: u64,
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_time: Duration,
    #[serde(skip)]
    pub final_ensemble: Option<Ensemble>,
}

fn record(e: &Ensemble, c: &ConsensusPoint) -> TrajectoryPoint {
    let (mean, variance) = moments(e);
    TrajectoryPoint {
        step: e.step,
        time: e.time,
        v_f: c.v_f.clone(),
        f_at_v: c.f_at_v,
        mean,
        variance,
    }
}

fn is_run_failure(err: &CboError) -> bool {
    err.is_divergence() || matches!(err, CboError::NonFiniteObjective { .. })
}

/// Execute one run on a benchmark objective named in the config.
pub fn run(config: &RunConfig) -> Result<RunResult> {
    let f = benchmark(&config.objective, config.dimension)?;
    run_with(config, &f)
}

/// Execute one run on an arbitrary objective.
pub fn run_with(config: &RunConfig, f: &ObjectiveFunction) -> Result<RunResult> {
    config.validate()?;
    if f.dimension() != config.dimension {
        return Err(CboError::Dimension(format!(
            "objective is {}-dimensional, config asks for {}",
            f.dimension(),
            config.dimension
        )));
    }
    let start = Instant::now();
    let plan = RngPlan::new(config.seed);
    let mut e = init_ensemble(&config.init, config.particles, config.dimension, &plan)?;
    let mut trajectory = Vec::new();
    let mut terminated_by = Termination::MaxSteps;
    let mut error = None;
    let mut last: Option<ConsensusPoint> = None;
    let mut completed = 0;

    match &config.batching {
        None => {
            let mut dynamics = Dynamics::new(config.params, plan, &e)?;
            for n in 0..config.max_steps {
                let moments_before = (n % config.record_every == 0).then(|| moments(&e));
                let (step, time) = (e.step, e.time);
                let c = match dynamics.step(&mut e, f) {
                    Ok(c) => c,
                    Err(err) if is_run_failure(&err) => {
                        terminated_by = Termination::Divergence;
                        error = Some(err.to_string());
                        break;
                    }
                    Err(err) => return Err(err),
                };
                if let Some((mean, variance)) = moments_before {
                    trajectory.push(TrajectoryPoint {
                        step,
                        time,
                        v_f: c.v_f.clone(),
                        f_at_v: c.f_at_v,
                        mean,
                        variance,
                    });
                }
                completed = n + 1;
                let stop = match (config.stop_eps, &last) {
                    (Some(eps), Some(prev)) => stop_check(&prev.v_f, &c.v_f, eps),
                    _ => false,
                };
                last = Some(c);
                if stop {
                    terminated_by = Termination::StopCriterion;
                    break;
                }
            }
        }
        Some(bp) => {
            let mut driver = BatchDriver::new(
                *bp,
                config.params.lambda,
                config.params.alpha,
                plan,
                config.particles,
            )?;
            for k in 0..config.max_steps {
                if k % config.record_every == 0 {
                    let c = weighted_mean(&e, f, config.params.alpha)?;
                    trajectory.push(record(&e, &c));
                }
                match driver.epoch(&mut e, f) {
                    Ok(outcome) => {
                        completed = k + 1;
                        last = outcome.consensus.last().cloned();
                        if outcome.stopped {
                            terminated_by = Termination::StopCriterion;
                            break;
                        }
                    }
                    Err(err) if is_run_failure(&err) => {
                        terminated_by = Termination::Divergence;
                        error = Some(err.to_string());
                        break;
                    }
                    Err(err) => return Err(err),
                }
            }
        }
    }

    let final_consensus = if terminated_by == Termination::Divergence {
        last.unwrap_or_else(|| ConsensusPoint {
            v_f: vec![f64::NAN; config.dimension],
            f_at_v: f64::NAN,
            log_normalizer: f64::NAN,
        })
    } else {
        let c = weighted_mean(&e, f, config.params.alpha)?;
        if trajectory.last().is_none_or(|p| p.step < e.step) {
            trajectory.push(record(&e, &c));
        }
        c
    };
    Ok(RunResult {
        seed: config.seed,
        trajectory,
        final_consensus,
        terminated_by,
        steps: completed,
        error,
        wall_time: start.elapsed(),
        final_ensemble: Some(e),
    })
}

/// Seed of the `r`-th member of a campaign rooted at `master`.
pub fn campaign_seed(master: u64, r: u64) -> u64 {
    RngPlan::new(master).derive(r).master_seed()
}

/// `runs` independent runs with seeds derived from `config.seed`, in seed-index order.
pub fn campaign(config: &RunConfig, f: &ObjectiveFunction, runs: usize) -> Result<Vec<RunResult>> {
    config.validate()?;
    (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let cfg = RunConfig {
                seed: campaign_seed(config.seed, r),
                ..config.clone()
            };
            run_with(&cfg, f)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Infinity,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriterion {
    pub target: Vec<f64>,
    pub tolerance: f64,
    pub norm: Norm,
}

impl SuccessCriterion {
    /// Infinity-norm ball of radius 0.25 around `target`.
    pub fn new(target: Vec<f64>) -> Self {
        Self {
            target,
            tolerance: 0.25,
            norm: Norm::Infinity,
        }
    }

    pub fn is_success(&self, v: &[f64]) -> bool {
        let mut diffs = v.iter().zip(&self.target).map(|(a, b)| (a - b).abs());
        let dist = match self.norm {
            // f64::max drops NaN, so propagate it by hand.
            Norm::Infinity => diffs.try_fold(0.0, |m: f64, x| (!x.is_nan()).then(|| m.max(x))),
            Norm::Euclidean => Some(diffs.map(|x| x * x).sum::<f64>().sqrt()),
        };
        dist.is_some_and(|dist| dist <= self.tolerance)
    }
}

/// Fraction of runs whose final consensus point lies within the tolerance.
pub fn success_rate(results: &[RunResult], crit: &SuccessCriterion) -> Result<f64> {
    if results.is_empty() {
        return Err(CboError::Dimension("success rate of an empty campaign".into()));
    }
    if crit.tolerance.is_nan() || crit.tolerance <= 0.0 {
        return Err(CboError::param("tolerance", "must be > 0"));
    }
    let mut hits = 0usize;
    for r in results {
        if r.final_consensus.v_f.len() != crit.target.len() {
            return Err(CboError::Dimension(format!(
                "target has length {}, run result has {}",
                crit.target.len(),
                r.final_consensus.v_f.len()
            )));
        }
        hits += usize::from(crit.is_success(&r.final_consensus.v_f));
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Least-squares slope of `ln(value)` against time, negated, so that a
/// decaying series gives a positive rate.
pub fn fit_decay_rate(series: &[(f64, f64)]) -> Result<f64> {
    if series.len() < 3 {
        return Err(CboError::Dimension("decay fit needs at least 3 points".into()));
    }
    if let Some(&(t, v)) = series.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
        return Err(CboError::param(
            "series",
            format!("values must be positive and finite, got {v} at t = {t}"),
        ));
    }
    let n = series.len() as f64;
    let tm = series.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = series.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, v) in series {
        sxy += (t - tm) * (v.ln() - ym);
        sxx += (t - tm) * (t - tm);
    }
    if sxx == 0.0 {
        return Err(CboError::param("series", "all time stamps coincide"));
    }
    Ok(-sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseGeometry {
    /// `σ |X - a| dW`
    Isotropic,
    /// `σ Σ_k (X - a)_k dW_k e_k`
    Anisotropic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayDiagnostic {
    pub fitted_rate: f64,
    pub predicted_rate: f64,
    pub series: Vec<(f64, f64)>,
}

impl DecayDiagnostic {
    pub fn relative_error(&self) -> f64 {
        ((self.fitted_rate - self.predicted_rate) / self.predicted_rate).abs()
    }
}

/// Settings shared by the frozen-mean and pairwise diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySetup {
    pub lambda: f64,
    pub sigma: f64,
    pub d: usize,
    pub n: usize,
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    /// Number of sample points in the fitted series (excluding `t = 0`).
    pub samples: usize,
}

impl DecaySetup {
    fn steps(&self) -> Result<(u64, u64)> {
        if !(self.dt > 0.0 && self.t_end > 0.0) || self.samples == 0 {
            return Err(CboError::param("dt", "dt, t_end and samples must be positive"));
        }
        let steps = (self.t_end / self.dt).round() as u64;
        let every = (steps / self.samples as u64).max(1);
        Ok((steps, every))
    }
}

/// Track `E|X - a|²` with the consensus point pinned at `a = 0` and return
/// the fitted decay rate next to the second-moment prediction: `2λ - σ² d`
/// for isotropic noise, `2λ - σ²` for component-wise noise. `sigma` is the
/// full multiplier in front of the noise.
pub fn diagnostic_frozen_moment(geometry: NoiseGeometry, setup: &DecaySetup) -> Result<DecayDiagnostic> {
    if setup.n < 1000 {
        return Err(CboError::param("n", format!("needs at least 1000 particles, got {}", setup.n)));
    }
    let (steps, every) = setup.steps()?;
    let plan = RngPlan::new(setup.seed);
    let init = InitialDistribution::Gaussian { mean: 1.0, variance: 1.0 };
    let mut e = init_ensemble(&init, setup.n, setup.d, &plan)?;
    let anchor = vec![0.0; setup.d];
    let second_moment = |e: &Ensemble| {
        let total: f64 = e.as_slice().iter().map(|x| x * x).sum();
        total / e.len() as f64
    };
    let mut series = vec![(0.0, second_moment(&e))];
    for n in 1..=steps {
        let noise = plan.step_noise(e.step, false);
        match geometry {
            NoiseGeometry::Isotropic => isotropic_update(
                &mut e,
                &anchor,
                setup.lambda,
                setup.sigma,
                setup.dt,
                None,
                Integrator::Euler,
                &noise,
            ),
            NoiseGeometry::Anisotropic => componentwise_update(
                &mut e,
                &anchor,
                setup.lambda,
                setup.sigma,
                setup.dt,
                Integrator::Euler,
                &noise,
                None,
            ),
        }
        e.advance(setup.dt)?;
        if n % every == 0 {
            series.push((e.time, second_moment(&e)));
        }
    }
    let s2 = setup.sigma * setup.sigma;
    let predicted_rate = match geometry {
        NoiseGeometry::Isotropic => 2.0 * setup.lambda - s2 * setup.d as f64,
        NoiseGeometry::Anisotropic => 2.0 * setup.lambda - s2,
    };
    Ok(DecayDiagnostic {
        fitted_rate: fit_decay_rate(&series)?,
        predicted_rate,
        series,
    })
}

/// Mean pairwise squared distance under the common-noise dynamics, averaged
/// over `replicas` independent runs, with the fitted rate next to `2λ - σ²`.
pub fn diagnostic_pairwise(
    f: &ObjectiveFunction,
    setup: &DecaySetup,
    replicas: usize,
) -> Result<DecayDiagnostic> {
    if setup.n < 2 || replicas == 0 {
        return Err(CboError::param("n", "needs N >= 2 and at least one replica"));
    }
    let (steps, every) = setup.steps()?;
    let params = VariantParams {
        lambda: setup.lambda,
        sigma: setup.sigma,
        dt: setup.dt,
        ..VariantParams::new(Variant::CommonNoise)
    };
    let root = RngPlan::new(setup.seed);
    let init = InitialDistribution::Gaussian { mean: 0.0, variance: 1.0 };
    let per_replica: Vec<Vec<(f64, f64)>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<(f64, f64)>> {
            let plan = root.derive(r);
            let mut e = init_ensemble(&init, setup.n, setup.d, &plan)?;
            let mut out = vec![(0.0, mean_pairwise_sq_dist(&e)?)];
            for n in 1..=steps {
                step_common_noise(&mut e, f, &params, &plan)?;
                if n % every == 0 {
                    out.push((e.time, mean_pairwise_sq_dist(&e)?));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let len = per_replica[0].len();
    let series: Vec<(f64, f64)> = (0..len)
        .map(|k| {
            let t = per_replica[0][k].0;
            let mean = per_replica.iter().map(|s| s[k].1).sum::<f64>() / replicas as f64;
            (t, mean)
        })
        .collect();
    Ok(DecayDiagnostic {
        fitted_rate: fit_decay_rate(&series)?,
        predicted_rate: 2.0 * setup.lambda - setup.sigma * setup.sigma,
        series,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LaplaceRow {
    pub alpha: f64,
    pub value: f64,
    /// Delta-method standard error of `value`.
    pub std_error: f64,
}

/// Monte Carlo Laplace functional `-(1/α) log mean(exp(-α f))` for each α
/// on one fixed sample drawn from `init`.
pub fn diagnostic_laplace(
    f: &ObjectiveFunction,
    init: &InitialDistribution,
    alphas: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<LaplaceRow>> {
    if alphas.iter().any(|a| a.is_nan() || *a <= 0.0) || alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CboError::param("alphas", "must be positive and strictly increasing"));
    }
    let e = init_ensemble(init, n, f.dimension(), &RngPlan::new(seed))?;
    let fvals = evaluate(&e, f);
    alphas
        .iter()
        .map(|&alpha| {
            let value = laplace_from_values(&fvals, alpha)?;
            // Var of exp(-α (f - min)) relative to its mean, then the delta method.
            let min = fvals.iter().copied().fold(f64::INFINITY, f64::min);
            let w: Vec<f64> = fvals.iter().map(|x| (-alpha * (x - min)).exp()).collect();
            let nf = n as f64;
            let mean = w.iter().sum::<f64>() / nf;
            let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0).max(1.0);
            let std_error = (var / nf).sqrt() / (mean * alpha);
            Ok(LaplaceRow {
                alpha,
                value,
                std_error,
            })
        })
        .collect()
}

/// `(time, V)` over a full run of the configured dynamics.
pub fn diagnostic_variance_decay(config: &RunConfig, f: &ObjectiveFunction) -> Result<Vec<(f64, f64)>> {
    let result = run_with(config, f)?;
    if result.terminated_by == Termination::Divergence {
        return Err(CboError::Diverged {
            step: result.steps,
            particle: 0,
        });
    }
    Ok(result.trajectory.iter().map(|p| (p.time, p.variance)).collect())
}

/// One row of a benchmark summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub objective: String,
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub variant: String,
    pub success_rate: f64,
    pub mean_final_f: f64,
    pub median_steps: f64,
}

pub fn summarize(config: &RunConfig, results: &[RunResult], crit: &SuccessCriterion) -> Result<BenchSummary> {
    let rate = success_rate(results, crit)?;
    let mean_final_f =
        results.iter().map(|r| r.final_consensus.f_at_v).sum::<f64>() / results.len() as f64;
    let mut steps: Vec<u64> = results.iter().map(|r| r.steps).collect();
    steps.sort_unstable();
    let mid = steps.len() / 2;
    let median_steps = if steps.len() % 2 == 1 {
        steps[mid] as f64
    } else {
        (steps[mid - 1] + steps[mid]) as f64 / 2.0
    };
    Ok(BenchSummary {
        objective: config.objective.clone(),
        d: config.dimension,
        n: config.particles,
        variant: config.params.variant.name().to_string(),
        success_rate: rate,
        mean_final_f,
        median_steps,
    })
}
