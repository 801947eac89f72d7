//! One-step transition kernels for the five particle dynamics.
//!
//! Every step evaluates the objective at the pre-step positions, forms one
//! consensus point from them, and then moves all particles synchronously.
//! Row `i` at step `n` draws its normals from the `(Noise, i, n)` stream of
//! the run's [`RngPlan`]; the common-noise variant draws one shared block
//! per step instead.

use std::f64::consts::SQRT_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::{consensus_from_values, evaluate, ConsensusPoint};
use crate::ensemble::Ensemble;
use crate::error::{CboError, Result};
use crate::integrators::{componentwise_row, split_drift_row, Integrator};
use crate::objectives::ObjectiveFunction;
use crate::rng::{RngPlan, StepNoise};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Isotropic noise `√2 σ |X - v| dW`, optional Heaviside gate on the drift.
    Original,
    /// Component-wise independent noise.
    Anisotropic,
    /// Component-wise noise shared by all particles.
    CommonNoise,
    /// Component-wise noise plus a drift toward a time-averaged personal best.
    PersonalBest,
    /// Dynamics constrained to the unit sphere.
    Sphere,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Original,
        Variant::Anisotropic,
        Variant::CommonNoise,
        Variant::PersonalBest,
        Variant::Sphere,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Anisotropic => "anisotropic",
            Variant::CommonNoise => "common_noise",
            Variant::PersonalBest => "personal_best",
            Variant::Sphere => "sphere",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| CboError::Unknown {
                kind: "variant",
                name: name.to_string(),
            })
    }

    /// Noise acts per coordinate rather than through `|X - v|`.
    pub fn is_componentwise(self) -> bool {
        matches!(
            self,
            Variant::Anisotropic | Variant::CommonNoise | Variant::PersonalBest
        )
    }

    pub fn default_heaviside(self) -> HeavisideMode {
        match self {
            Variant::PersonalBest => HeavisideMode::Exact,
            _ => HeavisideMode::Off,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeavisideMode {
    /// Gate is identically 1.
    Off,
    Exact,
    /// `½ + ½ tanh(x / ε)`
    Regularized,
}

pub fn heaviside(x: f64, mode: HeavisideMode, epsilon: f64) -> f64 {
    match mode {
        HeavisideMode::Off => 1.0,
        HeavisideMode::Exact => {
            if x >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        HeavisideMode::Regularized => 0.5 + 0.5 * (x / epsilon).tanh(),
    }
}

/// Coefficients of a dynamic. `sigma` is the raw multiplier as it appears
/// in each variant's equation: `√2 σ` for `original` and `personal_best`,
/// plain `σ` for `anisotropic`, `common_noise` and `sphere`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantParams {
    pub variant: Variant,
    pub lambda: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub dt: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub heaviside: HeavisideMode,
    pub integrator: Integrator,
}

impl VariantParams {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            lambda: 1.0,
            sigma: 0.7,
            alpha: 30.0,
            dt: 0.01,
            epsilon: 0.01,
            beta: 30.0,
            heaviside: variant.default_heaviside(),
            integrator: Integrator::Euler,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda", self.lambda),
            ("sigma", self.sigma),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ];
        for (name, value) in nonneg {
            if !(value.is_finite() && value >= 0.0) {
                return Err(CboError::param(name, format!("must be finite and >= 0, got {value}")));
            }
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(CboError::param("dt", format!("must be finite and > 0, got {}", self.dt)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(CboError::param(
                "epsilon",
                format!("must be finite and > 0, got {}", self.epsilon),
            ));
        }
        match (self.variant, self.integrator) {
            (_, Integrator::Euler) => {}
            (Variant::Original, Integrator::Split) => {}
            (Variant::Anisotropic | Variant::CommonNoise, _) => {}
            (v, i) => {
                return Err(CboError::param(
                    "integrator",
                    format!("`{}` is not available for the {} variant", i.name(), v.name()),
                ))
            }
        }
        Ok(())
    }

    fn expect(&self, variant: Variant) -> Result<()> {
        self.validate()?;
        if self.variant != variant {
            return Err(CboError::param(
                "variant",
                format!("expected {}, got {}", variant.name(), self.variant.name()),
            ));
        }
        Ok(())
    }
}

/// Second-moment concentration condition with `v` frozen:
/// `2λ > σ² d` for isotropic noise, `2λ > σ²` for component-wise noise.
pub fn consensus_condition(p: &VariantParams, d: usize) -> bool {
    let s2 = p.sigma * p.sigma;
    if p.variant.is_componentwise() {
        2.0 * p.lambda > s2
    } else {
        2.0 * p.lambda > s2 * d as f64
    }
}

fn pre_step(
    e: &Ensemble,
    f: &ObjectiveFunction,
    alpha: f64,
) -> Result<(Vec<f64>, ConsensusPoint)> {
    if e.dim() != f.dimension() {
        return Err(CboError::Dimension(format!(
            "objective is {}-dimensional, ensemble is {}-dimensional",
            f.dimension(),
            e.dim()
        )));
    }
    let fvals = evaluate(e, f);
    let c = consensus_from_values(e, f, &fvals, alpha, None)?;
    Ok((fvals, c))
}

fn rows_with_noise<F>(e: &mut Ensemble, noise: &StepNoise, update: F)
where
    F: Fn(usize, &mut [f64], &[f64]) + Sync,
{
    let d = e.dim();
    e.as_mut_slice()
        .par_chunks_exact_mut(d)
        .enumerate()
        .for_each_init(
            || vec![0.0; d],
            |z, (i, row)| {
                noise.fill(i, z);
                update(i, row, z);
            },
        );
}

/// Isotropic update of every row with `v` held fixed.
///
/// `noise_scale` multiplies `|X - v| dW` directly and `gates[i]` scales the
/// drift of row `i`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn isotropic_update(
    e: &mut Ensemble,
    v: &[f64],
    lambda: f64,
    noise_scale: f64,
    gamma: f64,
    gates: Option<&[f64]>,
    scheme: Integrator,
    noise: &StepNoise,
) {
    let sq = gamma.sqrt();
    rows_with_noise(e, noise, |i, x, z| {
        let rate = lambda * gates.map_or(1.0, |g| g[i]);
        match scheme {
            Integrator::Split => {
                split_drift_row(x, v, rate, gamma);
                let dist = distance(x, v);
                for ((xk, _), zk) in x.iter_mut().zip(v).zip(z) {
                    *xk += noise_scale * dist * sq * zk;
                }
            }
            _ => {
                let dist = distance(x, v);
                for ((xk, vk), zk) in x.iter_mut().zip(v).zip(z) {
                    let diff = *xk - vk;
                    *xk = *xk - rate * gamma * diff + noise_scale * dist * sq * zk;
                }
            }
        }
    });
}

/// Component-wise update of the rows selected by `scope` (all rows when `None`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn componentwise_update(
    e: &mut Ensemble,
    v: &[f64],
    lambda: f64,
    sigma: f64,
    gamma: f64,
    scheme: Integrator,
    noise: &StepNoise,
    scope: Option<&[bool]>,
) {
    rows_with_noise(e, noise, |i, x, z| {
        if scope.is_none_or(|s| s[i]) {
            componentwise_row(scheme, x, v, lambda, sigma, gamma, z);
        }
    });
}

fn distance(x: &[f64], v: &[f64]) -> f64 {
    x.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn gated(fvals: &[f64], f_at_v: f64, p: &VariantParams) -> Option<Vec<f64>> {
    match p.heaviside {
        HeavisideMode::Off => None,
        mode => Some(
            fvals
                .iter()
                .map(|fx| heaviside(fx - f_at_v, mode, p.epsilon))
                .collect(),
        ),
    }
}

/// Euler–Maruyama step of
/// `dX = -λ (X - v) H(f(X) - f(v)) dt + √2 σ |X - v| dW`.
pub fn step_original(
    e: &mut Ensemble,
    f: &ObjectiveFunction,
    p: &VariantParams,
    plan: &RngPlan,
) -> Result<ConsensusPoint> {
    p.expect(Variant::Original)?;
    let (fvals, c) = pre_step(e, f, p.alpha)?;
    let gates = gated(&fvals, c.f_at_v, p);
    let noise = plan.step_noise(e.step, false);
    isotropic_update(
        e,
        &c.v_f,
        p.lambda,
        SQRT_2 * p.sigma,
        p.dt,
        gates.as_deref(),
        p.integrator,
        &noise,
    );
    e.advance(p.dt)?;
    Ok(c)
}

/// `dX = -λ (X - v) dt + σ Σ_k (X - v)_k dW_k e_k`, independent `W` per particle.
pub fn step_anisotropic(
    e: &mut Ensemble,
    f: &ObjectiveFunction,
    p: &VariantParams,
    plan: &RngPlan,
) -> Result<ConsensusPoint> {
    p.expect(Variant::Anisotropic)?;
    let (_, c) = pre_step(e, f, p.alpha)?;
    let noise = plan.step_noise(e.step, false);
    componentwise_update(e, &c.v_f, p.lambda, p.sigma, p.dt, p.integrator, &noise, None);
    e.advance(p.dt)?;
    Ok(c)
}

/// Component-wise dynamics driven by one normal per coordinate shared by all
/// particles.
pub fn step_common_noise(
    e: &mut Ensemble,
    f: &ObjectiveFunction,
    p: &VariantParams,
    plan: &RngPlan,
) -> Result<ConsensusPoint> {
    p.expect(Variant::CommonNoise)?;
    let (_, c) = pre_step(e, f, p.alpha)?;
    let mut noise = plan.step_noise(e.step, true);
    noise.prepare(e.dim());
    componentwise_update(e, &c.v_f, p.lambda, p.sigma, p.dt, p.integrator, &noise, None);
    e.advance(p.dt)?;
    Ok(c)
}

/// Running time averages `∫ X e^{-βf(X)} ds / ∫ e^{-βf(X)} ds` per particle.
///
/// Both integrals are stored relative to `exp(log_scale[i])`, the largest
/// `e^{-βf}` seen so far by particle `i`, so neither underflows.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalBestMemory {
    numerator: Vec<f64>,
    denominator: Vec<f64>,
    log_scale: Vec<f64>,
    p: Vec<f64>,
    d: usize,
}

impl PersonalBestMemory {
    /// Memory at `t = 0`: `p^i = X_0^i`, empty integrals.
    pub fn new(e: &Ensemble) -> Self {
        Self {
            numerator: vec![0.0; e.len() * e.dim()],
            denominator: vec![0.0; e.len()],
            log_scale: vec![f64::NEG_INFINITY; e.len()],
            p: e.as_slice().to_vec(),
            d: e.dim(),
        }
    }

    pub fn personal_best(&self, i: usize) -> &[f64] {
        &self.p[i * self.d..(i + 1) * self.d]
    }

    pub fn len(&self) -> usize {
        self.denominator.len()
    }

    pub fn is_empty(&self) -> bool {
        self.denominator.is_empty()
    }

    /// Unscaled denominator `∫ e^{-βf} ds` for particle `i` (may underflow to 0).
    pub fn denominator(&self, i: usize) -> f64 {
        self.denominator[i] * self.log_scale[i].exp()
    }
}

/// Fold one left-endpoint rectangle `x e^{-βf} dt` into a particle's memory.
fn accumulate(
    num: &mut [f64],
    den: &mut f64,
    scale: &mut f64,
    p: &mut [f64],
    x: &[f64],
    log_w: f64,
    dt: f64,
) {
    if log_w > *scale {
        let shrink = if scale.is_finite() { (*scale - log_w).exp() } else { 0.0 };
        num.iter_mut().for_each(|n| *n *= shrink);
        *den *= shrink;
        *scale = log_w;
    }
    let w = (log_w - *scale).exp() * dt;
    for (n, xk) in num.iter_mut().zip(x) {
        *n += w * xk;
    }
    *den += w;
    for (pk, nk) in p.iter_mut().zip(num.iter()) {
        *pk = nk / *den;
    }
}

/// Component-wise dynamics with gated drifts toward `v_f` and toward the
/// personal best `p^i`:
///
/// `λ* = H(f(X) - f(v)) H(f(p) - f(v))`, `μ* = H(f(X) - f(p)) H(f(v) - f(p))`.
///
/// The memory then absorbs the pre-step position with weight `e^{-βf} dt`.
pub fn step_personal_best(
    e: &mut Ensemble,
    f: &ObjectiveFunction,
    p: &VariantParams,
    mem: &mut PersonalBestMemory,
    plan: &RngPlan,
) -> Result<ConsensusPoint> {
    p.expect(Variant::PersonalBest)?;
    if mem.len() != e.len() || mem.d != e.dim() {
        return Err(CboError::Dimension(
            "personal-best memory does not match the ensemble".into(),
        ));
    }
    let (fvals, c) = pre_step(e, f, p.alpha)?;
    let fp: Vec<f64> = mem
        .p
        .par_chunks_exact(mem.d)
        .map(|x| f.eval(x))
        .collect();
    let d = e.dim();
    let sq = p.dt.sqrt();
    let noise_scale = SQRT_2 * p.sigma;
    let h = |x: f64| heaviside(x, p.heaviside, p.epsilon);
    let noise = plan.step_noise(e.step, false);
    let v = &c.v_f;
    let f_v = c.f_at_v;
    let PersonalBestMemory {
        numerator,
        denominator,
        log_scale,
        p: best,
        ..
    } = mem;
    e.as_mut_slice()
        .par_chunks_exact_mut(d)
        .zip(numerator.par_chunks_exact_mut(d))
        .zip(best.par_chunks_exact_mut(d))
        .zip(denominator.par_iter_mut().zip(log_scale.par_iter_mut()))
        .enumerate()
        .for_each_init(
            || (vec![0.0; d], vec![0.0; d]),
            |(z, prev), (i, (((x, num), pb), (den, scale)))| {
                noise.fill(i, z);
                let lam = p.lambda * h(fvals[i] - f_v) * h(fp[i] - f_v);
                let mu = p.lambda * h(fvals[i] - fp[i]) * h(f_v - fp[i]);
                prev.copy_from_slice(x);
                for k in 0..d {
                    let to_v = prev[k] - v[k];
                    let to_p = prev[k] - pb[k];
                    x[k] = prev[k] - (lam * to_v + mu * to_p) * p.dt
                        + noise_scale * to_v * sq * z[k];
                }
                accumulate(num, den, scale, pb, prev, -p.beta * fvals[i], p.dt);
            },
        );
    e.advance(p.dt)?;
    Ok(c)
}

/// Pre-normalisation Euler–Maruyama update of one row on the unit sphere:
///
/// `dX = -λ P(X)(X - v) dt + σ |X - v| P(X) dB - (σ²/2) |X - v|² Δγ(X) ∇γ(X) dt`
///
/// with `γ(x) = |x| - 1`, `∇γ = x/|x|`, `Δγ = (d-1)/|x|` and
/// `P(x) = I - x xᵀ/|x|²`. Returns the norm of `x` before the update.
pub fn sphere_row(x: &mut [f64], v: &[f64], lambda: f64, sigma: f64, dt: f64, z: &[f64]) -> f64 {
    let d = x.len();
    let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let dist2: f64 = x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    let dist = dist2.sqrt();
    // P(x) w = w - x (x·w)/|x|²
    let n2 = norm * norm;
    let x_dot_diff: f64 = x.iter().zip(v).map(|(a, b)| a * (a - b)).sum();
    let x_dot_z: f64 = x.iter().zip(z).map(|(a, b)| a * b).sum();
    let curvature = 0.5 * sigma * sigma * dist2 * (d as f64 - 1.0) / norm;
    let sq = dt.sqrt();
    for k in 0..d {
        let xk = x[k];
        let proj_diff = (xk - v[k]) - xk * x_dot_diff / n2;
        let proj_z = z[k] - xk * x_dot_z / n2;
        x[k] = xk - lambda * proj_diff * dt + sigma * dist * proj_z * sq
            - curvature * (xk / norm) * dt;
    }
    norm
}

/// Sphere-constrained step; each row is renormalised to unit length afterwards.
pub fn step_sphere(
    e: &mut Ensemble,
    f: &ObjectiveFunction,
    p: &VariantParams,
    plan: &RngPlan,
) -> Result<ConsensusPoint> {
    Ok(step_sphere_traced(e, f, p, plan)?.0)
}

/// Like [`step_sphere`], also returning the largest `| |X| - 1 |` observed
/// before renormalisation.
pub fn step_sphere_traced(
    e: &mut Ensemble,
    f: &ObjectiveFunction,
    p: &VariantParams,
    plan: &RngPlan,
) -> Result<(ConsensusPoint, f64)> {
    p.expect(Variant::Sphere)?;
    let step = e.step;
    if let Some(particle) = e
        .rows()
        .position(|r| r.iter().all(|&a| a == 0.0))
    {
        return Err(CboError::Singularity { step, particle });
    }
    let (_, c) = pre_step(e, f, p.alpha)?;
    let noise = plan.step_noise(step, false);
    let d = e.dim();
    let deviations: Vec<f64> = e
        .as_mut_slice()
        .par_chunks_exact_mut(d)
        .enumerate()
        .map_init(
            || vec![0.0; d],
            |z, (i, x)| {
                noise.fill(i, z);
                sphere_row(x, &c.v_f, p.lambda, p.sigma, p.dt, z);
                let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm > 0.0 && norm.is_finite() {
                    x.iter_mut().for_each(|a| *a /= norm);
                }
                norm
            },
        )
        .collect();
    let mut max_dev = 0.0f64;
    for (particle, &norm) in deviations.iter().enumerate() {
        if norm == 0.0 {
            return Err(CboError::Singularity { step, particle });
        }
        if norm.is_finite() {
            max_dev = max_dev.max((norm - 1.0).abs());
        }
    }
    e.advance(p.dt)?;
    Ok((c, max_dev))
}

/// Stateful stepper dispatching on the variant.
#[derive(Debug, Clone)]
pub struct Dynamics {
    params: VariantParams,
    plan: RngPlan,
    memory: Option<PersonalBestMemory>,
}

impl Dynamics {
    pub fn new(params: VariantParams, plan: RngPlan, e: &Ensemble) -> Result<Self> {
        params.validate()?;
        let memory = (params.variant == Variant::PersonalBest).then(|| PersonalBestMemory::new(e));
        Ok(Self {
            params,
            plan,
            memory,
        })
    }

    pub fn params(&self) -> &VariantParams {
        &self.params
    }

    pub fn memory(&self) -> Option<&PersonalBestMemory> {
        self.memory.as_ref()
    }

    /// Advance one step, returning the consensus point of the pre-step state.
    pub fn step(&mut self, e: &mut Ensemble, f: &ObjectiveFunction) -> Result<ConsensusPoint> {
        let p = &self.params;
        match p.variant {
            Variant::Original => step_original(e, f, p, &self.plan),
            Variant::Anisotropic => step_anisotropic(e, f, p, &self.plan),
            Variant::CommonNoise => step_common_noise(e, f, p, &self.plan),
            Variant::PersonalBest => {
                let mem = self.memory.as_mut().expect("memory allocated for personal best");
                step_personal_best(e, f, p, mem, &self.plan)
            }
            Variant::Sphere => step_sphere(e, f, p, &self.plan),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{init_ensemble, moments, InitialDistribution};

    fn quad(d: usize) -> ObjectiveFunction {
        ObjectiveFunction::new("quad", d, |x| x.iter().map(|v| v * v).sum()).unwrap()
    }

    fn params(variant: Variant, sigma: f64) -> VariantParams {
        VariantParams {
            sigma,
            ..VariantParams::new(variant)
        }
    }

    fn gaussian(n: usize, d: usize, seed: u64) -> Ensemble {
        let dist = InitialDistribution::Gaussian { mean: 1.0, variance: 1.0 };
        init_ensemble(&dist, n, d, &RngPlan::new(seed)).unwrap()
    }

    #[test]
    fn heaviside_examples() {
        assert_eq!(heaviside(0.0, HeavisideMode::Exact, 1.0), 1.0);
        assert_eq!(heaviside(-1e-300, HeavisideMode::Exact, 1.0), 0.0);
        assert_eq!(heaviside(0.0, HeavisideMode::Regularized, 0.3), 0.5);
        let expected = 0.5 + 0.5 * 1f64.tanh();
        assert!((heaviside(0.25, HeavisideMode::Regularized, 0.25) - expected).abs() < 1e-15);
        assert!((expected - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert_eq!(heaviside(-5.0, HeavisideMode::Off, 1.0), 1.0);
    }

    #[test]
    fn condition_examples() {
        let mut p = VariantParams {
            lambda: 1.0,
            sigma: 1.0,
            ..VariantParams::new(Variant::Original)
        };
        assert!(!consensus_condition(&p, 3));
        p.variant = Variant::Anisotropic;
        assert!(consensus_condition(&p, 3));
        p.sigma = 2f64.sqrt();
        assert!(!consensus_condition(&p, 3));
        p.sigma = 0.0;
        for v in Variant::ALL {
            p.variant = v;
            assert!(consensus_condition(&p, 1000));
        }
    }

    #[test]
    fn particle_on_consensus_stays_put() {
        // A single particle is its own consensus point.
        for variant in [Variant::Original, Variant::Anisotropic, Variant::CommonNoise, Variant::PersonalBest] {
            let mut e = Ensemble::from_points(&[vec![0.3, -0.7, 2.0]]).unwrap();
            let mut dynamics = Dynamics::new(params(variant, 1.3), RngPlan::new(4), &e).unwrap();
            for _ in 0..5 {
                dynamics.step(&mut e, &quad(3)).unwrap();
            }
            assert_eq!(e.row(0), &[0.3, -0.7, 2.0], "{variant:?}");
            assert_eq!(e.step, 5);
        }
    }

    #[test]
    fn zero_sigma_is_linear_contraction() {
        let e0 = gaussian(20, 3, 9);
        let f = quad(3);
        for variant in [Variant::Original, Variant::Anisotropic, Variant::CommonNoise] {
            let p = params(variant, 0.0);
            let mut e = e0.clone();
            let c = Dynamics::new(p, RngPlan::new(1), &e).unwrap().step(&mut e, &f).unwrap();
            for i in 0..e.len() {
                for k in 0..3 {
                    let x = e0.row(i)[k];
                    let expected = x - p.lambda * p.dt * (x - c.v_f[k]);
                    assert!((e.row(i)[k] - expected).abs() < 1e-14);
                }
            }
            assert!((e.time - p.dt).abs() < 1e-15);
        }
    }

    #[test]
    fn anisotropic_coordinate_on_consensus_is_frozen() {
        // Both particles share coordinate 1, so (X - v)_1 = 0 for each.
        let mut e = Ensemble::from_points(&[vec![1.0, 5.0], vec![-2.0, 5.0]]).unwrap();
        let p = params(Variant::Anisotropic, 2.0);
        step_anisotropic(&mut e, &quad(2), &p, &RngPlan::new(3)).unwrap();
        assert_eq!(e.row(0)[1], 5.0);
        assert_eq!(e.row(1)[1], 5.0);
        assert_ne!(e.row(1)[0], -2.0);
    }

    #[test]
    fn common_noise_keeps_coincident_particles_together() {
        let mut e = Ensemble::from_points(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let p = params(Variant::CommonNoise, 0.9);
        let plan = RngPlan::new(12);
        for _ in 0..200 {
            step_common_noise(&mut e, &quad(2), &p, &plan).unwrap();
            assert_eq!(e.row(0), e.row(1));
        }
    }

    #[test]
    fn wrong_variant_is_rejected() {
        let mut e = gaussian(4, 2, 1);
        let p = params(Variant::Anisotropic, 0.5);
        assert!(step_original(&mut e, &quad(2), &p, &RngPlan::new(0)).is_err());
    }

    #[test]
    fn integrator_compatibility() {
        let mut p = VariantParams::new(Variant::Original);
        p.integrator = Integrator::Frozen;
        assert!(p.validate().is_err());
        p.integrator = Integrator::Split;
        assert!(p.validate().is_ok());
        p.variant = Variant::Sphere;
        assert!(p.validate().is_err());
        p.variant = Variant::CommonNoise;
        p.integrator = Integrator::Frozen;
        assert!(p.validate().is_ok());
        p.dt = 0.0;
        assert!(matches!(p.validate(), Err(CboError::InvalidParameter { name, .. }) if name == "dt"));
    }

    #[test]
    fn heaviside_gate_blocks_drift_of_better_particles() {
        // Particle 0 sits at the minimum, so f(X^0) < f(v) and its drift is gated off.
        let mut e = Ensemble::from_points(&[vec![0.0], vec![2.0]]).unwrap();
        let p = VariantParams {
            sigma: 0.0,
            alpha: 0.0,
            heaviside: HeavisideMode::Exact,
            ..VariantParams::new(Variant::Original)
        };
        step_original(&mut e, &quad(1), &p, &RngPlan::new(0)).unwrap();
        assert_eq!(e.row(0)[0], 0.0);
        assert!((e.row(1)[0] - (2.0 - p.lambda * p.dt * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let mut e = gaussian(5, 2, 2);
        let p = VariantParams {
            lambda: 1e300,
            sigma: 0.0,
            dt: 1e10,
            ..VariantParams::new(Variant::Anisotropic)
        };
        let plan = RngPlan::new(0);
        let err = (0..10)
            .find_map(|_| step_anisotropic(&mut e, &quad(2), &p, &plan).err())
            .unwrap();
        assert!(err.is_divergence());
    }

    #[test]
    fn personal_best_starts_at_initial_positions() {
        let e = gaussian(6, 3, 5);
        let mem = PersonalBestMemory::new(&e);
        for i in 0..6 {
            assert_eq!(mem.personal_best(i), e.row(i));
        }
        // After one step p^i is the left-endpoint average of X_0 alone.
        let mut e1 = e.clone();
        let mut mem1 = mem.clone();
        step_personal_best(&mut e1, &quad(3), &params(Variant::PersonalBest, 0.5), &mut mem1, &RngPlan::new(1)).unwrap();
        for i in 0..6 {
            for k in 0..3 {
                assert!((mem1.personal_best(i)[k] - e.row(i)[k]).abs() < 1e-15);
            }
            assert!(mem1.denominator(i) > 0.0);
        }
    }

    #[test]
    fn personal_best_on_flat_landscape_is_time_average() {
        let flat = ObjectiveFunction::new("flat", 2, |_| 1.0).unwrap();
        let mut e = gaussian(3, 2, 6);
        let p = params(Variant::PersonalBest, 0.8);
        let mut mem = PersonalBestMemory::new(&e);
        let plan = RngPlan::new(2);
        let mut sums = [0.0; 6];
        let steps = 50;
        for _ in 0..steps {
            for (s, x) in sums.iter_mut().zip(e.as_slice()) {
                *s += x;
            }
            step_personal_best(&mut e, &flat, &p, &mut mem, &plan).unwrap();
        }
        for i in 0..3 {
            for k in 0..2 {
                let avg = sums[i * 2 + k] / steps as f64;
                assert!((mem.personal_best(i)[k] - avg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn personal_best_memory_survives_large_beta() {
        let mut e = gaussian(8, 2, 3);
        let p = VariantParams {
            beta: 1e4,
            ..params(Variant::PersonalBest, 0.5)
        };
        let mut mem = PersonalBestMemory::new(&e);
        let plan = RngPlan::new(8);
        for _ in 0..100 {
            step_personal_best(&mut e, &quad(2), &p, &mut mem, &plan).unwrap();
        }
        for i in 0..8 {
            assert!(mem.personal_best(i).iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn gates_select_consensus_when_it_is_best() {
        // f(v) below both f(X) and f(p) -> λ* = 1, μ* = 0.
        let h = |x: f64| heaviside(x, HeavisideMode::Exact, 0.01);
        let (fx, fp, fv) = (3.0, 2.0, 1.0);
        assert_eq!(h(fx - fv) * h(fp - fv), 1.0);
        assert_eq!(h(fx - fp) * h(fv - fp), 0.0);
    }

    #[test]
    fn projection_kills_radial_component() {
        // Zero drift and zero curvature: only the projected noise moves x,
        // and that first-order move is orthogonal to x.
        let x0 = [0.6, 0.0, 0.8];
        let mut x = x0;
        let z = [0.3, -1.2, 2.0];
        sphere_row(&mut x, &x0, 0.0, 1.0, 1e-6, &z);
        let radial: f64 = x.iter().zip(&x0).map(|(a, b)| (a - b) * b).sum();
        assert!(radial.abs() < 1e-15);
    }

    #[test]
    fn sphere_particle_at_consensus_is_unchanged() {
        let mut e = Ensemble::from_points(&[vec![0.0, 0.6, 0.8]]).unwrap();
        let p = params(Variant::Sphere, 1.0);
        step_sphere(&mut e, &quad(3), &p, &RngPlan::new(1)).unwrap();
        assert_eq!(e.row(0), &[0.0, 0.6, 0.8]);
    }

    #[test]
    fn sphere_origin_is_singular() {
        let mut e = Ensemble::from_points(&[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let p = params(Variant::Sphere, 1.0);
        assert!(matches!(
            step_sphere(&mut e, &quad(3), &p, &RngPlan::new(1)),
            Err(CboError::Singularity { particle: 0, .. })
        ));
    }

    #[test]
    fn sphere_steps_stay_on_sphere() {
        let mut e = init_ensemble(&InitialDistribution::Sphere, 50, 3, &RngPlan::new(2)).unwrap();
        let p = params(Variant::Sphere, 0.8);
        let plan = RngPlan::new(3);
        for _ in 0..100 {
            step_sphere(&mut e, &quad(3), &p, &plan).unwrap();
            for r in e.rows() {
                let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn steppers_are_deterministic() {
        let f = quad(4);
        for variant in Variant::ALL {
            let e0 = if variant == Variant::Sphere {
                init_ensemble(&InitialDistribution::Sphere, 30, 4, &RngPlan::new(1)).unwrap()
            } else {
                gaussian(30, 4, 1)
            };
            let run = || {
                let mut e = e0.clone();
                let mut dyn_ = Dynamics::new(params(variant, 0.6), RngPlan::new(77), &e).unwrap();
                for _ in 0..20 {
                    dyn_.step(&mut e, &f).unwrap();
                }
                e
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn coincident_ensemble_is_fixed_point() {
        let f = quad(2);
        for variant in [Variant::Original, Variant::Anisotropic, Variant::CommonNoise, Variant::PersonalBest] {
            let mut e = Ensemble::from_points(&vec![vec![0.5, 1.5]; 6]).unwrap();
            let mut dyn_ = Dynamics::new(params(variant, 1.0), RngPlan::new(5), &e).unwrap();
            for _ in 0..10 {
                dyn_.step(&mut e, &f).unwrap();
            }
            assert_eq!(moments(&e).1, 0.0, "{variant:?}");
            assert!(e.rows().all(|r| r == [0.5, 1.5]));
        }
    }

    /// Two-sample Kolmogorov–Smirnov statistic.
    fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut best) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            best = best.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        best
    }

    #[test]
    fn one_dimensional_anisotropic_matches_original_in_law() {
        // One anchor particle at the minimum pins v_f to 0; the rest start at 1.
        let n = 100_001;
        let mut points = vec![vec![1.0]; n];
        points[0] = vec![0.0];
        let sigma = 0.4;
        let mut orig = params(Variant::Original, sigma);
        orig.alpha = 100.0;
        let mut aniso = params(Variant::Anisotropic, SQRT_2 * sigma);
        aniso.alpha = 100.0;

        let mut a = Ensemble::from_points(&points).unwrap();
        step_original(&mut a, &quad(1), &orig, &RngPlan::new(31)).unwrap();
        let mut b = Ensemble::from_points(&points).unwrap();
        step_anisotropic(&mut b, &quad(1), &aniso, &RngPlan::new(32)).unwrap();

        let xs: Vec<f64> = a.rows().skip(1).map(|r| r[0]).collect();
        let ys: Vec<f64> = b.rows().skip(1).map(|r| r[0]).collect();
        let m = xs.len() as f64;
        // 0.1% critical value of the two-sample test.
        let critical = 1.95 * (2.0 / m).sqrt();
        let stat = ks_statistic(xs.clone(), ys);
        assert!(stat < critical, "KS {stat} >= {critical}");
        // Sanity check that the test has power: a 10% noise mismatch is detected.
        let mut c = Ensemble::from_points(&points).unwrap();
        let off = params(Variant::Anisotropic, 1.1 * SQRT_2 * sigma);
        step_anisotropic(&mut c, &quad(1), &VariantParams { alpha: 100.0, ..off }, &RngPlan::new(33)).unwrap();
        let zs: Vec<f64> = c.rows().skip(1).map(|r| r[0]).collect();
        assert!(ks_statistic(xs, zs) > critical);
    }
}
