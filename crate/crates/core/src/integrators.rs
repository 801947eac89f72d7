//! Update schemes for the component-wise dynamics.
//!
//! Each scheme advances one particle row over an interval `gamma` with the
//! consensus point `v` held fixed, given that row's standard normals `z`.
//! Matrix-level helpers apply a scheme to every row of a row-major `N × d`
//! buffer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::StepNoise;

/// Time discretisation used for the component-wise variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Explicit Euler–Maruyama.
    #[default]
    Euler,
    /// Exact drift followed by an Euler diffusion step.
    Split,
    /// Exact geometric Brownian motion with `v` frozen over the step.
    Frozen,
}

impl Integrator {
    pub fn name(self) -> &'static str {
        match self {
            Integrator::Euler => "euler",
            Integrator::Split => "split",
            Integrator::Frozen => "frozen",
        }
    }
}

/// `x <- x - λγ (x - v) + σ √γ (x - v) ⊙ z`
#[inline]
pub fn euler_row(x: &mut [f64], v: &[f64], lambda: f64, sigma: f64, gamma: f64, z: &[f64]) {
    let sq = gamma.sqrt();
    for ((xk, vk), zk) in x.iter_mut().zip(v).zip(z) {
        let diff = *xk - vk;
        *xk = *xk - lambda * gamma * diff + sigma * sq * diff * zk;
    }
}

/// Exact flow of `dx = -λ (x - v) dt` over `gamma`.
#[inline]
pub fn split_drift_row(x: &mut [f64], v: &[f64], lambda: f64, gamma: f64) {
    let decay = (-lambda * gamma).exp();
    for (xk, vk) in x.iter_mut().zip(v) {
        *xk = vk + (*xk - vk) * decay;
    }
}

/// `x <- x + σ √γ (x - v) ⊙ z`
#[inline]
pub fn split_diffusion_row(x: &mut [f64], v: &[f64], sigma: f64, gamma: f64, z: &[f64]) {
    let sq = gamma.sqrt();
    for ((xk, vk), zk) in x.iter_mut().zip(v).zip(z) {
        *xk += sigma * sq * (*xk - vk) * zk;
    }
}

/// `x_k <- v_k + (x - v)_k exp((-λ - σ²/2) γ + σ √γ z_k)`
#[inline]
pub fn frozen_gbm_row(x: &mut [f64], v: &[f64], lambda: f64, sigma: f64, gamma: f64, z: &[f64]) {
    let sq = gamma.sqrt();
    let base = (-lambda - 0.5 * sigma * sigma) * gamma;
    for ((xk, vk), zk) in x.iter_mut().zip(v).zip(z) {
        *xk = vk + (*xk - vk) * (base + sigma * sq * zk).exp();
    }
}

/// One component-wise step of a single row with the chosen scheme.
#[inline]
pub fn componentwise_row(
    scheme: Integrator,
    x: &mut [f64],
    v: &[f64],
    lambda: f64,
    sigma: f64,
    gamma: f64,
    z: &[f64],
) {
    match scheme {
        Integrator::Euler => euler_row(x, v, lambda, sigma, gamma, z),
        Integrator::Split => {
            split_drift_row(x, v, lambda, gamma);
            split_diffusion_row(x, v, sigma, gamma, z);
        }
        Integrator::Frozen => frozen_gbm_row(x, v, lambda, sigma, gamma, z),
    }
}

/// Exact drift applied to every row of `x`.
pub fn split_drift(x: &mut [f64], d: usize, v: &[f64], lambda: f64, gamma: f64) {
    x.par_chunks_exact_mut(d)
        .for_each(|row| split_drift_row(row, v, lambda, gamma));
}

/// Diffusion step applied to every row, row `i` drawing its normals from `noise`.
pub fn split_diffusion(
    x: &mut [f64],
    d: usize,
    v: &[f64],
    sigma: f64,
    gamma: f64,
    noise: &StepNoise,
) {
    x.par_chunks_exact_mut(d)
        .enumerate()
        .for_each_init(
            || vec![0.0; d],
            |z, (i, row)| {
                noise.fill(i, z);
                split_diffusion_row(row, v, sigma, gamma, z);
            },
        );
}

/// Frozen-mean GBM step applied to every row.
pub fn frozen_gbm(
    x: &mut [f64],
    d: usize,
    v: &[f64],
    lambda: f64,
    sigma: f64,
    gamma: f64,
    noise: &StepNoise,
) {
    x.par_chunks_exact_mut(d)
        .enumerate()
        .for_each_init(
            || vec![0.0; d],
            |z, (i, row)| {
                noise.fill(i, z);
                frozen_gbm_row(row, v, lambda, sigma, gamma, z);
            },
        );
}
