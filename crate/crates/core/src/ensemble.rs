//! Particle state and empirical moments.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CboError, Result};
use crate::rng::{RngPlan, StreamTag};

/// Law of the initial particle positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDistribution {
    /// Uniform on `[lo, hi]^d`. `lo == hi` places every particle at that corner.
    Uniform { lo: f64, hi: f64 },
    /// Isotropic Gaussian with the given per-coordinate mean and variance.
    Gaussian { mean: f64, variance: f64 },
    /// Uniform on the unit sphere.
    Sphere,
}

impl InitialDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InitialDistribution::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return Err(CboError::param(
                        "init",
                        format!("uniform box needs finite lo <= hi, got [{lo}, {hi}]"),
                    ));
                }
            }
            InitialDistribution::Gaussian { mean, variance } => {
                if !mean.is_finite() || !(variance > 0.0 && variance.is_finite()) {
                    return Err(CboError::param(
                        "init",
                        format!("gaussian needs finite mean and positive variance, got {variance}"),
                    ));
                }
            }
            InitialDistribution::Sphere => {}
        }
        Ok(())
    }

    fn sample_row<R: Rng>(&self, rng: &mut R, row: &mut [f64]) {
        match *self {
            InitialDistribution::Uniform { lo, hi } => {
                for x in row.iter_mut() {
                    *x = lo + (hi - lo) * rng.random::<f64>();
                }
            }
            InitialDistribution::Gaussian { mean, variance } => {
                let sd = variance.sqrt();
                for x in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *x = mean + sd * z;
                }
            }
            InitialDistribution::Sphere => loop {
                for x in row.iter_mut() {
                    *x = StandardNormal.sample(rng);
                }
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    row.iter_mut().for_each(|x| *x /= norm);
                    break;
                }
            },
        }
    }
}

/// `N` particles in `R^d` plus the simulation clock.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    positions: Vec<f64>,
    n: usize,
    d: usize,
    pub time: f64,
    pub step: u64,
}

impl Ensemble {
    /// Build from row-major positions.
    pub fn from_rows(positions: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(CboError::Dimension(format!(
                "ensemble needs N >= 1 and d >= 1, got N = {n}, d = {d}"
            )));
        }
        if positions.len() != n * d {
            return Err(CboError::Dimension(format!(
                "expected {} coordinates for N = {n}, d = {d}, got {}",
                n * d,
                positions.len()
            )));
        }
        if let Some(k) = positions.iter().position(|x| !x.is_finite()) {
            return Err(CboError::param(
                "positions",
                format!("coordinate {k} is not finite"),
            ));
        }
        Ok(Self {
            positions,
            n,
            d,
            time: 0.0,
            step: 0,
        })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let d = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != d) {
            return Err(CboError::Dimension("points have different lengths".into()));
        }
        Self::from_rows(points.concat(), points.len(), d)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.positions[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.positions.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.positions
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    /// Index of the first row holding a non-finite coordinate.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.positions
            .iter()
            .position(|x| !x.is_finite())
            .map(|k| k / self.d)
    }

    /// Advance the clock by `dt` after a completed update.
    pub(crate) fn advance(&mut self, dt: f64) -> Result<()> {
        if let Some(particle) = self.first_non_finite() {
            return Err(CboError::Diverged {
                step: self.step,
                particle,
            });
        }
        self.time += dt;
        self.step += 1;
        Ok(())
    }

    /// Snapshot as CSV, one row per particle, columns `x0..x{d-1}`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = (0..self.d).map(|k| format!("x{k}")).collect();
        w.write_record(&header).expect("in-memory write");
        for row in self.rows() {
            w.write_record(row.iter().map(|x| format!("{x:?}")))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }
}

/// Draw `n` i.i.d. particles in `R^d`. Row `i` uses its own stream, so the
/// result does not depend on the worker count.
pub fn init_ensemble(
    dist: &InitialDistribution,
    n: usize,
    d: usize,
    plan: &RngPlan,
) -> Result<Ensemble> {
    dist.validate()?;
    if n == 0 || d == 0 {
        return Err(CboError::Dimension(format!(
            "ensemble needs N >= 1 and d >= 1, got N = {n}, d = {d}"
        )));
    }
    let mut positions = vec![0.0; n * d];
    positions
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(i, row)| {
            let mut rng = plan.stream(StreamTag::Init, i as u64, 0);
            dist.sample_row(&mut rng, row);
        });
    Ensemble::from_rows(positions, n, d)
}

/// Empirical mean and half mean squared deviation,
/// `E = (1/N) Σ X^i`, `V = (1/(2N)) Σ |X^i - E|²`.
pub fn moments(e: &Ensemble) -> (Vec<f64>, f64) {
    let n = e.len() as f64;
    // Accumulate offsets from the first row so identical rows give V = 0 exactly.
    let anchor = e.row(0);
    let mut offset = vec![0.0; e.dim()];
    for row in e.rows() {
        for ((o, x), a) in offset.iter_mut().zip(row).zip(anchor) {
            *o += x - a;
        }
    }
    let mean: Vec<f64> = anchor.iter().zip(&offset).map(|(a, o)| a + o / n).collect();
    let ss: f64 = e
        .rows()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>()
        })
        .sum();
    (mean, ss / (2.0 * n))
}

/// Average of `|X^i - X^j|²` over unordered pairs `i != j`.
///
/// Uses `Σ_{i<j} |X^i - X^j|² = N Σ_i |X^i - E|²`, which is O(N d).
pub fn mean_pairwise_sq_dist(e: &Ensemble) -> Result<f64> {
    let n = e.len();
    if n < 2 {
        return Err(CboError::Dimension(
            "pairwise distance needs at least two particles".into(),
        ));
    }
    let (_, v) = moments(e);
    let nf = n as f64;
    // Σ|X-E|² = 2 N V; pairs = N(N-1)/2
    Ok(nf * 2.0 * nf * v / (nf * (nf - 1.0) / 2.0))
}
