//! Objective functions and the benchmark registry.
//!
//! All benchmarks attain their global minimum 0 at the origin. `wavy` uses
//! frequency 10, i.e. `1 - (1/d) Σ cos(10 x_i) exp(-x_i²/2)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{CboError, Result};

/// Names accepted by [`benchmark`].
pub const BENCHMARKS: [&str; 5] = ["ackley", "rastrigin", "griewank", "zakharov", "wavy"];

/// Known optimum and recommended search box of an objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub minimizer: Vec<f64>,
    pub minimum: f64,
    /// Recommended box `[lo, hi]^d`.
    pub search_box: (f64, f64),
}

type EvalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Deterministic map `R^d -> R`, shareable across worker threads.
#[derive(Clone)]
pub struct ObjectiveFunction {
    name: String,
    dimension: usize,
    eval: Arc<EvalFn>,
    metadata: Option<Metadata>,
}

impl fmt::Debug for ObjectiveFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectiveFunction")
            .field("name", &self.name)
            .field("dimension", &self.dimension)
            .field("metadata", &self.metadata)
            .finish()
    }
}

impl ObjectiveFunction {
    pub fn new<F>(name: impl Into<String>, dimension: usize, eval: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        if dimension == 0 {
            return Err(CboError::Dimension("objective dimension must be >= 1".into()));
        }
        Ok(Self {
            name: name.into(),
            dimension,
            eval: Arc::new(eval),
            metadata: None,
        })
    }

    pub fn with_metadata(mut self, metadata: Metadata) -> Result<Self> {
        if metadata.minimizer.len() != self.dimension {
            return Err(CboError::Dimension(format!(
                "minimizer has length {}, objective dimension is {}",
                metadata.minimizer.len(),
                self.dimension
            )));
        }
        self.metadata = Some(metadata);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn metadata(&self) -> Option<&Metadata> {
        self.metadata.as_ref()
    }

    /// Evaluate at `x`; `x.len()` must equal [`Self::dimension`].
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dimension);
        (self.eval)(x)
    }

    /// Same function shifted by a constant, `f + c`.
    pub fn shifted(&self, c: f64) -> Self {
        let inner = Arc::clone(&self.eval);
        Self {
            name: format!("{}+{c}", self.name),
            dimension: self.dimension,
            eval: Arc::new(move |x| inner(x) + c),
            metadata: self.metadata.clone().map(|mut m| {
                m.minimum += c;
                m
            }),
        }
    }

    /// Same function scaled by `s`, `s * f`.
    pub fn scaled(&self, s: f64) -> Self {
        let inner = Arc::clone(&self.eval);
        Self {
            name: format!("{s}*{}", self.name),
            dimension: self.dimension,
            eval: Arc::new(move |x| s * inner(x)),
            metadata: self.metadata.clone().map(|mut m| {
                m.minimum *= s;
                m
            }),
        }
    }
}

fn nonempty(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        Err(CboError::Dimension("objective evaluated on an empty vector".into()))
    } else {
        Ok(x.len() as f64)
    }
}

pub fn ackley(x: &[f64]) -> Result<f64> {
    let d = nonempty(x)?;
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / d;
    let mean_cos = x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / d;
    // Grouped so that both brackets cancel exactly at the origin.
    Ok(20.0 * (1.0 - (-0.2 * mean_sq.sqrt()).exp()) + (1f64.exp() - mean_cos.exp()))
}

pub fn rastrigin(x: &[f64]) -> Result<f64> {
    nonempty(x)?;
    Ok(x
        .iter()
        .map(|v| v * v - 10.0 * (2.0 * PI * v).cos() + 10.0)
        .sum())
}

pub fn griewank(x: &[f64]) -> Result<f64> {
    nonempty(x)?;
    let sum = x.iter().map(|v| v * v).sum::<f64>() / 4000.0;
    let prod = x
        .iter()
        .enumerate()
        .map(|(i, v)| (v / ((i + 1) as f64).sqrt()).cos())
        .product::<f64>();
    Ok(1.0 + sum - prod)
}

pub fn zakharov(x: &[f64]) -> Result<f64> {
    nonempty(x)?;
    let sq = x.iter().map(|v| v * v).sum::<f64>();
    let lin = x
        .iter()
        .enumerate()
        .map(|(i, v)| 0.5 * (i + 1) as f64 * v)
        .sum::<f64>();
    Ok(sq + lin.powi(2) + lin.powi(4))
}

pub fn wavy(x: &[f64]) -> Result<f64> {
    let d = nonempty(x)?;
    let s = x
        .iter()
        .map(|v| (10.0 * v).cos() * (-0.5 * v * v).exp())
        .sum::<f64>();
    Ok(1.0 - s / d)
}

fn search_box(name: &str) -> (f64, f64) {
    match name {
        "ackley" => (-32.768, 32.768),
        "rastrigin" => (-5.12, 5.12),
        "griewank" => (-600.0, 600.0),
        "zakharov" => (-5.0, 10.0),
        _ => (-PI, PI),
    }
}

/// Look up a benchmark by name in dimension `d`.
pub fn benchmark(name: &str, d: usize) -> Result<ObjectiveFunction> {
    let f: fn(&[f64]) -> Result<f64> = match name {
        "ackley" => ackley,
        "rastrigin" => rastrigin,
        "griewank" => griewank,
        "zakharov" => zakharov,
        "wavy" => wavy,
        other => {
            return Err(CboError::Unknown {
                kind: "objective",
                name: other.to_string(),
            })
        }
    };
    ObjectiveFunction::new(name, d, move |x| f(x).unwrap_or(f64::NAN))?.with_metadata(Metadata {
        minimizer: vec![0.0; d],
        minimum: 0.0,
        search_box: search_box(name),
    })
}
