//! Exponentially weighted consensus point and the Laplace functional.
//!
//! The weights `exp(-α f_i)` are evaluated after subtracting `min_i f_i`, so
//! the largest weight is exactly 1 and nothing overflows for any finite α.
//! All sums run over particle indices in ascending order with a fixed
//! pairwise tree, which keeps results bit-identical regardless of how the
//! objective evaluations were scheduled.

use rayon::prelude::*;
use serde::Serialize;

use crate::ensemble::Ensemble;
use crate::error::{CboError, Result};
use crate::objectives::ObjectiveFunction;

const LEAF: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsensusPoint {
    pub v_f: Vec<f64>,
    pub f_at_v: f64,
    /// `log((1/N) Σ exp(-α f_i))` over the particles that formed the point.
    pub log_normalizer: f64,
}

/// Pairwise sum with a fixed tree shape.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

fn check_inputs(fvals: &[f64], alpha: f64) -> Result<f64> {
    if fvals.is_empty() {
        return Err(CboError::Dimension("no objective values".into()));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(CboError::param("alpha", format!("must be finite and >= 0, got {alpha}")));
    }
    let mut min = f64::INFINITY;
    for (index, &value) in fvals.iter().enumerate() {
        if !value.is_finite() {
            return Err(CboError::NonFiniteObjective { index, value });
        }
        min = min.min(value);
    }
    Ok(min)
}

/// Unnormalised weights `exp(-α (f_i - min f))`, each in `(0, 1]`.
fn shifted_weights(fvals: &[f64], alpha: f64, min: f64) -> Vec<f64> {
    fvals.iter().map(|f| (-alpha * (f - min)).exp()).collect()
}

/// Normalised weights `w_i ∝ exp(-α f_i)`.
pub fn weights(fvals: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let min = check_inputs(fvals, alpha)?;
    let mut w = shifted_weights(fvals, alpha, min);
    let total = pairwise_sum(&w);
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

fn weighted_rows(e: &Ensemble, idx: &[usize], u: &[f64], out: &mut [f64]) {
    if idx.len() <= LEAF {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&i, &w) in idx.iter().zip(u) {
            for (o, x) in out.iter_mut().zip(e.row(i)) {
                *o += w * x;
            }
        }
    } else {
        let mid = idx.len() / 2;
        let mut right = vec![0.0; out.len()];
        weighted_rows(e, &idx[..mid], &u[..mid], out);
        weighted_rows(e, &idx[mid..], &u[mid..], &mut right);
        out.iter_mut().zip(&right).for_each(|(o, r)| *o += r);
    }
}

/// Objective values at every particle, evaluated in parallel.
pub fn evaluate(e: &Ensemble, f: &ObjectiveFunction) -> Vec<f64> {
    check_dim(e, f).expect("objective dimension matches ensemble");
    e.as_slice()
        .par_chunks_exact(e.dim())
        .map(|x| f.eval(x))
        .collect()
}

fn check_dim(e: &Ensemble, f: &ObjectiveFunction) -> Result<()> {
    if e.dim() != f.dimension() {
        return Err(CboError::Dimension(format!(
            "objective is {}-dimensional, ensemble is {}-dimensional",
            f.dimension(),
            e.dim()
        )));
    }
    Ok(())
}

/// Weighted mean over the particles in `subset` (all particles when `None`),
/// given their objective values `fvals` (indexed by particle).
///
/// The subset is summed in ascending index order, so a permuted batch gives
/// the same point as the sorted one.
pub fn consensus_from_values(
    e: &Ensemble,
    f: &ObjectiveFunction,
    fvals: &[f64],
    alpha: f64,
    subset: Option<&[usize]>,
) -> Result<ConsensusPoint> {
    check_dim(e, f)?;
    let idx: Vec<usize> = match subset {
        Some(s) => {
            if s.is_empty() {
                return Err(CboError::EmptyBatch);
            }
            let mut s = s.to_vec();
            s.sort_unstable();
            s
        }
        None => (0..e.len()).collect(),
    };
    let local: Vec<f64> = idx.iter().map(|&i| fvals[i]).collect();
    let min = check_inputs(&local, alpha)?;
    let u = shifted_weights(&local, alpha, min);
    let total = pairwise_sum(&u);
    let mut v_f = vec![0.0; e.dim()];
    weighted_rows(e, &idx, &u, &mut v_f);
    v_f.iter_mut().for_each(|x| *x /= total);
    let f_at_v = f.eval(&v_f);
    Ok(ConsensusPoint {
        v_f,
        f_at_v,
        log_normalizer: -alpha * min + (total / idx.len() as f64).ln(),
    })
}

/// `v_f = Σ_i X^i exp(-α f(X^i)) / Σ_i exp(-α f(X^i))`.
pub fn weighted_mean(e: &Ensemble, f: &ObjectiveFunction, alpha: f64) -> Result<ConsensusPoint> {
    check_dim(e, f)?;
    let fvals = evaluate(e, f);
    consensus_from_values(e, f, &fvals, alpha, None)
}

/// `-(1/α) log((1/N) Σ exp(-α f_i))` from precomputed values.
pub fn laplace_from_values(fvals: &[f64], alpha: f64) -> Result<f64> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(CboError::param("alpha", format!("must be > 0, got {alpha}")));
    }
    let min = check_inputs(fvals, alpha)?;
    let u = shifted_weights(fvals, alpha, min);
    let mean = pairwise_sum(&u) / fvals.len() as f64;
    Ok(min - mean.ln() / alpha)
}

/// Empirical Laplace functional of `f` on the particles of `e`.
pub fn laplace_value(e: &Ensemble, f: &ObjectiveFunction, alpha: f64) -> Result<f64> {
    check_dim(e, f)?;
    laplace_from_values(&evaluate(e, f), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{init_ensemble, InitialDistribution};
    use crate::rng::RngPlan;
    use proptest::prelude::*;

    fn quad(d: usize) -> ObjectiveFunction {
        ObjectiveFunction::new("quad", d, |x| x.iter().map(|v| v * v).sum()).unwrap()
    }

    #[test]
    fn weight_examples() {
        let w = weights(&[3.0, -1.0, 7.5, 0.0], 0.0).unwrap();
        assert!(w.iter().all(|&x| x == 0.25));

        let w = weights(&[0.0, 2f64.ln()], 1.0).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);

        // e^{-10^4} is about 1e-4343, far below the smallest subnormal.
        let w = weights(&[0.0, 1.0], 1e4).unwrap();
        assert_eq!(w[0], 1.0);
        assert!(w[1] <= 1e-300);
    }

    #[test]
    fn large_alpha_does_not_overflow() {
        let w = weights(&[1e3, 1e3 + 1e-3, 2e3], 1e6).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(matches!(
            weights(&[0.0, f64::NAN], 1.0),
            Err(CboError::NonFiniteObjective { index: 1, .. })
        ));
        assert!(weights(&[0.0, f64::INFINITY], 1.0).is_err());
        assert!(weights(&[], 1.0).is_err());
        assert!(weights(&[0.0], f64::NAN).is_err());
    }

    #[test]
    fn single_particle_is_its_own_consensus() {
        let e = Ensemble::from_points(&[vec![1.5, -2.0]]).unwrap();
        let c = weighted_mean(&e, &quad(2), 50.0).unwrap();
        assert_eq!(c.v_f, vec![1.5, -2.0]);
        assert_eq!(c.f_at_v, 1.5 * 1.5 + 4.0);
    }

    #[test]
    fn equal_values_give_midpoint() {
        let e = Ensemble::from_points(&[vec![1.0, 0.0], vec![-1.0, 2.0]]).unwrap();
        let flat = ObjectiveFunction::new("flat", 2, |_| 3.0).unwrap();
        let m = weighted_mean(&e, &flat, 7.0).unwrap();
        assert_eq!(m.v_f, vec![0.0, 1.0]);
    }

    #[test]
    fn subset_order_does_not_matter() {
        let e = init_ensemble(
            &InitialDistribution::Gaussian { mean: 0.0, variance: 4.0 },
            100,
            3,
            &RngPlan::new(8),
        )
        .unwrap();
        let f = quad(3);
        let fvals = evaluate(&e, &f);
        let a = consensus_from_values(&e, &f, &fvals, 2.0, Some(&[5, 70, 3, 99])).unwrap();
        let b = consensus_from_values(&e, &f, &fvals, 2.0, Some(&[99, 3, 5, 70])).unwrap();
        assert_eq!(a, b);
        let all: Vec<usize> = (0..100).rev().collect();
        let full = consensus_from_values(&e, &f, &fvals, 2.0, Some(&all)).unwrap();
        assert_eq!(full, weighted_mean(&e, &f, 2.0).unwrap());
        assert!(matches!(
            consensus_from_values(&e, &f, &fvals, 2.0, Some(&[])),
            Err(CboError::EmptyBatch)
        ));
    }

    #[test]
    fn laplace_examples() {
        let e = Ensemble::from_points(&[vec![1.0], vec![4.0], vec![-2.0]]).unwrap();
        let c = ObjectiveFunction::new("c", 1, |_| 2.75).unwrap();
        for alpha in [0.1, 1.0, 100.0, 1e5] {
            assert!((laplace_value(&e, &c, alpha).unwrap() - 2.75).abs() < 1e-12);
        }
        assert!(laplace_value(&e, &c, 0.0).is_err());
    }

    #[test]
    fn laplace_decreases_with_alpha() {
        let e = init_ensemble(
            &InitialDistribution::Gaussian { mean: 0.0, variance: 1.0 },
            10_000,
            1,
            &RngPlan::new(3),
        )
        .unwrap();
        let f = quad(1);
        let vals: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&a| laplace_value(&e, &f, a).unwrap())
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2] && vals[2] > 0.0);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    proptest! {
        #[test]
        fn consensus_stays_in_bounding_box(
            xs in prop::collection::vec(-10.0f64..10.0, 2..60),
            alpha in 0.0f64..200.0,
        ) {
            let n = xs.len() / 2;
            prop_assume!(n >= 1);
            let e = Ensemble::from_rows(xs[..2 * n].to_vec(), n, 2).unwrap();
            let c = weighted_mean(&e, &quad(2), alpha).unwrap();
            for k in 0..2 {
                let lo = e.rows().map(|r| r[k]).fold(f64::INFINITY, f64::min);
                let hi = e.rows().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c.v_f[k] >= lo - 1e-12 && c.v_f[k] <= hi + 1e-12);
            }
        }

        #[test]
        fn laplace_is_monotone(fvals in prop::collection::vec(0.0f64..10.0, 1..50),
                               a in 0.01f64..50.0, b in 0.01f64..50.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let l_lo = laplace_from_values(&fvals, lo).unwrap();
            let l_hi = laplace_from_values(&fvals, hi).unwrap();
            prop_assert!(l_hi <= l_lo + 1e-12);
        }
    }
}
