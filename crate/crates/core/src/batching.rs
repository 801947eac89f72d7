//! Random mini-batch driver.
//!
//! Each epoch concatenates the leftover indices of the previous epoch with
//! a fresh permutation of `0..N`, cuts that list into `q` batches of exactly
//! `M` indices and carries the rest over. Every batch forms its own
//! consensus point and moves either its own members (partial updates) or
//! all particles (full updates) with a component-wise step.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::consensus::{consensus_from_values, ConsensusPoint};
use crate::dynamics::componentwise_update;
use crate::ensemble::Ensemble;
use crate::error::{CboError, Result};
use crate::integrators::Integrator;
use crate::objectives::ObjectiveFunction;
use crate::rng::{RngPlan, StreamTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Only the batch members move.
    #[default]
    Partial,
    /// Every particle moves toward the batch consensus.
    Full,
}

/// Step-size or noise schedule indexed by `(epoch, batch)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant { value: f64 },
    /// `value * rate^epoch`
    Geometric { value: f64, rate: f64 },
}

impl Schedule {
    pub fn at(&self, epoch: u64, _batch: usize) -> f64 {
        match *self {
            Schedule::Constant { value } => value,
            Schedule::Geometric { value, rate } => value * rate.powf(epoch as f64),
        }
    }

    fn validate(&self, name: &str, strictly_positive: bool) -> Result<()> {
        let (value, rate) = match *self {
            Schedule::Constant { value } => (value, 1.0),
            Schedule::Geometric { value, rate } => (value, rate),
        };
        let ok_value = value.is_finite() && if strictly_positive { value > 0.0 } else { value >= 0.0 };
        if !ok_value || !(rate.is_finite() && rate > 0.0) {
            return Err(CboError::param(name, format!("invalid schedule {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchParams {
    pub batch_size: usize,
    pub update_mode: UpdateMode,
    /// Learning rate `γ_{k,θ}`.
    pub gamma: Schedule,
    /// Noise scale `σ_{k,θ}`.
    pub sigma: Schedule,
    pub stop_eps: f64,
    pub integrator: Integrator,
}

impl BatchParams {
    pub fn new(batch_size: usize, sigma: f64) -> Self {
        Self {
            batch_size,
            update_mode: UpdateMode::Partial,
            gamma: Schedule::Constant { value: 0.01 },
            sigma: Schedule::Constant { value: sigma },
            stop_eps: 1e-12,
            integrator: Integrator::Euler,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(CboError::param(
                "batch_size",
                format!("must satisfy 1 <= M <= N = {n}, got {}", self.batch_size),
            ));
        }
        self.gamma.validate("gamma", true)?;
        self.sigma.validate("sigma", false)?;
        if !(self.stop_eps.is_finite() && self.stop_eps > 0.0) {
            return Err(CboError::param("stop_eps", format!("must be > 0, got {}", self.stop_eps)));
        }
        Ok(())
    }
}

/// Carry-over indices and epoch counter.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchState {
    pub remainder: Vec<usize>,
    pub epoch: u64,
}

/// Split `remainder ++ permutation(0..n)` into batches of exactly `m`.
pub fn make_batches(
    state: &BatchState,
    n: usize,
    m: usize,
    plan: &RngPlan,
) -> Result<(Vec<Vec<usize>>, BatchState)> {
    let total = n + state.remainder.len();
    if m == 0 || m > total {
        return Err(CboError::param(
            "batch_size",
            format!("must satisfy 1 <= M <= N + |R| = {total}, got {m}"),
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut plan.stream(StreamTag::Permutation, 0, state.epoch));
    let mut list = state.remainder.clone();
    list.extend(perm);
    let q = total / m;
    let batches: Vec<Vec<usize>> = list[..q * m].chunks_exact(m).map(<[usize]>::to_vec).collect();
    let next = BatchState {
        remainder: list[q * m..].to_vec(),
        epoch: state.epoch + 1,
    };
    Ok((batches, next))
}

/// Weighted mean of the batch members only.
pub fn batch_consensus(
    e: &Ensemble,
    f: &ObjectiveFunction,
    alpha: f64,
    batch: &[usize],
) -> Result<ConsensusPoint> {
    if batch.is_empty() {
        return Err(CboError::EmptyBatch);
    }
    let mut fvals = vec![0.0; e.len()];
    for &j in batch {
        fvals[j] = f.eval(e.row(j));
    }
    consensus_from_values(e, f, &fvals, alpha, Some(batch))
}

/// `X^j <- X^j - λγ (X^j - v) + σ √γ (X^j - v) ⊙ z^j` for `j` in `scope`
/// (every particle when `scope` is `None`). Noise is read from the step
/// counter of `e`, which then advances by `gamma`.
#[allow(clippy::too_many_arguments)]
pub fn batch_update(
    e: &mut Ensemble,
    v: &ConsensusPoint,
    lambda: f64,
    sigma: f64,
    gamma: f64,
    integrator: Integrator,
    scope: Option<&[usize]>,
    plan: &RngPlan,
) -> Result<()> {
    let mask = scope.map(|s| {
        let mut m = vec![false; e.len()];
        s.iter().for_each(|&j| m[j] = true);
        m
    });
    let noise = plan.step_noise(e.step, false);
    componentwise_update(e, &v.v_f, lambda, sigma, gamma, integrator, &noise, mask.as_deref());
    e.advance(gamma)
}

/// `(1/d) |v_curr - v_prev|² <= eps`
pub fn stop_check(v_prev: &[f64], v_curr: &[f64], eps: f64) -> bool {
    let d = v_curr.len() as f64;
    let sq: f64 = v_prev
        .iter()
        .zip(v_curr)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    sq / d <= eps
}

/// Outcome of one batched epoch.
#[derive(Debug, Clone)]
pub struct EpochOutcome {
    /// Consensus point of each processed batch, in processing order.
    pub consensus: Vec<ConsensusPoint>,
    pub stopped: bool,
}

/// Random-batch optimizer state.
#[derive(Debug, Clone)]
pub struct BatchDriver {
    pub params: BatchParams,
    pub lambda: f64,
    pub alpha: f64,
    plan: RngPlan,
    state: BatchState,
    last_v: Option<Vec<f64>>,
}

impl BatchDriver {
    pub fn new(params: BatchParams, lambda: f64, alpha: f64, plan: RngPlan, n: usize) -> Result<Self> {
        params.validate(n)?;
        Ok(Self {
            params,
            lambda,
            alpha,
            plan,
            state: BatchState::default(),
            last_v: None,
        })
    }

    pub fn state(&self) -> &BatchState {
        &self.state
    }

    /// Run one epoch; stops early once two consecutive batch consensus
    /// points satisfy [`stop_check`].
    pub fn epoch(&mut self, e: &mut Ensemble, f: &ObjectiveFunction) -> Result<EpochOutcome> {
        let (batches, next) = make_batches(&self.state, e.len(), self.params.batch_size, &self.plan)?;
        let k = self.state.epoch;
        self.state = next;
        let mut consensus = Vec::with_capacity(batches.len());
        for (theta, batch) in batches.iter().enumerate() {
            let c = batch_consensus(e, f, self.alpha, batch)?;
            let gamma = self.params.gamma.at(k, theta);
            let sigma = self.params.sigma.at(k, theta);
            let scope = match self.params.update_mode {
                UpdateMode::Partial => Some(batch.as_slice()),
                UpdateMode::Full => None,
            };
            batch_update(e, &c, self.lambda, sigma, gamma, self.params.integrator, scope, &self.plan)?;
            let stopped = self
                .last_v
                .as_ref()
                .is_some_and(|prev| stop_check(prev, &c.v_f, self.params.stop_eps));
            self.last_v = Some(c.v_f.clone());
            consensus.push(c);
            if stopped {
                return Ok(EpochOutcome { consensus, stopped: true });
            }
        }
        Ok(EpochOutcome { consensus, stopped: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{step_anisotropic, Variant, VariantParams};
    use crate::ensemble::{init_ensemble, InitialDistribution};
    use proptest::prelude::*;

    fn quad(d: usize) -> ObjectiveFunction {
        ObjectiveFunction::new("quad", d, |x| x.iter().map(|v| v * v).sum()).unwrap()
    }

    fn gaussian(n: usize, d: usize) -> Ensemble {
        let dist = InitialDistribution::Gaussian { mean: 0.5, variance: 2.0 };
        init_ensemble(&dist, n, d, &RngPlan::new(31)).unwrap()
    }

    #[test]
    fn batch_counts() {
        let plan = RngPlan::new(0);
        let (b, s) = make_batches(&BatchState::default(), 10, 3, &plan).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|x| x.len() == 3));
        assert_eq!(s.remainder.len(), 1);

        let state = BatchState { remainder: vec![4, 7], epoch: 3 };
        let (b, s) = make_batches(&state, 10, 3, &plan).unwrap();
        assert_eq!(b.len(), 4);
        assert!(s.remainder.is_empty());
        assert_eq!(&b[0][..2], &[4, 7]);

        let (b, s) = make_batches(&BatchState::default(), 6, 6, &plan).unwrap();
        assert_eq!(b.len(), 1);
        let mut all = b[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(s.remainder.is_empty());

        assert!(make_batches(&BatchState::default(), 4, 5, &plan).is_err());
        assert!(make_batches(&BatchState::default(), 4, 0, &plan).is_err());
    }

    #[test]
    fn singleton_and_pair_batches() {
        let e = Ensemble::from_points(&[vec![1.0, 2.0], vec![3.0, 2.0], vec![9.0, 9.0]]).unwrap();
        let f = quad(2);
        assert_eq!(batch_consensus(&e, &f, 5.0, &[2]).unwrap().v_f, vec![9.0, 9.0]);
        let flat = ObjectiveFunction::new("flat", 2, |_| 0.0).unwrap();
        assert_eq!(batch_consensus(&e, &flat, 5.0, &[0, 1]).unwrap().v_f, vec![2.0, 2.0]);
        assert!(matches!(batch_consensus(&e, &f, 1.0, &[]), Err(CboError::EmptyBatch)));
    }

    #[test]
    fn full_batch_consensus_is_weighted_mean() {
        let e = gaussian(40, 3);
        let f = quad(3);
        let all: Vec<usize> = (0..40).rev().collect();
        assert_eq!(
            batch_consensus(&e, &f, 3.0, &all).unwrap(),
            crate::consensus::weighted_mean(&e, &f, 3.0).unwrap()
        );
    }

    #[test]
    fn full_contraction_lands_on_v() {
        let mut e = gaussian(10, 2);
        let c = batch_consensus(&e, &quad(2), 1.0, &[0, 1, 2]).unwrap();
        let lambda = 2.0;
        batch_update(&mut e, &c, lambda, 0.0, 1.0 / lambda, Integrator::Euler, Some(&[0, 1, 2]), &RngPlan::new(0)).unwrap();
        for j in 0..3 {
            for k in 0..2 {
                assert!((e.row(j)[k] - c.v_f[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partial_update_leaves_others_untouched() {
        let e0 = gaussian(12, 3);
        let mut e = e0.clone();
        let c = batch_consensus(&e, &quad(3), 1.0, &[1, 5]).unwrap();
        batch_update(&mut e, &c, 1.0, 0.8, 0.05, Integrator::Euler, Some(&[1, 5]), &RngPlan::new(1)).unwrap();
        for i in 0..12 {
            if i == 1 || i == 5 {
                assert_ne!(e.row(i), e0.row(i));
            } else {
                assert_eq!(e.row(i), e0.row(i));
            }
        }
    }

    #[test]
    fn full_mode_with_single_batch_is_anisotropic_step() {
        let e0 = gaussian(16, 4);
        let f = quad(4);
        let plan = RngPlan::new(5);
        let gamma = 0.02;
        let sigma = 0.9;

        let mut a = e0.clone();
        let p = VariantParams {
            sigma,
            dt: gamma,
            alpha: 4.0,
            ..VariantParams::new(Variant::Anisotropic)
        };
        for _ in 0..5 {
            step_anisotropic(&mut a, &f, &p, &plan).unwrap();
        }

        let mut b = e0.clone();
        let params = BatchParams {
            update_mode: UpdateMode::Full,
            gamma: Schedule::Constant { value: gamma },
            stop_eps: 1e-300,
            ..BatchParams::new(16, sigma)
        };
        let mut driver = BatchDriver::new(params, p.lambda, p.alpha, plan, 16).unwrap();
        for _ in 0..5 {
            driver.epoch(&mut b, &f).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn partial_equals_full_when_batch_is_everything() {
        let e0 = gaussian(8, 2);
        let f = quad(2);
        let run = |mode| {
            let mut e = e0.clone();
            let params = BatchParams { update_mode: mode, stop_eps: 1e-300, ..BatchParams::new(8, 0.5) };
            let mut driver = BatchDriver::new(params, 1.0, 2.0, RngPlan::new(6), 8).unwrap();
            for _ in 0..4 {
                driver.epoch(&mut e, &f).unwrap();
            }
            e
        };
        assert_eq!(run(UpdateMode::Partial), run(UpdateMode::Full));
    }

    #[test]
    fn stop_examples() {
        assert!(stop_check(&[1.0, 2.0], &[1.0, 2.0], 1e-300));
        assert!(stop_check(&[0.0; 4], &[1.0; 4], 1.0));
        assert!(!stop_check(&[0.0], &[1.0], 0.5));
    }

    #[test]
    fn driver_stops_on_consensus() {
        let mut e = gaussian(30, 2);
        let params = BatchParams {
            gamma: Schedule::Constant { value: 0.5 },
            sigma: Schedule::Constant { value: 0.0 },
            stop_eps: 1e-10,
            ..BatchParams::new(10, 0.0)
        };
        let mut driver = BatchDriver::new(params, 1.0, 1.0, RngPlan::new(2), 30).unwrap();
        let stopped = (0..500).any(|_| driver.epoch(&mut e, &quad(2)).unwrap().stopped);
        assert!(stopped);
    }

    #[test]
    fn schedules() {
        assert_eq!(Schedule::Constant { value: 0.3 }.at(9, 2), 0.3);
        let g = Schedule::Geometric { value: 1.0, rate: 0.5 };
        assert_eq!(g.at(3, 0), 0.125);
        assert!(BatchParams { gamma: Schedule::Constant { value: 0.0 }, ..BatchParams::new(2, 1.0) }
            .validate(4)
            .is_err());
        assert!(BatchParams::new(5, 1.0).validate(4).is_err());
    }

    #[test]
    fn batches_are_reproducible() {
        let plan = RngPlan::new(99);
        let s = BatchState { remainder: vec![1], epoch: 7 };
        assert_eq!(make_batches(&s, 9, 2, &plan).unwrap(), make_batches(&s, 9, 2, &plan).unwrap());
    }

    proptest! {
        #[test]
        fn every_index_lands_in_a_batch_within_two_epochs(n in 3usize..30, seed in any::<u64>(), m_frac in 0.0f64..1.0) {
            let m = 1 + ((n - 1) as f64 * m_frac) as usize;
            let plan = RngPlan::new(seed);
            let mut state = BatchState::default();
            for _ in 0..5 {
                let (b1, s1) = make_batches(&state, n, m, &plan).unwrap();
                let (b2, s2) = make_batches(&s1, n, m, &plan).unwrap();
                let mut seen = vec![false; n];
                b1.iter().chain(&b2).flatten().for_each(|&j| seen[j] = true);
                prop_assert!(seen.iter().all(|&s| s));
                state = s2;
            }
        }
    }
}
