//! Exact ground truth by enumeration: per-policy expectations, the
//! constrained optimum, similarity coefficients and per-round regret.

use serde::{Deserialize, Serialize};

use crate::error::{CbusError, Result};
use crate::protocol::Instance;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Exact expectations for every policy plus the constrained optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub exp_reward: Vec<f64>,
    pub exp_constraint: Vec<f64>,
    pub constraint_min: f64,
    pub feasible: Vec<bool>,
    pub pi_star: usize,
    /// Lowest-index policy attaining `constraint_min`.
    pub pi_bar: usize,
    pub epsilon: f64,
}

impl GroundTruth {
    pub fn reward_star(&self) -> f64 {
        self.exp_reward[self.pi_star]
    }

    pub fn constraint_star(&self) -> f64 {
        self.exp_constraint[self.pi_star]
    }

    pub fn feasible_policies(&self) -> Vec<usize> {
        (0..self.feasible.len()).filter(|&p| self.feasible[p]).collect()
    }
}

pub fn expected_reward(instance: &Instance, policy: usize) -> f64 {
    instance
        .contexts
        .probs
        .iter()
        .enumerate()
        .map(|(x, p)| p * instance.effective_reward(x, instance.policies.action(policy, x)))
        .sum()
}

pub fn expected_constraint(instance: &Instance, policy: usize) -> f64 {
    instance
        .contexts
        .probs
        .iter()
        .enumerate()
        .map(|(x, p)| p * instance.expected_delta(x, instance.policies.action(policy, x)))
        .sum()
}

/// Solves the constrained problem by enumerating the policy class.
pub fn solve_cbus(instance: &Instance) -> GroundTruth {
    let n = instance.n_policies();
    let exp_reward: Vec<f64> = (0..n).map(|p| expected_reward(instance, p)).collect();
    let exp_constraint: Vec<f64> = (0..n).map(|p| expected_constraint(instance, p)).collect();
    let pi_bar = argmin(&exp_constraint);
    let constraint_min = exp_constraint[pi_bar];
    let feasible: Vec<bool> = exp_constraint.iter().map(|&c| c <= constraint_min + instance.epsilon).collect();
    let mut pi_star = pi_bar;
    for p in 0..n {
        if feasible[p] && exp_reward[p] > exp_reward[pi_star] {
            pi_star = p;
        }
    }
    // lowest index among ties
    pi_star = (0..n).find(|&p| feasible[p] && exp_reward[p] == exp_reward[pi_star]).unwrap_or(pi_star);
    GroundTruth { exp_reward, exp_constraint, constraint_min, feasible, pi_star, pi_bar, epsilon: instance.epsilon }
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Smallest slack `d ≥ 0` such that for every policy
/// `G(π*) − G(π) ≥ α (R(π*) − R(π)) − d`, with `G` the mean of `1 − Δ`.
pub fn similarity_d(instance: &Instance, alpha: f64) -> f64 {
    similarity_d_with(instance, alpha, |u| 1.0 - u)
}

/// As [`similarity_d`] with the transform `1 − Δ` replaced by `g(Δ)`.
pub fn similarity_d_with(instance: &Instance, alpha: f64, g: impl Fn(f64) -> f64) -> f64 {
    let truth = solve_cbus(instance);
    let transformed: Vec<f64> = (0..instance.n_policies())
        .map(|p| {
            instance
                .contexts
                .probs
                .iter()
                .enumerate()
                .map(|(x, px)| {
                    let a = instance.policies.action(p, x);
                    let row = instance.loss.from_action(x, a);
                    let inner: f64 = instance.user.bar_a_probs[x].iter().zip(row).map(|(q, &d)| q * g(d)).sum();
                    px * inner
                })
                .sum()
        })
        .collect();
    let star = truth.pi_star;
    let mut d: f64 = 0.0;
    for p in 0..instance.n_policies() {
        let reward_gap = truth.exp_reward[star] - truth.exp_reward[p];
        let supervised_gap = transformed[star] - transformed[p];
        d = d.max(alpha * reward_gap - supervised_gap);
    }
    d
}

/// Signed per-round regret of a distribution over policies:
/// `(R(π*) − ⟨Q, R⟩, ⟨Q, C⟩ − C(π*))`.
pub fn regret_step(truth: &GroundTruth, q: &[f64]) -> Result<(f64, f64)> {
    if q.len() != truth.exp_reward.len() {
        return Err(CbusError::arg(format!(
            "distribution has {} entries for {} policies",
            q.len(),
            truth.exp_reward.len()
        )));
    }
    if q.iter().any(|&w| !(w >= 0.0)) {
        return Err(CbusError::arg("distribution has a negative or NaN entry"));
    }
    let total: f64 = q.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(CbusError::arg(format!("distribution sums to {total}")));
    }
    let reward: f64 = q.iter().zip(&truth.exp_reward).map(|(w, r)| w * r).sum();
    let constraint: f64 = q.iter().zip(&truth.exp_constraint).map(|(w, c)| w * c).sum();
    Ok((truth.reward_star() - reward, constraint - truth.constraint_star()))
}

/// Per-round regret of playing actions from a fixed law `weights` (over
/// actions, the same at every context) instead of following a policy.
/// Exploration rounds are charged this way.
pub fn action_mixture_regret(instance: &Instance, truth: &GroundTruth, weights: &[f64]) -> Result<(f64, f64)> {
    if weights.len() != instance.n_actions() {
        return Err(CbusError::arg("action weights must have one entry per action"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(CbusError::arg(format!("action weights sum to {total}")));
    }
    let mut reward = 0.0;
    let mut constraint = 0.0;
    for (x, &px) in instance.contexts.probs.iter().enumerate() {
        for (a, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            reward += px * w * instance.effective_reward(x, a);
            constraint += px * w * instance.expected_delta(x, a);
        }
    }
    Ok((truth.reward_star() - reward, constraint - truth.constraint_star()))
}

/// Closed-form bound expressions evaluated for plotting next to measured regret.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryBounds {
    /// Concentration width of the blended estimator over an exploration batch.
    pub v_t0: f64,
    /// Regret rate of the corralled learner for one blend weight.
    pub phi: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn theory_bounds(
    t0: usize,
    mu: f64,
    v: f64,
    n_policies: usize,
    horizon: usize,
    alpha: f64,
    dfrak: f64,
    n_actions: usize,
) -> Result<TheoryBounds> {
    if t0 == 0 || n_policies == 0 || horizon == 0 || n_actions == 0 {
        return Err(CbusError::arg("sizes must be positive"));
    }
    let denom = mu + alpha * (1.0 - mu);
    if denom == 0.0 {
        return Err(CbusError::arg("μ + α(1 − μ) is zero"));
    }
    let k = n_actions as f64;
    let t0f = t0 as f64;
    let t = horizon as f64;
    let n_pol = n_policies as f64;
    let variance = mu * mu * k + (1.0 - mu).powi(2) * v * v;
    let log_term = (4.0 * n_pol * t0f).ln();
    let v_t0 = 2.0 * (2.0 * t0f * variance * log_term).sqrt() + (mu * k + (1.0 - mu)) * log_term;
    let phi = variance * (t * n_pol.ln() * t.ln()).sqrt() / denom + t * (1.0 - mu) * dfrak / denom;
    Ok(TheoryBounds { v_t0, phi })
}
