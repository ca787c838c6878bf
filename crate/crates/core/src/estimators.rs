//! Constraint estimators and the shrinking sets of surviving policies.
//!
//! Three strategies feed the corral learner: a biased row built from
//! whatever the user showed, a doubly-robust row that corrects it on
//! randomly scheduled probing rounds, and a disagreement-based active
//! learner that only probes when the survivors disagree enough.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::efbo::ceil_two_thirds;
use crate::error::{CbusError, Result};
use crate::protocol::{Feedback, Instance, PolicyClass, SurrogateLoss};
use crate::sampling::{bernoulli, sample_categorical};

/// Per-round moment, range and bias bounds of a generic estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorContract {
    pub v: f64,
    pub b: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Biased,
    DoublyRobust,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKeyword {
    Auto,
}

/// Cap on deliberate probing rounds: a fixed count or `⌈T^{2/3}⌉`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BudgetCap {
    Count(usize),
    Keyword(BudgetKeyword),
}

impl BudgetCap {
    pub fn resolve(self, horizon: usize) -> usize {
        match self {
            BudgetCap::Count(n) => n,
            BudgetCap::Keyword(BudgetKeyword::Auto) => ceil_two_thirds(horizon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(rename = "estimator")]
    pub kind: EstimatorKind,
    #[serde(default)]
    pub nu: f64,
    #[serde(default = "default_delta")]
    pub delta_conf: f64,
    #[serde(default = "default_kappa")]
    pub radius_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_cap: Option<BudgetCap>,
}

fn default_delta() -> f64 {
    0.05
}

fn default_kappa() -> f64 {
    1.0
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, nu: f64) -> Self {
        Self { kind, nu, delta_conf: default_delta(), radius_scale: default_kappa(), budget_cap: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_scale > 0.0) {
            return Err(CbusError::config("radius_scale must be positive"));
        }
        if !(self.delta_conf > 0.0 && self.delta_conf < 1.0) {
            return Err(CbusError::config("delta_conf must lie in (0, 1)"));
        }
        if !(self.nu >= 0.0) {
            return Err(CbusError::config("nu must be non-negative"));
        }
        Ok(())
    }

    /// Probing probability of the doubly-robust schedule, `ν/T^{1/4}`.
    pub fn gamma(&self, horizon: usize) -> f64 {
        (self.nu / (horizon as f64).powf(0.25)).min(1.0)
    }
}

/// Surviving policies plus their cumulative estimated constraint scores.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedPolicySets {
    pub surviving: Vec<bool>,
    pub scores: Vec<f64>,
    /// Radius applied at each shrink.
    pub radius_log: Vec<f64>,
    v2_sum: f64,
    beta_sum: f64,
}

impl NestedPolicySets {
    pub fn new(n_policies: usize) -> Self {
        Self {
            surviving: vec![true; n_policies],
            scores: vec![0.0; n_policies],
            radius_log: Vec::new(),
            v2_sum: 0.0,
            beta_sum: 0.0,
        }
    }

    pub fn n_surviving(&self) -> usize {
        self.surviving.iter().filter(|&&s| s).count()
    }

    pub fn survivors(&self) -> Vec<usize> {
        (0..self.surviving.len()).filter(|&p| self.surviving[p]).collect()
    }

    /// Lowest-index survivor with the smallest score.
    pub fn minimizer(&self) -> usize {
        let mut best = usize::MAX;
        for p in 0..self.surviving.len() {
            if self.surviving[p] && (best == usize::MAX || self.scores[p] < self.scores[best]) {
                best = p;
            }
        }
        best
    }

    /// Adds `row[π(x)]` to every policy's score.
    pub fn accumulate(&mut self, policies: &PolicyClass, context: usize, row: &[f64]) {
        for (score, &a) in self.scores.iter_mut().zip(policies.actions_at(context)) {
            *score += row[a];
        }
    }

    /// Drops survivors whose score exceeds the survivors' minimum by more
    /// than `margin`.
    pub fn eliminate(&mut self, margin: f64) {
        let min = self.scores[self.minimizer()];
        for (alive, &s) in self.surviving.iter_mut().zip(&self.scores) {
            if *alive && s > min + margin {
                *alive = false;
            }
        }
    }
}

/// `row[a] = Δ(a, a_t; x)` when nothing was revealed, `Δ(a, bar_a; x)` otherwise.
pub fn biased_delta(
    xi: bool,
    chosen_action: usize,
    bar_a: Option<usize>,
    context: usize,
    loss: &SurrogateLoss,
) -> Result<Vec<f64>> {
    if xi {
        let b = bar_a.ok_or_else(|| CbusError::arg("a revealed round needs the preferred action"))?;
        Ok(loss.row_against(context, b))
    } else {
        Ok(loss.row_against(context, chosen_action))
    }
}

fn log_term(horizon: usize, n_policies: usize, delta_conf: f64) -> f64 {
    (horizon as f64 * n_policies as f64 / delta_conf).ln()
}

/// `2ν + 4√(2 log(T|Π|/δ)/t)`.
pub fn biased_radius(t: usize, nu: f64, delta_conf: f64, horizon: usize, n_policies: usize) -> f64 {
    2.0 * nu + 4.0 * (2.0 * log_term(horizon, n_policies, delta_conf) / t as f64).sqrt()
}

/// Adds round `t`'s biased row and keeps policies whose mean score is within
/// `ε + κ·r_t` of the best survivor.
#[allow(clippy::too_many_arguments)]
pub fn shrink_biased(
    sets: &mut NestedPolicySets,
    policies: &PolicyClass,
    context: usize,
    row: &[f64],
    t: usize,
    nu: f64,
    epsilon: f64,
    delta_conf: f64,
    kappa: f64,
    horizon: usize,
) {
    let r = kappa * biased_radius(t, nu, delta_conf, horizon, policies.n_policies());
    sets.accumulate(policies, context, row);
    sets.radius_log.push(r);
    sets.eliminate((epsilon + r) * t as f64);
}

/// `hat + z·(true − hat)/γ`.
pub fn doubly_robust_delta(hat_row: &[f64], z: bool, gamma: f64, true_row: Option<&[f64]>) -> Result<Vec<f64>> {
    if !z {
        return Ok(hat_row.to_vec());
    }
    if !(gamma > 0.0) {
        return Err(CbusError::arg("a probing round needs a positive probing probability"));
    }
    let truth = true_row.ok_or_else(|| CbusError::arg("a probing round needs the revealed row"))?;
    Ok(hat_row.iter().zip(truth).map(|(h, v)| h + (v - h) / gamma).collect())
}

/// `4√((1 ∨ νT^{1/4}) L/t) + 4T^{1/4} L/t` with `L = log(T|Π|/δ)`.
pub fn dr_radius(t: usize, delta_conf: f64, nu: f64, horizon: usize, n_policies: usize) -> f64 {
    let l = log_term(horizon, n_policies, delta_conf);
    let quarter = (horizon as f64).powf(0.25);
    let t = t as f64;
    4.0 * ((1.0f64).max(nu * quarter) * l / t).sqrt() + 4.0 * quarter * l / t
}

/// As [`shrink_biased`] with margin `ε + κ·4U_t`.
pub fn shrink_dr(
    sets: &mut NestedPolicySets,
    policies: &PolicyClass,
    context: usize,
    row: &[f64],
    t: usize,
    epsilon: f64,
    u_t: f64,
    kappa: f64,
) {
    let r = kappa * 4.0 * u_t;
    sets.accumulate(policies, context, row);
    sets.radius_log.push(r);
    sets.eliminate((epsilon + r) * t as f64);
}

/// `4√(2 log(|Π|/δ)/t)`.
pub fn active_radius(t: usize, delta_conf: f64, n_policies: usize) -> f64 {
    4.0 * (2.0 * (n_policies as f64 / delta_conf).ln() / t as f64).sqrt()
}

/// Whether two survivors disagree at `context` by at least `ε + r/2`.
pub fn active_query(
    sets: &NestedPolicySets,
    policies: &PolicyClass,
    loss: &SurrogateLoss,
    context: usize,
    epsilon: f64,
    radius: f64,
) -> bool {
    let threshold = epsilon + radius / 2.0;
    if threshold > 1.0 {
        return false;
    }
    let mut seen = vec![false; policies.n_actions()];
    let mut actions = Vec::new();
    for (&a, &alive) in policies.actions_at(context).iter().zip(&sets.surviving) {
        if alive && !seen[a] {
            seen[a] = true;
            actions.push(a);
        }
    }
    for (i, &a) in actions.iter().enumerate() {
        for &b in &actions[i + 1..] {
            if loss.get(context, a, b) >= threshold {
                return true;
            }
        }
    }
    false
}

/// Adds the revealed row on query rounds and keeps `π` with
/// `Ŝ(π) ≤ Ŝ(π̂) + (2ε + 3r_t)·t`.
#[allow(clippy::too_many_arguments)]
pub fn active_shrink(
    sets: &mut NestedPolicySets,
    policies: &PolicyClass,
    context: usize,
    queried_row: Option<&[f64]>,
    t: usize,
    epsilon: f64,
    delta_conf: f64,
    kappa: f64,
) {
    if let Some(row) = queried_row {
        sets.accumulate(policies, context, row);
    }
    let r = kappa * active_radius(t, delta_conf, policies.n_policies());
    sets.radius_log.push(r);
    sets.eliminate((2.0 * epsilon + 3.0 * r) * t as f64);
}

/// `row[a] = Δ(a, π̂(x); x)`.
pub fn active_delta_proxy(policies: &PolicyClass, pi_hat: usize, context: usize, loss: &SurrogateLoss) -> Vec<f64> {
    loss.row_against(context, policies.action(pi_hat, context))
}

/// Shrink for any estimator obeying `contract`: margin
/// `ε·t + √(2Σv² L) + 2bL + Σβ` on cumulative scores.
#[allow(clippy::too_many_arguments)]
pub fn generic_shrink(
    sets: &mut NestedPolicySets,
    policies: &PolicyClass,
    context: usize,
    row: &[f64],
    t: usize,
    contract: EstimatorContract,
    epsilon: f64,
    delta_conf: f64,
    horizon: usize,
) {
    sets.v2_sum += contract.v * contract.v;
    sets.beta_sum += contract.beta;
    let l = log_term(horizon, policies.n_policies(), delta_conf);
    let width = (2.0 * sets.v2_sum * l).sqrt() + 2.0 * contract.b * l + sets.beta_sum;
    sets.accumulate(policies, context, row);
    sets.radius_log.push(width / t as f64);
    sets.eliminate(epsilon * t as f64 + width);
}

/// Allows another deliberate probe while fewer than `cap` have been spent.
/// No cap means no limit.
pub fn dr_budget_guard(_t: usize, z_count: usize, budget_cap: Option<usize>) -> bool {
    budget_cap.map_or(true, |cap| z_count < cap)
}

/// One estimator strategy bound to an instance and a horizon.
#[derive(Debug, Clone)]
pub struct ConstraintTracker {
    pub config: EstimatorConfig,
    pub sets: NestedPolicySets,
    pub epsilon: f64,
    pub horizon: usize,
    budget_cap: Option<usize>,
    z_count: usize,
    /// Rounds seen so far.
    t: usize,
}

impl ConstraintTracker {
    pub fn new(config: EstimatorConfig, instance: &Instance, horizon: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            budget_cap: config.budget_cap.map(|c| c.resolve(horizon)),
            config,
            sets: NestedPolicySets::new(instance.n_policies()),
            epsilon: instance.epsilon,
            horizon,
            z_count: 0,
            t: 0,
        })
    }

    pub fn z_count(&self) -> usize {
        self.z_count
    }

    pub fn gamma(&self) -> f64 {
        self.config.gamma(self.horizon)
    }

    /// Decides whether round `t + 1` is spent probing. Draws from `rng` only
    /// for the doubly-robust schedule with a positive probability.
    pub fn wants_probe<R: Rng + ?Sized>(&self, instance: &Instance, context: usize, rng: &mut R) -> bool {
        let allowed = dr_budget_guard(self.t + 1, self.z_count, self.budget_cap);
        match self.config.kind {
            EstimatorKind::Biased => false,
            EstimatorKind::DoublyRobust => {
                let gamma = self.gamma();
                gamma > 0.0 && allowed && bernoulli(gamma, rng)
            }
            EstimatorKind::Active => {
                let r = self.config.radius_scale * active_radius(self.t + 1, self.config.delta_conf, instance.n_policies());
                allowed && active_query(&self.sets, &instance.policies, &instance.loss, context, self.epsilon, r)
            }
        }
    }

    /// Folds in a non-probing round and returns the constraint row the base
    /// learners should use for it.
    pub fn observe_play(&mut self, instance: &Instance, fb: &Feedback) -> Result<Vec<f64>> {
        self.t += 1;
        let t = self.t;
        let cfg = &self.config;
        match cfg.kind {
            EstimatorKind::Biased => {
                let row = biased_delta(fb.xi, fb.action, fb.bar_a, fb.context, &instance.loss)?;
                shrink_biased(
                    &mut self.sets,
                    &instance.policies,
                    fb.context,
                    &row,
                    t,
                    cfg.nu,
                    self.epsilon,
                    cfg.delta_conf,
                    cfg.radius_scale,
                    self.horizon,
                );
                Ok(row)
            }
            EstimatorKind::DoublyRobust => {
                let hat = biased_delta(fb.xi, fb.action, fb.bar_a, fb.context, &instance.loss)?;
                let row = doubly_robust_delta(&hat, false, self.gamma(), None)?;
                let u = dr_radius(t, cfg.delta_conf, cfg.nu, self.horizon, instance.n_policies());
                shrink_dr(&mut self.sets, &instance.policies, fb.context, &row, t, self.epsilon, u, cfg.radius_scale);
                Ok(row)
            }
            EstimatorKind::Active => {
                let pi_hat = self.sets.minimizer();
                let row = active_delta_proxy(&instance.policies, pi_hat, fb.context, &instance.loss);
                active_shrink(
                    &mut self.sets,
                    &instance.policies,
                    fb.context,
                    None,
                    t,
                    self.epsilon,
                    cfg.delta_conf,
                    cfg.radius_scale,
                );
                Ok(row)
            }
        }
    }

    /// Folds in a probing round and returns its constraint row. `learner_law` is the action law the learner
    /// would have played at this context; the doubly-robust strategy samples
    /// from it to form the estimate it would have had without probing.
    pub fn observe_probe<R: Rng + ?Sized>(
        &mut self,
        instance: &Instance,
        fb: &Feedback,
        learner_law: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let true_row = fb
            .delta_row
            .as_deref()
            .ok_or_else(|| CbusError::Internal("probing round without a revealed row".into()))?;
        self.t += 1;
        self.z_count += 1;
        let t = self.t;
        let cfg = &self.config;
        let row = match cfg.kind {
            EstimatorKind::Biased => {
                shrink_biased(
                    &mut self.sets,
                    &instance.policies,
                    fb.context,
                    true_row,
                    t,
                    cfg.nu,
                    self.epsilon,
                    cfg.delta_conf,
                    cfg.radius_scale,
                    self.horizon,
                );
                true_row.to_vec()
            }
            EstimatorKind::DoublyRobust => {
                let a_cf = sample_categorical(learner_law, rng);
                let revealed = bernoulli(instance.user.reveal_prob[fb.context][a_cf], rng);
                let hat = biased_delta(revealed, a_cf, fb.bar_a, fb.context, &instance.loss)?;
                let row = doubly_robust_delta(&hat, true, self.gamma(), Some(true_row))?;
                let u = dr_radius(t, cfg.delta_conf, cfg.nu, self.horizon, instance.n_policies());
                shrink_dr(&mut self.sets, &instance.policies, fb.context, &row, t, self.epsilon, u, cfg.radius_scale);
                row
            }
            EstimatorKind::Active => {
                active_shrink(
                    &mut self.sets,
                    &instance.policies,
                    fb.context,
                    Some(true_row),
                    t,
                    self.epsilon,
                    cfg.delta_conf,
                    cfg.radius_scale,
                );
                true_row.to_vec()
            }
        };
        Ok(row)
    }
}
