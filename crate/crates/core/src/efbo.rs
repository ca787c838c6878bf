//! Explore-first learner with blended objectives.
//!
//! Four exploration quarters of `T0` rounds each (uniform actions, two
//! batches of probing rounds, uniform actions again), then for every blend
//! weight `μ` a constrained saddle-point problem is solved on the logs, the
//! best `μ` is picked on the last uniform batch, and the resulting policy
//! mixture is played for the rest of the horizon.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CbusError, Result};
use crate::harness::trajectory::Trajectory;
use crate::oracle::{action_mixture_regret, regret_step, solve_cbus};
use crate::protocol::{env_step, Feedback, Instance, PolicyClass};
use crate::sampling::sample_categorical;

/// `⌈T^{2/3}⌉`, robust to floating-point error on perfect cubes.
pub fn ceil_two_thirds(horizon: usize) -> usize {
    let v = (horizon as f64).powf(2.0 / 3.0);
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r as usize
    } else {
        v.ceil() as usize
    }
}

/// Blend-weight grid `{1 − 2⁻ⁿ} ∪ {1/K + 2⁻ⁿ}`, `n = 1..⌊log₂T⌋`, clipped to
/// `[0, 1]`, deduplicated and sorted.
pub fn mu_grid(horizon: usize, n_actions: usize) -> Vec<f64> {
    let depth = (usize::BITS - 1 - horizon.max(1).leading_zeros()) as i32;
    let mut grid = Vec::with_capacity(2 * depth as usize);
    for n in 1..=depth {
        let step = 0.5f64.powi(n);
        grid.push((1.0 - step).clamp(0.0, 1.0));
        grid.push((1.0 / n_actions as f64 + step).clamp(0.0, 1.0));
    }
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    grid.dedup();
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfboConfig {
    /// Rounds per exploration quarter.
    pub t0: usize,
    /// Cap on the dual variable.
    pub b: f64,
    /// Saddle-point iterations per blend weight.
    pub s: usize,
    pub epsilon: f64,
    pub mu_grid: Vec<f64>,
    pub eta_mwu: f64,
}

impl EfboConfig {
    /// `T0 = ⌈T^{2/3}⌉`, `B = T/T0`, `S = ⌈B·T0⌉`, `η = √(1/(S·B))`.
    pub fn with_defaults(horizon: usize, n_actions: usize, epsilon: f64) -> Result<Self> {
        EfboSpec::default().resolve(horizon, n_actions, epsilon)
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.t0 == 0 || 4 * self.t0 > horizon {
            return Err(CbusError::config(format!("need 1 ≤ T0 and 4·T0 ≤ T, got T0={} T={horizon}", self.t0)));
        }
        if !(self.b >= 1.0) || self.s == 0 || !(self.eta_mwu > 0.0) {
            return Err(CbusError::config("need B ≥ 1, S ≥ 1 and a positive dual step"));
        }
        if self.mu_grid.is_empty() || self.mu_grid.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(CbusError::config("blend grid must be non-empty and inside [0, 1]"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(CbusError::config("epsilon must be non-negative"));
        }
        Ok(())
    }
}

/// Config-file form; omitted fields fall back to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfboSpec {
    #[serde(rename = "T0", default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<usize>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_mwu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_grid: Option<Vec<f64>>,
}

impl EfboSpec {
    pub fn resolve(&self, horizon: usize, n_actions: usize, epsilon: f64) -> Result<EfboConfig> {
        let t0 = self.t0.unwrap_or_else(|| ceil_two_thirds(horizon));
        if t0 == 0 {
            return Err(CbusError::config("T0 must be positive"));
        }
        let b = self.b.unwrap_or(horizon as f64 / t0 as f64);
        let s = self.s.unwrap_or_else(|| (b * t0 as f64 - 1e-9).ceil().max(1.0) as usize);
        let eta_mwu = self.eta_mwu.unwrap_or_else(|| (1.0 / (s as f64 * b)).sqrt());
        let grid = self.mu_grid.clone().unwrap_or_else(|| mu_grid(horizon, n_actions));
        let config = EfboConfig { t0, b, s, epsilon, mu_grid: grid, eta_mwu };
        config.validate(horizon)?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSample {
    pub context: usize,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSample {
    pub context: usize,
    /// `Δ(·, bar_a; x)` as revealed.
    pub row: Vec<f64>,
}

/// Data gathered during the four exploration quarters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExplorationLog {
    /// First uniform quarter; feeds the reward estimate.
    pub reward_batch_1: Vec<RewardSample>,
    /// Last uniform quarter; used only to pick the blend weight.
    pub reward_batch_2: Vec<RewardSample>,
    /// First probing quarter; feeds the constraint estimate.
    pub delta_batch_1: Vec<DeltaSample>,
    /// Second probing quarter; feeds the supervised part of the blend.
    pub delta_batch_2: Vec<DeltaSample>,
}

/// Uniform-logging inverse-propensity estimate `(K/T0) Σ r·1(a = π(x))`.
pub fn ips_reward_estimate(batch: &[RewardSample], policies: &PolicyClass, policy: usize, n_actions: usize) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let hits: f64 = batch
        .iter()
        .filter(|s| policies.action(policy, s.context) == s.action)
        .map(|s| s.reward)
        .sum();
    n_actions as f64 * hits / batch.len() as f64
}

fn delta_sums(batch: &[DeltaSample], policies: &PolicyClass) -> Vec<f64> {
    let mut sums = vec![0.0; policies.n_policies()];
    for s in batch {
        for (sum, &a) in sums.iter_mut().zip(policies.actions_at(s.context)) {
            *sum += s.row[a];
        }
    }
    sums
}

/// `(1/T0)[Σ Δ_t(π(x_t)) − min_π' Σ Δ_t(π'(x_t))]`.
pub fn empirical_constraint_regret(batch: &[DeltaSample], policies: &PolicyClass, policy: usize) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let sums = delta_sums(batch, policies);
    let min = sums.iter().cloned().fold(f64::INFINITY, f64::min);
    (sums[policy] - min) / batch.len() as f64
}

/// `μ·R̂(π) + (1 − μ)·(1/T0) Σ (1 − Δ_t(π(x_t)))` over the second probing batch.
pub fn blended_reward(log: &ExplorationLog, policies: &PolicyClass, policy: usize, mu: f64, n_actions: usize) -> f64 {
    let ips = ips_reward_estimate(&log.reward_batch_1, policies, policy, n_actions);
    let n = log.delta_batch_2.len().max(1) as f64;
    let supervised: f64 = log
        .delta_batch_2
        .iter()
        .map(|s| 1.0 - s.row[policies.action(policy, s.context)])
        .sum::<f64>()
        / n;
    mu * ips + (1.0 - mu) * supervised
}

/// Every per-policy estimate the saddle solver needs, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEstimates {
    pub ips_reward: Vec<f64>,
    /// Mean of `1 − Δ` over the second probing batch.
    pub supervised_reward: Vec<f64>,
    pub constraint_regret: Vec<f64>,
}

impl PolicyEstimates {
    pub fn from_log(log: &ExplorationLog, policies: &PolicyClass, n_actions: usize) -> Self {
        let n = policies.n_policies();
        let mut ips_reward = vec![0.0; n];
        if !log.reward_batch_1.is_empty() {
            let scale = n_actions as f64 / log.reward_batch_1.len() as f64;
            for s in &log.reward_batch_1 {
                if s.reward == 0.0 {
                    continue;
                }
                for (est, &a) in ips_reward.iter_mut().zip(policies.actions_at(s.context)) {
                    if a == s.action {
                        *est += scale * s.reward;
                    }
                }
            }
        }
        let n2 = log.delta_batch_2.len().max(1) as f64;
        let supervised_reward = delta_sums(&log.delta_batch_2, policies)
            .into_iter()
            .map(|s| 1.0 - s / n2)
            .collect();
        let n1 = log.delta_batch_1.len().max(1) as f64;
        let sums = delta_sums(&log.delta_batch_1, policies);
        let min = sums.iter().cloned().fold(f64::INFINITY, f64::min);
        let constraint_regret = sums.iter().map(|s| (s - min) / n1).collect();
        Self { ips_reward, supervised_reward, constraint_regret }
    }

    pub fn blended(&self, policy: usize, mu: f64) -> f64 {
        mu * self.ips_reward[policy] + (1.0 - mu) * self.supervised_reward[policy]
    }

    fn lagrangian_point(&self, policy: usize, lambda: f64, mu: f64, epsilon: f64) -> f64 {
        self.blended(policy, mu) - lambda * (self.constraint_regret[policy] - epsilon)
    }

    /// Lowest-index maximizer of the Lagrangian at `lambda`.
    pub fn best_response(&self, lambda: f64, mu: f64) -> usize {
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for p in 0..self.ips_reward.len() {
            let v = self.blended(p, mu) - lambda * self.constraint_regret[p];
            if v > best_value {
                best = p;
                best_value = v;
            }
        }
        best
    }
}

fn dot(q: &[f64], v: &[f64]) -> f64 {
    q.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `R̂_μ(Q) − λ (R̂eg_c(Q) − ε)`.
pub fn lagrangian(
    q: &[f64],
    lambda: f64,
    mu: f64,
    log: &ExplorationLog,
    policies: &PolicyClass,
    n_actions: usize,
    epsilon: f64,
) -> f64 {
    let est = PolicyEstimates::from_log(log, policies, n_actions);
    (0..q.len()).map(|p| q[p] * est.lagrangian_point(p, lambda, mu, epsilon)).sum()
}

/// Index of the point mass maximizing the Lagrangian at `lambda`.
pub fn best_response(lambda: f64, mu: f64, log: &ExplorationLog, policies: &PolicyClass, n_actions: usize) -> usize {
    PolicyEstimates::from_log(log, policies, n_actions).best_response(lambda, mu)
}

/// Exponentiated-gradient step on the dual variable, clipped at `cap`.
pub fn mwu_update(lambda: f64, violation: f64, eta: f64, cap: f64) -> f64 {
    (lambda * (eta * violation).exp()).min(cap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSolution {
    /// Average of the best-response iterates.
    pub q: Vec<f64>,
    /// `max_Q L(Q, λ̄) − min_λ L(Q̂, λ)` with `λ̄` the average dual iterate.
    pub duality_gap: f64,
    pub lambda_trace: Vec<f64>,
    pub lambda_mean: f64,
    /// `max(0, R̂eg_c(Q̂) − ε)`.
    pub constraint_slack: f64,
}

pub fn saddle_solve(
    mu: f64,
    log: &ExplorationLog,
    policies: &PolicyClass,
    n_actions: usize,
    config: &EfboConfig,
) -> SaddleSolution {
    let est = PolicyEstimates::from_log(log, policies, n_actions);
    saddle_solve_estimates(mu, &est, config)
}

/// Alternates best responses and dual steps for `config.s` iterations,
/// starting from `λ = 1/B`.
pub fn saddle_solve_estimates(mu: f64, est: &PolicyEstimates, config: &EfboConfig) -> SaddleSolution {
    let n = est.ips_reward.len();
    let blended: Vec<f64> = (0..n).map(|p| est.blended(p, mu)).collect();
    let mut counts = vec![0usize; n];
    let mut lambda = 1.0 / config.b;
    let mut lambda_sum = 0.0;
    let mut lambda_trace = Vec::with_capacity(config.s);
    for _ in 0..config.s {
        lambda_trace.push(lambda);
        lambda_sum += lambda;
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for p in 0..n {
            let v = blended[p] - lambda * est.constraint_regret[p];
            if v > best_value {
                best = p;
                best_value = v;
            }
        }
        counts[best] += 1;
        lambda = mwu_update(lambda, est.constraint_regret[best] - config.epsilon, config.eta_mwu, config.b);
    }
    let s = config.s as f64;
    let q: Vec<f64> = counts.iter().map(|&c| c as f64 / s).collect();
    let lambda_mean = lambda_sum / s;
    let q_reward = dot(&q, &blended);
    let q_violation = dot(&q, &est.constraint_regret) - config.epsilon;
    let worst_dual = q_reward - config.b * q_violation.max(0.0);
    let best_primal = (0..n)
        .map(|p| blended[p] - lambda_mean * (est.constraint_regret[p] - config.epsilon))
        .fold(f64::NEG_INFINITY, f64::max);
    SaddleSolution {
        q,
        duality_gap: best_primal - worst_dual,
        lambda_trace,
        lambda_mean,
        constraint_slack: q_violation.max(0.0),
    }
}

/// Picks the blend weight whose mixture scores best on the last uniform
/// batch. Ties go to the smaller weight.
pub fn select_mu(
    candidates: &[(f64, Vec<f64>)],
    reward_batch_2: &[RewardSample],
    policies: &PolicyClass,
    n_actions: usize,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(CbusError::arg("no blend weights to choose from"));
    }
    let ips: Vec<f64> = (0..policies.n_policies())
        .map(|p| ips_reward_estimate(reward_batch_2, policies, p, n_actions))
        .collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[a].0.partial_cmp(&candidates[b].0).expect("finite blend weights"));
    let mut best = order[0];
    let mut best_value = dot(&candidates[best].1, &ips);
    for &i in &order[1..] {
        let v = dot(&candidates[i].1, &ips);
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    Ok(candidates[best].0)
}

/// Plays the four exploration quarters of `t0` rounds and returns the log.
/// `on_round` sees every round's feedback and whether it was a probe.
pub fn explore<R: Rng + ?Sized>(
    instance: &Instance,
    t0: usize,
    rng: &mut R,
    mut on_round: impl FnMut(&Feedback, bool),
) -> Result<ExplorationLog> {
    let k = instance.n_actions();
    let a0 = instance.revealing_action();
    let mut log = ExplorationLog::default();
    for quarter in 0..4 {
        for _ in 0..t0 {
            let x = instance.contexts.sample(rng);
            if quarter == 0 || quarter == 3 {
                let a = rng.gen_range(0..k);
                let fb = env_step(instance, x, a, false, rng)?;
                let sample = RewardSample { context: x, action: a, reward: fb.reward };
                if quarter == 0 {
                    log.reward_batch_1.push(sample);
                } else {
                    log.reward_batch_2.push(sample);
                }
                on_round(&fb, false);
            } else {
                let fb = env_step(instance, x, a0, true, rng)?;
                let row = fb
                    .delta_row
                    .clone()
                    .ok_or_else(|| CbusError::Internal("probing round without a revealed row".into()))?;
                let sample = DeltaSample { context: x, row };
                if quarter == 1 {
                    log.delta_batch_1.push(sample);
                } else {
                    log.delta_batch_2.push(sample);
                }
                on_round(&fb, true);
            }
        }
    }
    Ok(log)
}

/// Result of a full run, with the committed mixture.
#[derive(Debug, Clone)]
pub struct EfboOutcome {
    pub trajectory: Trajectory,
    pub mu_hat: f64,
    pub q_hat: Vec<f64>,
    pub lambda_mean: f64,
    pub log: ExplorationLog,
}

pub fn run_efbo<R: Rng + ?Sized>(instance: &Instance, config: &EfboConfig, horizon: usize, rng: &mut R) -> Result<Trajectory> {
    run_efbo_outcome(instance, config, horizon, rng).map(|o| o.trajectory)
}

pub fn run_efbo_outcome<R: Rng + ?Sized>(
    instance: &Instance,
    config: &EfboConfig,
    horizon: usize,
    rng: &mut R,
) -> Result<EfboOutcome> {
    config.validate(horizon)?;
    let k = instance.n_actions();
    let n_pol = instance.n_policies();
    let truth = solve_cbus(instance);
    let uniform = vec![1.0 / k as f64; k];
    let mut probe = vec![0.0; k];
    probe[instance.revealing_action()] = 1.0;
    let uniform_regret = action_mixture_regret(instance, &truth, &uniform)?;
    let probe_regret = action_mixture_regret(instance, &truth, &probe)?;

    let mut trajectory = Trajectory::with_capacity(horizon);
    let log = explore(instance, config.t0, rng, |fb, probing| {
        let regret = if probing { probe_regret } else { uniform_regret };
        trajectory.push_round(fb, regret, n_pol, None, None);
    })?;
    let est = PolicyEstimates::from_log(&log, &instance.policies, k);
    let solutions: Vec<(f64, SaddleSolution)> =
        config.mu_grid.iter().map(|&mu| (mu, saddle_solve_estimates(mu, &est, config))).collect();
    let candidates: Vec<(f64, Vec<f64>)> = solutions.iter().map(|(mu, s)| (*mu, s.q.clone())).collect();
    let mu_hat = select_mu(&candidates, &log.reward_batch_2, &instance.policies, k)?;
    let chosen = &solutions.iter().find(|(mu, _)| *mu == mu_hat).expect("selected weight is a candidate").1;
    let q_hat = chosen.q.clone();
    let lambda_mean = chosen.lambda_mean;
    let commit_regret = regret_step(&truth, &q_hat)?;
    let support = q_hat.iter().filter(|&&w| w > 0.0).count();

    for _ in 4 * config.t0..horizon {
        let x = instance.contexts.sample(rng);
        let policy = sample_categorical(&q_hat, rng);
        let a = instance.policies.action(policy, x);
        let fb = env_step(instance, x, a, false, rng)?;
        trajectory.push_round(&fb, commit_regret, support, Some(mu_hat), Some(lambda_mean));
    }
    Ok(EfboOutcome { trajectory, mu_hat, q_hat, lambda_mean, log })
}

/// Bound expression minimized over the blend grid when tuning `μ`:
/// `[T^{2/3} √((μ²K + (1−μ)²) log(|Π|T)) + T(1−μ)𝔡] / (μ + α(1−μ))`.
/// `None` where the denominator vanishes.
pub fn blend_bound(mu: f64, horizon: usize, n_actions: usize, n_policies: usize, alpha: f64, dfrak: f64) -> Option<f64> {
    let denom = mu + alpha * (1.0 - mu);
    if denom <= 0.0 {
        return None;
    }
    let t = horizon as f64;
    let k = n_actions as f64;
    let spread = ((mu * mu * k + (1.0 - mu).powi(2)) * (n_policies as f64 * t).ln()).sqrt();
    Some((t.powf(2.0 / 3.0) * spread + t * (1.0 - mu) * dfrak) / denom)
}
