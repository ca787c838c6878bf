//! Exponential-weights base learner over the surviving policies, trained on
//! a blend of importance-weighted reward losses and constraint rows.

use rand::Rng;

use crate::error::{CbusError, Result};
use crate::estimators::{ConstraintTracker, EstimatorConfig};
use crate::harness::trajectory::Trajectory;
use crate::oracle::{action_mixture_regret, regret_step, solve_cbus};
use crate::protocol::{env_step, Instance, PolicyClass};
use crate::sampling::sample_categorical;

#[derive(Debug, Clone, PartialEq)]
pub struct Exp4State {
    pub mu: f64,
    pub cum_loss: Vec<f64>,
    pub eta0: f64,
    /// Non-probing rounds processed so far.
    pub t_internal: usize,
}

/// `√(log|Π| / (2(μ²K + (1 − μ)²)))`.
pub fn default_eta0(mu: f64, n_actions: usize, n_policies: usize) -> f64 {
    let c = mu * mu * n_actions as f64 + (1.0 - mu).powi(2);
    ((n_policies.max(2) as f64).ln() / (2.0 * c)).sqrt()
}

impl Exp4State {
    pub fn new(mu: f64, n_policies: usize, eta0: f64) -> Self {
        Self { mu, cum_loss: vec![0.0; n_policies], eta0, t_internal: 0 }
    }

    /// Step size for the next round, `η₀/√t` on the internal clock.
    pub fn eta(&self) -> f64 {
        self.eta0 / ((self.t_internal + 1) as f64).sqrt()
    }
}

/// `Q(π) ∝ exp(−η L̃(π))` on survivors, zero elsewhere.
pub fn exp4_distribution(state: &Exp4State, surviving: &[bool]) -> Vec<f64> {
    let eta = state.eta();
    let min_loss = state
        .cum_loss
        .iter()
        .zip(surviving)
        .filter(|(_, &s)| s)
        .map(|(l, _)| *l)
        .fold(f64::INFINITY, f64::min);
    let mut q: Vec<f64> = state
        .cum_loss
        .iter()
        .zip(surviving)
        .map(|(l, &s)| if s { (-eta * (l - min_loss)).exp() } else { 0.0 })
        .collect();
    let total: f64 = q.iter().sum();
    for w in &mut q {
        *w /= total;
    }
    q
}

/// Action law induced by `q` at `context`.
pub fn exp4_action_dist(q: &[f64], policies: &PolicyClass, context: usize) -> Vec<f64> {
    let mut p = vec![0.0; policies.n_actions()];
    for (w, &a) in q.iter().zip(policies.actions_at(context)) {
        p[a] += w;
    }
    p
}

/// Per-policy loss of one round; all zeros on a probing round.
#[allow(clippy::too_many_arguments)]
pub fn exp4_loss_vector(
    mu: f64,
    z: bool,
    chosen_action: usize,
    realized_reward: f64,
    propensity: f64,
    bar_delta_row: &[f64],
    policies: &PolicyClass,
    context: usize,
) -> Result<Vec<f64>> {
    let n = policies.n_policies();
    if z {
        return Ok(vec![0.0; n]);
    }
    if !(propensity > 0.0) {
        return Err(CbusError::Internal(format!("propensity {propensity} for a played action")));
    }
    let ips = mu * (1.0 - realized_reward) / propensity;
    let per_action: Vec<f64> = bar_delta_row
        .iter()
        .enumerate()
        .map(|(a, d)| (1.0 - mu) * d + if a == chosen_action { ips } else { 0.0 })
        .collect();
    Ok(policies.actions_at(context).iter().map(|&a| per_action[a]).collect())
}

pub fn exp4_update(state: &mut Exp4State, loss: &[f64], processed: bool) {
    for (c, l) in state.cum_loss.iter_mut().zip(loss) {
        *c += l;
    }
    if processed {
        state.t_internal += 1;
    }
}

/// One base learner on its own, with the estimator running alongside.
pub fn run_single_base<R: Rng + ?Sized>(
    instance: &Instance,
    estimator: &EstimatorConfig,
    mu: f64,
    eta0: Option<f64>,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    let k = instance.n_actions();
    let eta0 = eta0.unwrap_or_else(|| default_eta0(mu, k, instance.n_policies()));
    let mut state = Exp4State::new(mu, instance.n_policies(), eta0);
    let mut tracker = ConstraintTracker::new(estimator.clone(), instance, horizon)?;
    let truth = solve_cbus(instance);
    let a0 = instance.revealing_action();
    let mut probe = vec![0.0; k];
    probe[a0] = 1.0;
    let probe_regret = action_mixture_regret(instance, &truth, &probe)?;
    let mut trajectory = Trajectory::with_capacity(horizon);
    for _ in 0..horizon {
        let x = instance.contexts.sample(rng);
        let q = exp4_distribution(&state, &tracker.sets.surviving);
        if tracker.wants_probe(instance, x, rng) {
            let law = exp4_action_dist(&q, &instance.policies, x);
            let fb = env_step(instance, x, a0, true, rng)?;
            tracker.observe_probe(instance, &fb, &law, rng)?;
            trajectory.push_round(&fb, probe_regret, tracker.sets.n_surviving(), Some(mu), None);
            continue;
        }
        let policy = sample_categorical(&q, rng);
        let a = instance.policies.action(policy, x);
        let fb = env_step(instance, x, a, false, rng)?;
        let row = tracker.observe_play(instance, &fb)?;
        let propensity = exp4_action_dist(&q, &instance.policies, x)[a];
        let loss = exp4_loss_vector(mu, false, a, fb.reward, propensity, &row, &instance.policies, x)?;
        exp4_update(&mut state, &loss, true);
        trajectory.push_round(&fb, regret_step(&truth, &q)?, tracker.sets.n_surviving(), Some(mu), None);
    }
    Ok(trajectory)
}
