//! Master learner that corrals one exponential-weights base per blend weight.
//!
//! The bases share the estimator's surviving policy set. The master plays
//! 1/2-Tsallis FTRL over the bases with a hedging bonus and a mixing floor,
//! and everything freezes on probing rounds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::efbo::mu_grid;
use crate::error::{CbusError, Result};
use crate::estimators::{ConstraintTracker, EstimatorConfig};
use crate::exp4::{default_eta0, exp4_action_dist, exp4_distribution, exp4_loss_vector, exp4_update, Exp4State};
use crate::harness::trajectory::Trajectory;
use crate::oracle::{action_mixture_regret, regret_step, solve_cbus, GroundTruth};
use crate::protocol::{env_step, Feedback, Instance};
use crate::sampling::sample_categorical;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorralConfig {
    pub estimator: EstimatorConfig,
    /// Overrides every base's step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta0: Option<f64>,
    /// Per-base mixing floor; `1/(2MT)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_floor: Option<f64>,
    /// Multiplier on the hedging bonus.
    #[serde(default = "default_hedge_scale")]
    pub hedge_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_grid: Option<Vec<f64>>,
}

fn default_hedge_scale() -> f64 {
    0.1
}

impl CorralConfig {
    pub fn new(estimator: EstimatorConfig) -> Self {
        Self { estimator, eta0: None, master_floor: None, hedge_scale: default_hedge_scale(), mu_grid: None }
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        if let Some(e) = self.eta0 {
            if !(e > 0.0) {
                return Err(CbusError::config("eta0 must be positive"));
            }
        }
        if !(self.hedge_scale >= 0.0) {
            return Err(CbusError::config("hedge_scale must be non-negative"));
        }
        if let Some(grid) = &self.mu_grid {
            if grid.is_empty() || grid.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return Err(CbusError::config("blend grid must be non-empty and inside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// `μ²K + (1 − μ)²`.
pub fn stability_constant(mu: f64, n_actions: usize) -> f64 {
    mu * mu * n_actions as f64 + (1.0 - mu).powi(2)
}

/// 1/2-Tsallis FTRL weights `1/(η(L_m − x))²`, normalized through `x`.
pub fn tsallis_weights(cum_loss: &[f64], eta: f64) -> Vec<f64> {
    let m = cum_loss.len();
    let min = cum_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    let mass = |x: f64| cum_loss.iter().map(|l| (eta * (l - x)).powi(-2)).sum::<f64>();
    let mut lo = min - (m as f64).sqrt() / eta;
    let mut hi = min - 1.0 / eta;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut p: Vec<f64> = cum_loss.iter().map(|l| (eta * (l - lo)).powi(-2)).collect();
    let total: f64 = p.iter().sum();
    for w in &mut p {
        *w /= total;
    }
    p
}

#[derive(Debug, Clone)]
pub struct CorralState {
    pub master_weights: Vec<f64>,
    pub bases: Vec<Exp4State>,
    pub stability_constants: Vec<f64>,
    pub tracker: ConstraintTracker,
    master_loss: Vec<f64>,
    /// Largest importance weight each base has seen.
    rho: Vec<f64>,
    hedge: Vec<f64>,
    floor: f64,
    master_t: usize,
    truth: GroundTruth,
    probe_regret: (f64, f64),
}

impl CorralState {
    pub fn new(instance: &Instance, config: &CorralConfig, horizon: usize) -> Result<Self> {
        config.validate()?;
        let k = instance.n_actions();
        let n_pol = instance.n_policies();
        let grid = config.mu_grid.clone().unwrap_or_else(|| mu_grid(horizon, k));
        let m = grid.len();
        let bases: Vec<Exp4State> = grid
            .iter()
            .map(|&mu| Exp4State::new(mu, n_pol, config.eta0.unwrap_or_else(|| default_eta0(mu, k, n_pol))))
            .collect();
        let stability_constants: Vec<f64> = grid.iter().map(|&mu| stability_constant(mu, k)).collect();
        let hedge = stability_constants.iter().map(|c| config.hedge_scale * c.sqrt()).collect();
        let floor = config.master_floor.unwrap_or(1.0 / (2.0 * m as f64 * horizon as f64));
        if !(floor >= 0.0 && floor * m as f64 <= 1.0) {
            return Err(CbusError::config("master_floor must lie in [0, 1/M]"));
        }
        let truth = solve_cbus(instance);
        let mut probe = vec![0.0; k];
        probe[instance.revealing_action()] = 1.0;
        let probe_regret = action_mixture_regret(instance, &truth, &probe)?;
        Ok(Self {
            master_weights: vec![1.0 / m as f64; m],
            bases,
            stability_constants,
            tracker: ConstraintTracker::new(config.estimator.clone(), instance, horizon)?,
            master_loss: vec![0.0; m],
            rho: vec![m as f64; m],
            hedge,
            floor,
            master_t: 0,
            truth,
            probe_regret,
        })
    }

    pub fn n_bases(&self) -> usize {
        self.bases.len()
    }

    fn refresh_master(&mut self) {
        let m = self.n_bases();
        if m == 1 {
            self.master_weights = vec![1.0];
            return;
        }
        let eta = (m as f64 / (self.master_t + 1) as f64).sqrt();
        let p = tsallis_weights(&self.master_loss, eta);
        let keep = 1.0 - m as f64 * self.floor;
        self.master_weights = p.into_iter().map(|w| keep * w + self.floor).collect();
    }
}

/// What happened in one round.
#[derive(Debug, Clone)]
pub struct CorralStep {
    pub feedback: Feedback,
    /// Policy law the learner was following this round.
    pub q_played: Vec<f64>,
    pub base: Option<usize>,
}

/// Plays one round and updates every component.
pub fn corral_round<R: Rng + ?Sized>(state: &mut CorralState, instance: &Instance, rng: &mut R) -> Result<CorralStep> {
    state.refresh_master();
    let x = instance.contexts.sample(rng);
    let surviving = state.tracker.sets.surviving.clone();
    let qs: Vec<Vec<f64>> = state.bases.iter().map(|b| exp4_distribution(b, &surviving)).collect();
    let mut q_mix = vec![0.0; instance.n_policies()];
    for (q, &pm) in qs.iter().zip(&state.master_weights) {
        for (acc, w) in q_mix.iter_mut().zip(q) {
            *acc += pm * w;
        }
    }
    if state.tracker.wants_probe(instance, x, rng) {
        let law = exp4_action_dist(&q_mix, &instance.policies, x);
        let fb = env_step(instance, x, instance.revealing_action(), true, rng)?;
        state.tracker.observe_probe(instance, &fb, &law, rng)?;
        return Ok(CorralStep { feedback: fb, q_played: q_mix, base: None });
    }
    let m_t = if state.n_bases() == 1 { 0 } else { sample_categorical(&state.master_weights, rng) };
    let policy = sample_categorical(&qs[m_t], rng);
    let a = instance.policies.action(policy, x);
    let fb = env_step(instance, x, a, false, rng)?;
    let row = state.tracker.observe_play(instance, &fb)?;
    let pm = state.master_weights[m_t];
    let base_prop = exp4_action_dist(&qs[m_t], &instance.policies, x)[a];
    for (i, base) in state.bases.iter_mut().enumerate() {
        if i == m_t {
            let scaled: Vec<f64> = row.iter().map(|d| d / pm).collect();
            let loss = exp4_loss_vector(base.mu, false, a, fb.reward, pm * base_prop, &scaled, &instance.policies, x)?;
            exp4_update(base, &loss, true);
        } else {
            base.t_internal += 1;
        }
    }
    if state.n_bases() > 1 {
        let weight = 1.0 / pm;
        state.master_loss[m_t] += (1.0 - fb.reward) * weight;
        if weight > state.rho[m_t] {
            let bonus = state.hedge[m_t] * (weight.sqrt() - state.rho[m_t].sqrt());
            state.master_loss[m_t] -= bonus;
            state.rho[m_t] = weight;
        }
        state.master_t += 1;
    }
    Ok(CorralStep { feedback: fb, q_played: q_mix, base: Some(m_t) })
}

#[derive(Debug, Clone)]
pub struct CorralOutcome {
    pub trajectory: Trajectory,
    pub surviving: Vec<bool>,
    pub master_weights: Vec<f64>,
    pub mu_grid: Vec<f64>,
}

pub fn run_corral<R: Rng + ?Sized>(
    instance: &Instance,
    config: &CorralConfig,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    run_corral_outcome(instance, config, horizon, rng).map(|o| o.trajectory)
}

pub fn run_corral_outcome<R: Rng + ?Sized>(
    instance: &Instance,
    config: &CorralConfig,
    horizon: usize,
    rng: &mut R,
) -> Result<CorralOutcome> {
    let mut state = CorralState::new(instance, config, horizon)?;
    let mut trajectory = Trajectory::with_capacity(horizon);
    for _ in 0..horizon {
        let step = corral_round(&mut state, instance, rng)?;
        let regret = if step.feedback.z { state.probe_regret } else { regret_step(&state.truth, &step.q_played)? };
        let active_mu = step.base.map(|m| state.bases[m].mu);
        trajectory.push_round(&step.feedback, regret, state.tracker.sets.n_surviving(), active_mu, None);
    }
    Ok(CorralOutcome {
        trajectory,
        surviving: state.tracker.sets.surviving.clone(),
        master_weights: state.master_weights.clone(),
        mu_grid: state.bases.iter().map(|b| b.mu).collect(),
    })
}
