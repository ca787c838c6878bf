//! Reward/constraint trade-off on the two-policy hard instance.
//!
//! Each variant runs under both user behaviours for every tilt in the grid.
//! A learner that never probes cannot tell the behaviours apart, and one
//! that always plays the cautious policy gives up the reward gap.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::efbo::{run_efbo, EfboSpec};
use crate::envs::{make_lower_bound, LowerBoundParams, Strategy};
use crate::error::{CbusError, Result};
use crate::harness::experiment::{thread_count, MeanCi};
use crate::harness::trajectory::Trajectory;
use crate::oracle::{action_mixture_regret, regret_step, solve_cbus};
use crate::protocol::{env_step, Instance};
use crate::sampling::{rng_from_seed, sample_categorical};

/// Index of the low-constraint policy in the hard instance.
pub const CAUTIOUS_POLICY: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum TradeoffVariant {
    /// Reward-only explore-then-commit over the non-probing actions.
    NeverProbe,
    /// Plays one fixed policy every round.
    CommitPolicy { policy: usize },
    /// Explore-first learner with `T0 = ⌈T^exponent⌉`.
    Efbo { t0_exponent: f64 },
}

impl TradeoffVariant {
    pub fn label(&self) -> String {
        match self {
            TradeoffVariant::NeverProbe => "never_probe".into(),
            TradeoffVariant::CommitPolicy { policy } => format!("commit_policy_{policy}"),
            TradeoffVariant::Efbo { t0_exponent } => format!("efbo_t0_exp_{t0_exponent:.3}"),
        }
    }
}

pub fn default_variants() -> Vec<TradeoffVariant> {
    vec![
        TradeoffVariant::NeverProbe,
        TradeoffVariant::CommitPolicy { policy: CAUTIOUS_POLICY },
        TradeoffVariant::Efbo { t0_exponent: 0.5 },
        TradeoffVariant::Efbo { t0_exponent: 2.0 / 3.0 },
        TradeoffVariant::Efbo { t0_exponent: 0.8 },
    ]
}

fn play_fixed<R: Rng + ?Sized>(
    instance: &Instance,
    rounds: usize,
    trajectory: &mut Trajectory,
    regret: (f64, f64),
    mut choose: impl FnMut(usize, &mut R) -> usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize, f64)>> {
    let mut log = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let x = instance.contexts.sample(rng);
        let a = choose(x, rng);
        let fb = env_step(instance, x, a, false, rng)?;
        log.push((x, a, fb.reward));
        trajectory.push_round(&fb, regret, instance.n_policies(), None, None);
    }
    Ok(log)
}

/// Uniform over non-probing actions for `⌈T^{2/3}⌉` rounds, then commits to
/// the policy with the best importance-weighted reward.
pub fn run_never_probe<R: Rng + ?Sized>(instance: &Instance, horizon: usize, rng: &mut R) -> Result<Trajectory> {
    let truth = solve_cbus(instance);
    let a0 = instance.revealing_action();
    let k = instance.n_actions();
    let allowed: Vec<usize> = (0..k).filter(|&a| a != a0).collect();
    if allowed.is_empty() {
        return Err(CbusError::arg("no action other than the probing one"));
    }
    let mut law = vec![0.0; k];
    for &a in &allowed {
        law[a] = 1.0 / allowed.len() as f64;
    }
    let explore = crate::efbo::ceil_two_thirds(horizon).min(horizon);
    let mut trajectory = Trajectory::with_capacity(horizon);
    let explore_regret = action_mixture_regret(instance, &truth, &law)?;
    let log = play_fixed(instance, explore, &mut trajectory, explore_regret, |_, r| sample_categorical(&law, r), rng)?;
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for p in 0..instance.n_policies() {
        let v: f64 = log
            .iter()
            .filter(|(x, a, _)| instance.policies.action(p, *x) == *a)
            .map(|(_, _, r)| r * allowed.len() as f64)
            .sum();
        if v > best_value {
            best = p;
            best_value = v;
        }
    }
    let mut point = vec![0.0; instance.n_policies()];
    point[best] = 1.0;
    let commit_regret = regret_step(&truth, &point)?;
    play_fixed(instance, horizon - explore, &mut trajectory, commit_regret, |x, _| instance.policies.action(best, x), rng)?;
    Ok(trajectory)
}

pub fn run_commit_policy<R: Rng + ?Sized>(
    instance: &Instance,
    policy: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if policy >= instance.n_policies() {
        return Err(CbusError::arg(format!("policy {policy} out of range")));
    }
    let truth = solve_cbus(instance);
    let mut point = vec![0.0; instance.n_policies()];
    point[policy] = 1.0;
    let regret = regret_step(&truth, &point)?;
    let mut trajectory = Trajectory::with_capacity(horizon);
    play_fixed(instance, horizon, &mut trajectory, regret, |x, _| instance.policies.action(policy, x), rng)?;
    Ok(trajectory)
}

pub fn run_variant(variant: TradeoffVariant, instance: &Instance, horizon: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = rng_from_seed(seed);
    match variant {
        TradeoffVariant::NeverProbe => run_never_probe(instance, horizon, &mut rng),
        TradeoffVariant::CommitPolicy { policy } => run_commit_policy(instance, policy, horizon, &mut rng),
        TradeoffVariant::Efbo { t0_exponent } => {
            let t0 = (horizon as f64).powf(t0_exponent).ceil() as usize;
            let spec = EfboSpec { t0: Some(t0), ..Default::default() };
            let config = spec.resolve(horizon, instance.n_actions(), instance.epsilon)?;
            run_efbo(instance, &config, horizon, &mut rng)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub variant: String,
    pub gamma: f64,
    pub reg_r_s1: MeanCi,
    pub reg_r_s2: MeanCi,
    pub reg_c_s1: MeanCi,
    pub reg_c_s2: MeanCi,
    /// Growth of cumulative constraint regret over the second half under `S2`.
    pub reg_c_slope_s2: f64,
    /// `max(Reg_r)·√max(Reg_c under S2, 1) / T`.
    pub normalized_product: f64,
}

impl TradeoffRow {
    pub fn worse_reg_r(&self) -> f64 {
        self.reg_r_s1.mean.max(self.reg_r_s2.mean)
    }

    /// Both regrets under both behaviours at most `limit`.
    pub fn achieves_both(&self, limit: f64) -> bool {
        self.worse_reg_r() <= limit && self.reg_c_s1.mean.max(self.reg_c_s2.mean) <= limit
    }
}

fn second_half_slope(tr: &Trajectory) -> f64 {
    let n = tr.len();
    let half = n / 2;
    if half == 0 {
        return 0.0;
    }
    let mid = tr.records[half - 1].cum_reg_c;
    (tr.final_cum_reg_c() - mid) / (n - half) as f64
}

#[allow(clippy::too_many_arguments)]
pub fn tradeoff_sweep(
    gammas: &[f64],
    c: f64,
    horizon: usize,
    variants: &[TradeoffVariant],
    seeds: &[u64],
    epsilon: f64,
) -> Result<Vec<TradeoffRow>> {
    if seeds.is_empty() {
        return Err(CbusError::arg("need at least one seed"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| CbusError::Internal(e.to_string()))?;
    let mut rows = Vec::new();
    for &variant in variants {
        for &gamma in gammas {
            let build = |strategy| make_lower_bound(&LowerBoundParams { c, gamma, strategy, epsilon });
            let s1 = build(Strategy::S1)?;
            let s2 = build(Strategy::S2)?;
            let runs = |inst: &Instance| -> Result<Vec<Trajectory>> {
                pool.install(|| seeds.par_iter().map(|&s| run_variant(variant, inst, horizon, s)).collect())
            };
            let t1 = runs(&s1)?;
            let t2 = runs(&s2)?;
            let stat = |ts: &[Trajectory], f: fn(&Trajectory) -> f64| {
                MeanCi::from_samples(&ts.iter().map(f).collect::<Vec<_>>())
            };
            let reg_r_s1 = stat(&t1, Trajectory::final_cum_reg_r);
            let reg_r_s2 = stat(&t2, Trajectory::final_cum_reg_r);
            let reg_c_s1 = stat(&t1, Trajectory::final_cum_reg_c);
            let reg_c_s2 = stat(&t2, Trajectory::final_cum_reg_c);
            let reg_c_slope_s2 = t2.iter().map(second_half_slope).sum::<f64>() / t2.len() as f64;
            let worse = reg_r_s1.mean.max(reg_r_s2.mean);
            rows.push(TradeoffRow {
                variant: variant.label(),
                gamma,
                reg_r_s1,
                reg_r_s2,
                reg_c_s1,
                reg_c_s2,
                reg_c_slope_s2,
                normalized_product: worse * reg_c_s2.mean.max(1.0).sqrt() / horizon as f64,
            });
        }
    }
    Ok(rows)
}

fn default_c() -> f64 {
    0.25
}
fn default_gammas() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}
fn default_horizon() -> usize {
    1 << 15
}
fn default_seeds() -> usize {
    10
}
fn default_tolerance() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradeoffConfig {
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(rename = "T", default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_seeds")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// Constraint tolerance; below every tilt so the behaviours differ.
    #[serde(default = "default_tolerance")]
    pub epsilon: f64,
    #[serde(default = "default_variants")]
    pub variants: Vec<TradeoffVariant>,
}

impl Default for TradeoffConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TradeoffConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replications as u64).map(|i| self.seed + i).collect()
    }

    pub fn run(&self) -> Result<Vec<TradeoffRow>> {
        tradeoff_sweep(&self.gammas, self.c, self.horizon, &self.variants, &self.seeds(), self.epsilon)
    }
}

/// Outcome of the three shape checks on a finished sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffVerdict {
    pub never_probe_linear: bool,
    pub cautious_pays_reward: bool,
    pub no_variant_escapes: bool,
}

impl TradeoffVerdict {
    pub fn passed(&self) -> bool {
        self.never_probe_linear && self.cautious_pays_reward && self.no_variant_escapes
    }
}

/// Never-probe slope under `S2` at least `γ/4`, cautious commit
/// `Reg_r/T ≥ c/2`, and no variant keeps both regrets below `T^0.55` under
/// both behaviours.
pub fn check_tradeoff(rows: &[TradeoffRow], c: f64, horizon: usize) -> TradeoffVerdict {
    let never = TradeoffVariant::NeverProbe.label();
    let cautious = TradeoffVariant::CommitPolicy { policy: CAUTIOUS_POLICY }.label();
    let limit = (horizon as f64).powf(0.55);
    let never_rows: Vec<&TradeoffRow> = rows.iter().filter(|r| r.variant == never).collect();
    let cautious_rows: Vec<&TradeoffRow> = rows.iter().filter(|r| r.variant == cautious).collect();
    TradeoffVerdict {
        never_probe_linear: !never_rows.is_empty() && never_rows.iter().all(|r| r.reg_c_slope_s2 >= r.gamma / 4.0),
        cautious_pays_reward: !cautious_rows.is_empty()
            && cautious_rows.iter().all(|r| r.worse_reg_r() / horizon as f64 >= c / 2.0),
        no_variant_escapes: rows.iter().all(|r| !r.achieves_both(limit)),
    }
}
