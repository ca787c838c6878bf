//! Instance generators.
//!
//! Surrogate losses are always built from an embedding: every (context,
//! action) pair gets a point in `[0, 1]` and `Δ(a, b; x) = |p_a − p_b|`,
//! which is a metric by construction. Unless stated otherwise the revealing
//! action is the last action `K − 1`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CbusError, Result};
use crate::oracle::{similarity_d, solve_cbus};
use crate::protocol::{validate_instance, ContextSpace, Instance, PolicyClass, SurrogateLoss, UserModel};
use crate::sampling::{rng_from_seed, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    LowerBound,
    Random,
    Triggered,
    Massart,
    Aligned,
}

/// Which user behaviour the two-policy hard instance uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Preferred action uniform over the two non-probing actions.
    S1,
    /// Preferred action tilted towards the second policy's choice.
    S2,
}

/// Parameters of the two-policy hard instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundParams {
    /// Reward gap between the two policies.
    pub c: f64,
    /// Tilt of the preferred-action law under `S2`.
    pub gamma: f64,
    pub strategy: Strategy,
    #[serde(default)]
    pub epsilon: f64,
}

impl LowerBoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 0.5) {
            return Err(CbusError::arg(format!("gamma must lie in (0, 1/2), got {}", self.gamma)));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(CbusError::arg(format!("c must lie in (0, 1], got {}", self.c)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(CbusError::arg("epsilon must be non-negative"));
        }
        Ok(())
    }
}

fn default_n_contexts() -> usize {
    8
}
fn default_k() -> usize {
    4
}
fn default_n_policies() -> usize {
    16
}
fn default_alpha() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_support() -> usize {
    1
}

/// Description of a generated instance, as found under the `instance` key
/// of experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    #[serde(default = "default_n_contexts")]
    pub n_contexts: usize,
    #[serde(rename = "K", default = "default_k")]
    pub k: usize,
    #[serde(default = "default_n_policies")]
    pub n_policies: usize,
    /// Trigger level for `triggered`.
    #[serde(default)]
    pub nu: f64,
    /// Margin for `massart`.
    #[serde(default)]
    pub tau: f64,
    /// Similarity targets for `aligned`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub dfrak: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Number of actions the preferred-action law puts mass on.
    #[serde(default = "default_support")]
    pub bar_a_support: usize,
    /// `massart` only: also require every policy to be either far from the
    /// minimizer in expectation or close to it at every context.
    #[serde(default)]
    pub weak_massart: bool,
    /// `lower_bound` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_bound: Option<LowerBoundParams>,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind, n_contexts: usize, k: usize, n_policies: usize) -> Self {
        Self {
            kind,
            n_contexts,
            k,
            n_policies,
            nu: 0.0,
            tau: 0.0,
            alpha: default_alpha(),
            dfrak: 0.0,
            seed: 0,
            epsilon: default_epsilon(),
            bar_a_support: default_support(),
            weak_massart: false,
            lower_bound: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Builds the instance from a generator seeded with `self.seed`.
    pub fn generate(&self) -> Result<Instance> {
        let mut rng = rng_from_seed(self.seed);
        match self.kind {
            GeneratorKind::LowerBound => {
                let params = self
                    .lower_bound
                    .ok_or_else(|| CbusError::config("lower_bound instance needs a `lower_bound` parameter block"))?;
                make_lower_bound(&params)
            }
            GeneratorKind::Random => make_random(self, &mut rng),
            GeneratorKind::Triggered => make_triggered(self, &mut rng),
            GeneratorKind::Massart => make_massart(self, &mut rng),
            GeneratorKind::Aligned => make_aligned(self, &mut rng),
        }
    }
}

/// Two sign classes of contexts with equal mass, actions `a₊ = 0`, `a₋ = 1`
/// and a dedicated probing action `2`. Policy 0 follows the sign, policy 1
/// plays against it. Context 0 carries sign +1, context 1 sign −1.
pub fn make_lower_bound(params: &LowerBoundParams) -> Result<Instance> {
    params.validate()?;
    const A_POS: usize = 0;
    const A_NEG: usize = 1;
    const PROBE: usize = 2;
    let follow = vec![A_POS, A_NEG];
    let against = vec![A_NEG, A_POS];
    let policies = PolicyClass::new(vec![follow.clone(), against.clone()], 3)?;

    let mut mu_b = vec![vec![0.0; 3]; 2];
    let mut reveal_prob = vec![vec![0.0; 3]; 2];
    for x in 0..2 {
        mu_b[x][follow[x]] = params.c;
        reveal_prob[x][against[x]] = 1.0;
        reveal_prob[x][PROBE] = 1.0;
    }
    let loss = SurrogateLoss::from_fn(2, 3, |x, a, b| if x == 1 && a != b { 1.0 } else { 0.0 });
    let bar_a_probs = (0..2)
        .map(|x| {
            let mut row = vec![0.0; 3];
            let (tilted, other) = (against[x], follow[x]);
            let shift = match params.strategy {
                Strategy::S1 => 0.0,
                Strategy::S2 => params.gamma,
            };
            row[tilted] = 0.5 + shift;
            row[other] = 0.5 - shift;
            row
        })
        .collect();
    Ok(Instance {
        contexts: ContextSpace::uniform(2),
        policies,
        mu_b,
        loss,
        user: UserModel { bar_a_probs, reveal_prob, revealing_action: PROBE, triggered: None },
        epsilon: params.epsilon,
    })
}

fn check_sizes(spec: &GeneratorSpec) -> Result<()> {
    if spec.n_contexts == 0 || spec.k == 0 || spec.n_policies == 0 {
        return Err(CbusError::Generation("sizes must be at least 1".into()));
    }
    if !(spec.nu >= 0.0) || !(spec.tau >= 0.0) || !(spec.epsilon >= 0.0) {
        return Err(CbusError::Generation("nu, tau and epsilon must be non-negative".into()));
    }
    Ok(())
}

fn expect_kind(spec: &GeneratorSpec, kind: GeneratorKind) -> Result<()> {
    if spec.kind != kind {
        return Err(CbusError::arg(format!("generator for {kind:?} called with a {:?} spec", spec.kind)));
    }
    Ok(())
}

/// Number of distinct rows over `choices` actions, saturating.
fn row_space(choices: usize, n_contexts: usize) -> f64 {
    (choices as f64).powi(n_contexts as i32)
}

/// Draws `n` distinct policy rows using only `allowed` actions and avoiding
/// the rows in `taken`.
fn distinct_rows(
    n: usize,
    n_contexts: usize,
    allowed: &[usize],
    taken: &[Vec<usize>],
    rng: &mut SimRng,
) -> Result<Vec<Vec<usize>>> {
    let space = row_space(allowed.len(), n_contexts);
    if (n + taken.len()) as f64 > space {
        return Err(CbusError::Generation(format!(
            "cannot draw {n} distinct policies: only {space} rows exist over {} actions and {n_contexts} contexts",
            allowed.len()
        )));
    }
    let mut seen: HashSet<Vec<usize>> = taken.iter().cloned().collect();
    if space <= 4.0 * (n + taken.len()) as f64 && space <= 1e6 {
        let total = space as usize;
        let mut all: Vec<Vec<usize>> = (0..total)
            .map(|mut code| {
                (0..n_contexts)
                    .map(|_| {
                        let a = allowed[code % allowed.len()];
                        code /= allowed.len();
                        a
                    })
                    .collect()
            })
            .filter(|row: &Vec<usize>| !seen.contains(row))
            .collect();
        all.shuffle(rng);
        all.truncate(n);
        return Ok(all);
    }
    let mut rows = Vec::with_capacity(n);
    while rows.len() < n {
        let row: Vec<usize> = (0..n_contexts).map(|_| allowed[rng.gen_range(0..allowed.len())]).collect();
        if seen.insert(row.clone()) {
            rows.push(row);
        }
    }
    Ok(rows)
}

fn embedding_loss(points: &[Vec<f64>]) -> SurrogateLoss {
    let k = points.first().map_or(0, |p| p.len());
    SurrogateLoss::from_fn(points.len(), k, |x, a, b| (points[x][a] - points[x][b]).abs().clamp(0.0, 1.0))
}

fn random_bar_a_law(k: usize, support: usize, rng: &mut SimRng) -> Vec<f64> {
    let support = support.clamp(1, k);
    let chosen = rand::seq::index::sample(rng, k, support);
    let mut row = vec![0.0; k];
    if support == 1 {
        row[chosen.index(0)] = 1.0;
        return row;
    }
    let weights: Vec<f64> = (0..support).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for (i, w) in chosen.iter().zip(weights) {
        row[i] = w / total;
    }
    row
}

fn uniform_table(rows: usize, cols: usize, rng: &mut SimRng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen::<f64>()).collect()).collect()
}

fn ensure_valid(instance: Instance) -> Result<Instance> {
    let violations = validate_instance(&instance);
    if let Some(v) = violations.first() {
        return Err(CbusError::Generation(format!("generated instance breaks an invariant: {v}")));
    }
    Ok(instance)
}

fn random_instance(spec: &GeneratorSpec, rng: &mut SimRng) -> Result<Instance> {
    check_sizes(spec)?;
    let (nx, k) = (spec.n_contexts, spec.k);
    let a0 = k - 1;
    let all_actions: Vec<usize> = (0..k).collect();
    let rows = distinct_rows(spec.n_policies, nx, &all_actions, &[], rng)?;
    let policies = PolicyClass::new(rows, k)?;
    let mu_b = uniform_table(nx, k, rng);
    let points = uniform_table(nx, k, rng);
    let bar_a_probs = (0..nx).map(|_| random_bar_a_law(k, spec.bar_a_support, rng)).collect();
    let mut reveal_prob = uniform_table(nx, k, rng);
    for row in &mut reveal_prob {
        row[a0] = 1.0;
    }
    Ok(Instance {
        contexts: ContextSpace::uniform(nx),
        policies,
        mu_b,
        loss: embedding_loss(&points),
        user: UserModel { bar_a_probs, reveal_prob, revealing_action: a0, triggered: None },
        epsilon: spec.epsilon,
    })
}

/// Uniform contexts, uniform means, random embedding, random revelation
/// probabilities and a preferred-action law supported on
/// `spec.bar_a_support` random actions.
pub fn make_random(spec: &GeneratorSpec, rng: &mut SimRng) -> Result<Instance> {
    expect_kind(spec, GeneratorKind::Random)?;
    ensure_valid(random_instance(spec, rng)?)
}

/// As [`make_random`], then every action that could sit further than `nu`
/// from a possible preferred action always triggers a revelation.
pub fn make_triggered(spec: &GeneratorSpec, rng: &mut SimRng) -> Result<Instance> {
    expect_kind(spec, GeneratorKind::Triggered)?;
    let mut inst = random_instance(spec, rng)?;
    let nu = spec.nu;
    for x in 0..inst.n_contexts() {
        for a in 0..inst.n_actions() {
            let too_far = inst.user.bar_a_probs[x]
                .iter()
                .enumerate()
                .any(|(bar, &p)| p > 0.0 && inst.loss.get(x, a, bar) > nu);
            if too_far {
                inst.user.reveal_prob[x][a] = 1.0;
            }
        }
    }
    inst.user.triggered = Some(nu);
    ensure_valid(inst)
}

/// Instance with a designated constraint minimizer `π̄` (policy 0) whose
/// action sits at point 0 while every other action sits in `[ε + τ, 1]`.
/// The user's preferred action is `π̄(x)`.
///
/// With `weak_massart`, policies are redrawn until each one is either at
/// least `3ε + τ` worse than `π̄` in expectation or within `(2ε + τ)/4` of
/// it at every context.
pub fn make_massart(spec: &GeneratorSpec, rng: &mut SimRng) -> Result<Instance> {
    expect_kind(spec, GeneratorKind::Massart)?;
    check_sizes(spec)?;
    let (nx, k, eps, tau) = (spec.n_contexts, spec.k, spec.epsilon, spec.tau);
    let margin = eps + tau;
    if k > 1 && margin > 1.0 {
        return Err(CbusError::Generation(format!("margin ε + τ = {margin} does not fit in [0, 1]")));
    }
    let a0 = k - 1;
    let bar_row: Vec<usize> = (0..nx).map(|_| rng.gen_range(0..k)).collect();
    let points: Vec<Vec<f64>> = (0..nx)
        .map(|x| {
            (0..k)
                .map(|a| if a == bar_row[x] { 0.0 } else { rng.gen_range(margin..=1.0) })
                .collect()
        })
        .collect();
    let loss = embedding_loss(&points);
    let probs = vec![1.0 / nx as f64; nx];

    let mut rows = vec![bar_row.clone()];
    let all_actions: Vec<usize> = (0..k).collect();
    if spec.weak_massart {
        let far = 3.0 * eps + tau;
        let close = (2.0 * eps + tau) / 4.0;
        let mut attempts = 0usize;
        let limit = 1000 * spec.n_policies.max(10);
        while rows.len() < spec.n_policies {
            attempts += 1;
            if attempts > limit {
                return Err(CbusError::Generation(
                    "could not draw enough policies satisfying the weak margin condition".into(),
                ));
            }
            let candidate = distinct_rows(1, nx, &all_actions, &rows, rng)?.remove(0);
            let gaps: Vec<f64> = (0..nx).map(|x| loss.get(x, candidate[x], bar_row[x])).collect();
            let mean_gap: f64 = gaps.iter().zip(&probs).map(|(g, p)| g * p).sum();
            let max_gap = gaps.iter().cloned().fold(0.0, f64::max);
            if mean_gap >= far || max_gap <= close {
                rows.push(candidate);
            }
        }
    } else {
        let more = distinct_rows(spec.n_policies - 1, nx, &all_actions, &rows, rng)?;
        rows.extend(more);
    }
    let policies = PolicyClass::new(rows, k)?;
    let mu_b = uniform_table(nx, k, rng);
    let mut reveal_prob = uniform_table(nx, k, rng);
    for row in &mut reveal_prob {
        row[a0] = 1.0;
    }
    let bar_a_probs = (0..nx)
        .map(|x| {
            let mut row = vec![0.0; k];
            row[bar_row[x]] = 1.0;
            row
        })
        .collect();
    let inst = Instance {
        contexts: ContextSpace::new(probs),
        policies,
        mu_b,
        loss,
        user: UserModel { bar_a_probs, reveal_prob, revealing_action: a0, triggered: None },
        epsilon: eps,
    };
    ensure_valid(inst)
}

/// Instance whose supervision tracks the reward: the preferred action is the
/// reward-best non-probing action and `E[Δ(a, bar_a; x)]` equals
/// `α (r_max(x) − r(a, x))` plus noise in `[0, dfrak]`. Policies never use
/// the probing action, which never pays. The result is certified against
/// the exact similarity coefficient.
pub fn make_aligned(spec: &GeneratorSpec, rng: &mut SimRng) -> Result<Instance> {
    expect_kind(spec, GeneratorKind::Aligned)?;
    check_sizes(spec)?;
    if spec.k < 2 {
        return Err(CbusError::Generation("aligned instances need a probing action plus one more".into()));
    }
    if !(spec.alpha >= 0.0) || !(0.0..=1.0).contains(&spec.dfrak) {
        return Err(CbusError::Generation("alpha must be ≥ 0 and dfrak in [0, 1]".into()));
    }
    let (nx, k, alpha, dfrak) = (spec.n_contexts, spec.k, spec.alpha, spec.dfrak);
    let a0 = k - 1;
    let playable: Vec<usize> = (0..a0).collect();
    let rows = distinct_rows(spec.n_policies, nx, &playable, &[], rng)?;
    let policies = PolicyClass::new(rows, k)?;

    let spread = if alpha > 0.0 { (1.0 - dfrak) / alpha } else { 1.0 }.min(1.0);
    let mut mu_b = vec![vec![0.0; k]; nx];
    let mut reveal_prob = vec![vec![0.0; k]; nx];
    let mut points = vec![vec![0.0; k]; nx];
    let mut bar_a_probs = vec![vec![0.0; k]; nx];
    for x in 0..nx {
        for a in 0..a0 {
            mu_b[x][a] = 1.0 - spread * rng.gen::<f64>();
        }
        reveal_prob[x][a0] = 1.0;
        let best = (0..a0).fold(0, |b, a| if mu_b[x][a] > mu_b[x][b] { a } else { b });
        let r_max = mu_b[x][best];
        for a in 0..k {
            let r = if a == a0 { 0.0 } else { mu_b[x][a] };
            let noise = if a == best { 0.0 } else { dfrak * rng.gen::<f64>() };
            points[x][a] = (alpha * (r_max - r) + noise).min(1.0);
        }
        bar_a_probs[x][best] = 1.0;
    }
    let inst = ensure_valid(Instance {
        contexts: ContextSpace::uniform(nx),
        policies,
        mu_b,
        loss: embedding_loss(&points),
        user: UserModel { bar_a_probs, reveal_prob, revealing_action: a0, triggered: None },
        epsilon: spec.epsilon,
    })?;
    let certified = similarity_d(&inst, alpha);
    if certified > dfrak + 1e-12 {
        return Err(CbusError::Generation(format!(
            "aligned instance certifies d = {certified}, above the target {dfrak}"
        )));
    }
    Ok(inst)
}

/// The constraint minimizer the massart generator designates.
pub fn massart_minimizer(instance: &Instance) -> usize {
    solve_cbus(instance).pi_bar
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{expected_constraint, expected_reward};

    #[test]
    fn lower_bound_tables() {
        for strategy in [Strategy::S1, Strategy::S2] {
            let inst = make_lower_bound(&LowerBoundParams { c: 0.25, gamma: 0.1, strategy, epsilon: 0.0 }).unwrap();
            assert!(validate_instance(&inst).is_empty());
            for a in 0..3 {
                for b in 0..3 {
                    assert_eq!(inst.loss.get(0, a, b), 0.0);
                }
            }
            let gap = expected_reward(&inst, 0) - expected_reward(&inst, 1);
            assert!((gap - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn lower_bound_rejects_bad_params() {
        assert!(make_lower_bound(&LowerBoundParams { c: 0.0, gamma: 0.1, strategy: Strategy::S1, epsilon: 0.0 }).is_err());
        assert!(make_lower_bound(&LowerBoundParams { c: 0.5, gamma: 0.5, strategy: Strategy::S1, epsilon: 0.0 }).is_err());
    }

    #[test]
    fn too_many_policies_is_an_error() {
        let spec = GeneratorSpec::new(GeneratorKind::Random, 2, 2, 5);
        assert!(spec.generate().is_err());
        let spec = GeneratorSpec::new(GeneratorKind::Random, 2, 2, 4);
        assert_eq!(spec.generate().unwrap().n_policies(), 4);
    }

    #[test]
    fn triggered_unit_level_forces_nothing() {
        let mut spec = GeneratorSpec::new(GeneratorKind::Triggered, 6, 5, 20);
        spec.nu = 1.0;
        spec.bar_a_support = 3;
        let mut rng = rng_from_seed(9);
        let inst = make_triggered(&spec, &mut rng).unwrap();
        let mut rng = rng_from_seed(9);
        let plain = random_instance(&spec, &mut rng).unwrap();
        assert_eq!(inst.user.reveal_prob, plain.user.reveal_prob);
    }

    #[test]
    fn triggered_zero_level_forces_every_mismatch() {
        let mut spec = GeneratorSpec::new(GeneratorKind::Triggered, 6, 5, 20);
        spec.nu = 0.0;
        let inst = spec.generate().unwrap();
        for x in 0..6 {
            let bar = inst.user.bar_a_probs[x].iter().position(|&p| p == 1.0).unwrap();
            for a in 0..5 {
                if inst.loss.get(x, a, bar) > 0.0 {
                    assert_eq!(inst.user.reveal_prob[x][a], 1.0);
                }
            }
        }
    }

    #[test]
    fn massart_margin_and_minimizer() {
        let mut spec = GeneratorSpec::new(GeneratorKind::Massart, 10, 6, 40);
        spec.tau = 0.5;
        spec.epsilon = 0.05;
        let inst = spec.generate().unwrap();
        let bar = massart_minimizer(&inst);
        assert_eq!(bar, 0);
        assert_eq!(expected_constraint(&inst, 0), 0.0);
        for x in 0..10 {
            let b = inst.policies.action(bar, x);
            assert_eq!(inst.loss.get(x, b, b), 0.0);
            for a in (0..6).filter(|&a| a != b) {
                assert!(inst.loss.get(x, a, b) - 0.05 >= 0.5 - 1e-12);
            }
        }
    }

    #[test]
    fn massart_margin_too_wide() {
        let mut spec = GeneratorSpec::new(GeneratorKind::Massart, 4, 3, 5);
        spec.tau = 0.98;
        spec.epsilon = 0.05;
        assert!(spec.generate().is_err());
    }

    #[test]
    fn weak_massart_condition_holds() {
        let mut spec = GeneratorSpec::new(GeneratorKind::Massart, 16, 8, 64);
        spec.tau = 0.5;
        spec.weak_massart = true;
        let inst = spec.generate().unwrap();
        let truth = solve_cbus(&inst);
        for p in 0..inst.n_policies() {
            let far = truth.exp_constraint[p] >= truth.exp_constraint[0] + 0.65 - 1e-12;
            let close = (0..16).all(|x| inst.loss.get(x, inst.policies.action(p, x), inst.policies.action(0, x)) <= 0.15);
            assert!(far || close, "policy {p}");
        }
    }

    #[test]
    fn aligned_is_certified() {
        let mut spec = GeneratorSpec::new(GeneratorKind::Aligned, 8, 5, 40);
        spec.dfrak = 0.05;
        let inst = spec.generate().unwrap();
        assert!(similarity_d(&inst, 1.0) <= 0.05 + 1e-12);
    }

    #[test]
    fn aligned_large_alpha() {
        let mut spec = GeneratorSpec::new(GeneratorKind::Aligned, 8, 5, 40);
        spec.alpha = 3.0;
        spec.dfrak = 0.1;
        let inst = spec.generate().unwrap();
        assert!(similarity_d(&inst, 3.0) <= 0.1 + 1e-12);
    }

    #[test]
    fn spec_json_field_names() {
        let text = r#"{"kind":"triggered","n_contexts":4,"K":3,"n_policies":6,"nu":0.1,"seed":7}"#;
        let spec: GeneratorSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.k, 3);
        assert_eq!(spec.kind, GeneratorKind::Triggered);
        assert!(serde_json::to_string(&spec).unwrap().contains("\"K\":3"));
    }
}
