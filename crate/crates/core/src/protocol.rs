//! Protocol types and the environment step.
//!
//! Each round the environment draws a context, the learner picks an action,
//! and the user either lets a Bernoulli reward through or reveals their
//! preferred action `bar_a` together with the full surrogate-loss row
//! `Δ(·, bar_a; x)`. A revelation always zeroes the observed reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CbusError, Result};
use crate::sampling::{bernoulli, sample_categorical};

const SUM_TOL: f64 = 1e-12;
const ROW_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-12;

/// Finite categorical distribution over contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSpace {
    pub probs: Vec<f64>,
}

impl ContextSpace {
    pub fn new(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn n_contexts(&self) -> usize {
        self.probs.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.probs, rng)
    }
}

/// Finite table of deterministic context-to-action maps.
///
/// Stored context-major so that the actions of every policy at one context
/// form a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyClass {
    by_context: Vec<usize>,
    n_policies: usize,
    n_contexts: usize,
    n_actions: usize,
}

impl PolicyClass {
    /// Builds the class from one row per policy. Rejects ragged rows,
    /// out-of-range actions and duplicate policies.
    pub fn new(rows: Vec<Vec<usize>>, n_actions: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(CbusError::arg("policy class must contain at least one policy"));
        }
        if n_actions == 0 {
            return Err(CbusError::arg("policy class needs at least one action"));
        }
        let n_contexts = rows[0].len();
        if n_contexts == 0 {
            return Err(CbusError::arg("policies must cover at least one context"));
        }
        let mut seen = std::collections::HashSet::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_contexts {
                return Err(CbusError::arg(format!(
                    "policy {i} has {} entries, expected {n_contexts}",
                    row.len()
                )));
            }
            if let Some(&a) = row.iter().find(|&&a| a >= n_actions) {
                return Err(CbusError::arg(format!("policy {i} uses action {a} outside [0, {n_actions})")));
            }
            if !seen.insert(row.as_slice()) {
                return Err(CbusError::arg(format!("policy {i} duplicates an earlier policy")));
            }
        }
        let n_policies = rows.len();
        let mut by_context = vec![0; n_policies * n_contexts];
        for (p, row) in rows.iter().enumerate() {
            for (x, &a) in row.iter().enumerate() {
                by_context[x * n_policies + p] = a;
            }
        }
        Ok(Self { by_context, n_policies, n_contexts, n_actions })
    }

    pub fn n_policies(&self) -> usize {
        self.n_policies
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Action chosen by `policy` at `context`.
    #[inline]
    pub fn action(&self, policy: usize, context: usize) -> usize {
        self.by_context[context * self.n_policies + policy]
    }

    /// Actions of all policies at `context`, indexed by policy.
    #[inline]
    pub fn actions_at(&self, context: usize) -> &[usize] {
        let start = context * self.n_policies;
        &self.by_context[start..start + self.n_policies]
    }

    pub fn row(&self, policy: usize) -> Vec<usize> {
        (0..self.n_contexts).map(|x| self.action(policy, x)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.n_policies).map(|p| self.row(p)).collect()
    }
}

/// Dissimilarity `Δ(a, a'; x)` between actions, per context.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateLoss {
    values: Vec<f64>,
    n_contexts: usize,
    n_actions: usize,
}

impl SurrogateLoss {
    pub fn from_fn(n_contexts: usize, n_actions: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n_contexts * n_actions * n_actions);
        for x in 0..n_contexts {
            for a in 0..n_actions {
                for b in 0..n_actions {
                    values.push(f(x, a, b));
                }
            }
        }
        Self { values, n_contexts, n_actions }
    }

    /// Builds from a `[context][action][action]` nested table.
    pub fn from_nested(table: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n_contexts = table.len();
        let n_actions = table.first().map_or(0, |m| m.len());
        for (x, m) in table.iter().enumerate() {
            if m.len() != n_actions || m.iter().any(|r| r.len() != n_actions) {
                return Err(CbusError::arg(format!("delta table for context {x} is not {n_actions}x{n_actions}")));
            }
        }
        Ok(Self::from_fn(n_contexts, n_actions, |x, a, b| table[x][a][b]))
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.n_contexts)
            .map(|x| (0..self.n_actions).map(|a| self.from_action(x, a).to_vec()).collect())
            .collect()
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn get(&self, context: usize, a: usize, b: usize) -> f64 {
        self.values[(context * self.n_actions + a) * self.n_actions + b]
    }

    /// `Δ(a, ·; x)` as a slice.
    #[inline]
    pub fn from_action(&self, context: usize, a: usize) -> &[f64] {
        let start = (context * self.n_actions + a) * self.n_actions;
        &self.values[start..start + self.n_actions]
    }

    /// `Δ(·, b; x)`: the row a user reveals when their preferred action is `b`.
    pub fn row_against(&self, context: usize, b: usize) -> Vec<f64> {
        (0..self.n_actions).map(|a| self.get(context, a, b)).collect()
    }
}

/// How the simulated user reacts to the learner's action.
#[derive(Debug, Clone, PartialEq)]
pub struct UserModel {
    /// Law of the preferred action, one categorical row per context.
    pub bar_a_probs: Vec<Vec<f64>>,
    /// Probability of a revelation for each (context, action).
    pub reveal_prob: Vec<Vec<f64>>,
    pub revealing_action: usize,
    /// When set, unrevealed rounds keep `Δ(a, bar_a; x)` at or below this level.
    pub triggered: Option<f64>,
}

/// A complete finite environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceDoc", into = "InstanceDoc")]
pub struct Instance {
    pub contexts: ContextSpace,
    pub policies: PolicyClass,
    /// Bernoulli mean of the reward before revelations are folded in.
    pub mu_b: Vec<Vec<f64>>,
    pub loss: SurrogateLoss,
    pub user: UserModel,
    pub epsilon: f64,
}

impl Instance {
    pub fn n_contexts(&self) -> usize {
        self.contexts.n_contexts()
    }

    pub fn n_actions(&self) -> usize {
        self.policies.n_actions()
    }

    pub fn n_policies(&self) -> usize {
        self.policies.n_policies()
    }

    pub fn revealing_action(&self) -> usize {
        self.user.revealing_action
    }

    /// Mean observed reward of `action` at `context`, counting the zero
    /// reward of revelation rounds.
    pub fn effective_reward(&self, context: usize, action: usize) -> f64 {
        (1.0 - self.user.reveal_prob[context][action]) * self.mu_b[context][action]
    }

    /// `E[Δ(action, bar_a; x)]` over the user's preferred-action law.
    pub fn expected_delta(&self, context: usize, action: usize) -> f64 {
        let row = self.loss.from_action(context, action);
        self.user.bar_a_probs[context].iter().zip(row).map(|(p, d)| p * d).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UserDoc {
    bar_a_probs: Vec<Vec<f64>>,
    reveal_prob: Vec<Vec<f64>>,
    revealing_action: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    triggered_nu: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceDoc {
    contexts: Vec<f64>,
    policies: Vec<Vec<usize>>,
    mu_b: Vec<Vec<f64>>,
    delta: Vec<Vec<Vec<f64>>>,
    user: UserDoc,
    epsilon: f64,
}

impl TryFrom<InstanceDoc> for Instance {
    type Error = CbusError;

    fn try_from(doc: InstanceDoc) -> Result<Self> {
        let n_actions = doc
            .mu_b
            .first()
            .map(|r| r.len())
            .or_else(|| doc.delta.first().map(|m| m.len()))
            .unwrap_or(0);
        let policies = PolicyClass::new(doc.policies, n_actions)?;
        let loss = SurrogateLoss::from_nested(&doc.delta)?;
        Ok(Instance {
            contexts: ContextSpace::new(doc.contexts),
            policies,
            mu_b: doc.mu_b,
            loss,
            user: UserModel {
                bar_a_probs: doc.user.bar_a_probs,
                reveal_prob: doc.user.reveal_prob,
                revealing_action: doc.user.revealing_action,
                triggered: doc.user.triggered_nu,
            },
            epsilon: doc.epsilon,
        })
    }
}

impl From<Instance> for InstanceDoc {
    fn from(inst: Instance) -> Self {
        InstanceDoc {
            contexts: inst.contexts.probs.clone(),
            policies: inst.policies.rows(),
            mu_b: inst.mu_b.clone(),
            delta: inst.loss.to_nested(),
            user: UserDoc {
                bar_a_probs: inst.user.bar_a_probs,
                reveal_prob: inst.user.reveal_prob,
                revealing_action: inst.user.revealing_action,
                triggered_nu: inst.user.triggered,
            },
            epsilon: inst.epsilon,
        }
    }
}

/// What the learner sees after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    pub context: usize,
    pub action: usize,
    pub reward: f64,
    /// The user revealed their preferred action this round.
    pub xi: bool,
    /// The round was deliberately spent on the revealing action.
    pub z: bool,
    pub bar_a: Option<usize>,
    /// `Δ(·, bar_a; x)` when revealed.
    pub delta_row: Option<Vec<f64>>,
}

fn check_indices(instance: &Instance, context: usize, action: usize) -> Result<()> {
    if context >= instance.n_contexts() {
        return Err(CbusError::arg(format!("context {context} out of range")));
    }
    if action >= instance.n_actions() {
        return Err(CbusError::arg(format!("action {action} out of range")));
    }
    Ok(())
}

/// Plays `action` at `context` and samples the user's response.
///
/// Consumes one uniform for the revelation event, then one more for either
/// the preferred action or the Bernoulli reward.
pub fn env_step<R: Rng + ?Sized>(
    instance: &Instance,
    context: usize,
    action: usize,
    z: bool,
    rng: &mut R,
) -> Result<Feedback> {
    check_indices(instance, context, action)?;
    if z && action != instance.revealing_action() {
        return Err(CbusError::arg("a deliberate probing round must play the revealing action"));
    }
    let revealed = bernoulli(instance.user.reveal_prob[context][action], rng);
    if revealed {
        let bar_a = sample_categorical(&instance.user.bar_a_probs[context], rng);
        Ok(Feedback {
            context,
            action,
            reward: 0.0,
            xi: true,
            z,
            bar_a: Some(bar_a),
            delta_row: Some(instance.loss.row_against(context, bar_a)),
        })
    } else {
        let reward = if bernoulli(instance.mu_b[context][action], rng) { 1.0 } else { 0.0 };
        Ok(Feedback { context, action, reward, xi: false, z, bar_a: None, delta_row: None })
    }
}

/// Samples whether the user would have revealed had `action` been shown.
///
/// Only a simulator can answer this; the doubly-robust learner uses it on
/// probing rounds to build the estimate it would have formed otherwise.
pub fn counterfactual_reveal<R: Rng + ?Sized>(
    instance: &Instance,
    context: usize,
    action: usize,
    rng: &mut R,
) -> Result<bool> {
    check_indices(instance, context, action)?;
    Ok(bernoulli(instance.user.reveal_prob[context][action], rng))
}

/// A broken invariant found by [`validate_instance`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub invariant: String,
    pub indices: Vec<usize>,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} at {:?}: {}", self.invariant, self.indices, self.detail)
    }
}

fn violation(invariant: &str, indices: Vec<usize>, detail: String) -> Violation {
    Violation { invariant: invariant.to_string(), indices, detail }
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

/// Lists every violated invariant. An empty list means the instance is valid.
pub fn validate_instance(instance: &Instance) -> Vec<Violation> {
    let mut out = Vec::new();
    let nx = instance.n_contexts();
    let k = instance.n_actions();

    if nx == 0 {
        out.push(violation("contexts.non_empty", vec![], "no contexts".into()));
        return out;
    }
    for (x, &p) in instance.contexts.probs.iter().enumerate() {
        if !(p >= 0.0) {
            out.push(violation("contexts.non_negative", vec![x], format!("probability {p}")));
        }
    }
    let total: f64 = instance.contexts.probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        out.push(violation("contexts.sum_to_one", vec![], format!("sum {total}")));
    }

    let mut shape_ok = true;
    if instance.policies.n_contexts() != nx {
        out.push(violation(
            "dimensions.policies",
            vec![],
            format!("policies cover {} contexts, expected {nx}", instance.policies.n_contexts()),
        ));
        shape_ok = false;
    }
    if instance.loss.n_contexts() != nx || instance.loss.n_actions() != k {
        out.push(violation(
            "dimensions.delta",
            vec![],
            format!(
                "delta is {}x{}x{}, expected {nx}x{k}x{k}",
                instance.loss.n_contexts(),
                instance.loss.n_actions(),
                instance.loss.n_actions()
            ),
        ));
        shape_ok = false;
    }
    for (name, table) in [
        ("dimensions.mu_b", &instance.mu_b),
        ("dimensions.bar_a_probs", &instance.user.bar_a_probs),
        ("dimensions.reveal_prob", &instance.user.reveal_prob),
    ] {
        if table.len() != nx || table.iter().any(|r| r.len() != k) {
            out.push(violation(name, vec![], format!("expected {nx} rows of length {k}")));
            shape_ok = false;
        }
    }
    if instance.user.revealing_action >= k {
        out.push(violation(
            "user.revealing_action",
            vec![instance.user.revealing_action],
            "revealing action out of range".into(),
        ));
        shape_ok = false;
    }
    if !(instance.epsilon >= 0.0) || !instance.epsilon.is_finite() {
        out.push(violation("epsilon.non_negative", vec![], format!("epsilon {}", instance.epsilon)));
    }
    if !shape_ok {
        return out;
    }

    for x in 0..nx {
        for a in 0..k {
            let m = instance.mu_b[x][a];
            if !in_unit(m) {
                out.push(violation("mu_b.range", vec![x, a], format!("mean {m}")));
            }
            let r = instance.user.reveal_prob[x][a];
            if !in_unit(r) {
                out.push(violation("reveal_prob.range", vec![x, a], format!("probability {r}")));
            }
        }
    }

    let loss = &instance.loss;
    for x in 0..nx {
        for a in 0..k {
            for b in 0..k {
                let d = loss.get(x, a, b);
                if !in_unit(d) {
                    out.push(violation("delta.range", vec![x, a, b], format!("value {d}")));
                }
                if b > a && (d - loss.get(x, b, a)).abs() > METRIC_TOL {
                    out.push(violation(
                        "delta.symmetry",
                        vec![x, a, b],
                        format!("Δ({a},{b})={d} but Δ({b},{a})={}", loss.get(x, b, a)),
                    ));
                }
            }
        }
        for a in 0..k {
            for mid in 0..k {
                for b in 0..k {
                    let direct = loss.get(x, a, b);
                    let via = loss.get(x, a, mid) + loss.get(x, mid, b);
                    if direct > via + METRIC_TOL {
                        out.push(violation(
                            "delta.triangle",
                            vec![x, a, mid, b],
                            format!("Δ({a},{b})={direct} > Δ({a},{mid})+Δ({mid},{b})={via}"),
                        ));
                    }
                }
            }
        }
    }

    let a0 = instance.user.revealing_action;
    for x in 0..nx {
        let row = &instance.user.bar_a_probs[x];
        if let Some(a) = row.iter().position(|&p| !(p >= 0.0)) {
            out.push(violation("user.bar_a_non_negative", vec![x, a], format!("probability {}", row[a])));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_TOL {
            out.push(violation("user.bar_a_sum_to_one", vec![x], format!("sum {s}")));
        }
        if instance.user.reveal_prob[x][a0] != 1.0 {
            out.push(violation(
                "user.revealing_action_reveals",
                vec![x, a0],
                format!("reveal probability {}", instance.user.reveal_prob[x][a0]),
            ));
        }
    }

    if let Some(nu) = instance.user.triggered {
        for x in 0..nx {
            for a in 0..k {
                if instance.user.reveal_prob[x][a] >= 1.0 {
                    continue;
                }
                for (bar, &p) in instance.user.bar_a_probs[x].iter().enumerate() {
                    if p > 0.0 && loss.get(x, a, bar) > nu + METRIC_TOL {
                        out.push(violation(
                            "user.triggered",
                            vec![x, a, bar],
                            format!("Δ={} exceeds ν={nu} on a non-revealing action", loss.get(x, a, bar)),
                        ));
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::rng_from_seed;

    fn tiny() -> Instance {
        Instance {
            contexts: ContextSpace::uniform(2),
            policies: PolicyClass::new(vec![vec![0, 1], vec![1, 0], vec![2, 2]], 3).unwrap(),
            mu_b: vec![vec![0.5, 1.0, 0.2], vec![0.3, 0.0, 0.9]],
            loss: SurrogateLoss::from_fn(2, 3, |_, a, b| if a == b { 0.0 } else { 0.5 }),
            user: UserModel {
                bar_a_probs: vec![vec![0.5, 0.5, 0.0], vec![1.0, 0.0, 0.0]],
                reveal_prob: vec![vec![0.0, 0.0, 1.0], vec![0.25, 0.0, 1.0]],
                revealing_action: 2,
                triggered: None,
            },
            epsilon: 0.1,
        }
    }

    #[test]
    fn tiny_instance_is_valid() {
        assert!(validate_instance(&tiny()).is_empty());
    }

    #[test]
    fn duplicate_policies_rejected() {
        assert!(PolicyClass::new(vec![vec![0, 1], vec![0, 1]], 2).is_err());
        assert!(PolicyClass::new(vec![vec![0, 2]], 2).is_err());
        assert!(PolicyClass::new(vec![vec![0, 1], vec![0]], 2).is_err());
    }

    #[test]
    fn revealing_action_always_reveals() {
        let inst = tiny();
        let mut rng = rng_from_seed(1);
        for x in 0..2 {
            let fb = env_step(&inst, x, 2, true, &mut rng).unwrap();
            assert!(fb.xi && fb.z);
            assert_eq!(fb.reward, 0.0);
            let bar = fb.bar_a.unwrap();
            assert_eq!(fb.delta_row.unwrap(), inst.loss.row_against(x, bar));
        }
    }

    #[test]
    fn degenerate_reward() {
        let inst = tiny();
        let mut rng = rng_from_seed(2);
        for _ in 0..100 {
            let fb = env_step(&inst, 0, 1, false, &mut rng).unwrap();
            assert!(!fb.xi);
            assert_eq!(fb.reward, 1.0);
        }
    }

    #[test]
    fn bad_indices_and_probe_rules() {
        let inst = tiny();
        let mut rng = rng_from_seed(0);
        assert!(env_step(&inst, 2, 0, false, &mut rng).is_err());
        assert!(env_step(&inst, 0, 3, false, &mut rng).is_err());
        assert!(env_step(&inst, 0, 0, true, &mut rng).is_err());
    }

    #[test]
    fn symmetry_violation_reported() {
        let mut inst = tiny();
        inst.loss = SurrogateLoss::from_fn(2, 3, |x, a, b| match (x, a, b) {
            (0, 0, 1) => 0.3,
            (0, 1, 0) => 0.4,
            (_, a, b) if a == b => 0.0,
            _ => 0.35,
        });
        let v = validate_instance(&inst);
        assert!(v.iter().any(|v| v.invariant == "delta.symmetry" && v.indices == vec![0, 0, 1]));
    }

    #[test]
    fn triangle_violation_reported() {
        let mut inst = tiny();
        inst.loss = SurrogateLoss::from_fn(2, 3, |x, a, b| {
            let pair = (a.min(b), a.max(b));
            match (x, pair) {
                (_, (i, j)) if i == j => 0.0,
                (0, (0, 2)) => 1.0,
                (0, (0, 1)) => 0.2,
                (0, (1, 2)) => 0.2,
                _ => 0.5,
            }
        });
        let v = validate_instance(&inst);
        assert!(v.iter().any(|v| v.invariant == "delta.triangle" && v.indices == vec![0, 0, 1, 2]));
    }

    #[test]
    fn missing_revealing_guarantee_reported() {
        let mut inst = tiny();
        inst.user.reveal_prob[1][2] = 0.5;
        let v = validate_instance(&inst);
        assert!(v.iter().any(|v| v.invariant == "user.revealing_action_reveals" && v.indices == vec![1, 2]));
    }

    #[test]
    fn json_round_trip() {
        let inst = tiny();
        let text = inst.to_json().unwrap();
        let back = Instance::from_json(&text).unwrap();
        assert_eq!(inst, back);
        assert_eq!(text, back.to_json().unwrap());
    }

    #[test]
    fn json_rejects_duplicate_policy_rows() {
        let inst = tiny();
        let mut value: serde_json::Value = serde_json::from_str(&inst.to_json().unwrap()).unwrap();
        value["policies"] = serde_json::json!([[0, 1], [0, 1]]);
        assert!(Instance::from_json(&value.to_string()).is_err());
    }
}
