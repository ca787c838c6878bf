//! Constraint estimators and the nested policy sets they drive.

use proptest::prelude::*;

use cbus::corral::{run_corral_outcome, CorralConfig};
use cbus::envs::{GeneratorKind, GeneratorSpec};
use cbus::estimators::{
    active_shrink, biased_delta, generic_shrink, shrink_biased, shrink_dr, BudgetCap, ConstraintTracker,
    EstimatorConfig, EstimatorContract, EstimatorKind, NestedPolicySets,
};
use cbus::exp4::exp4_action_dist;
use cbus::oracle::solve_cbus;
use cbus::protocol::{env_step, Instance};
use cbus::sampling::{rng_from_seed, sample_categorical};

fn triggered(seed: u64, nu: f64, support: usize) -> Instance {
    let mut spec = GeneratorSpec::new(GeneratorKind::Triggered, 5, 4, 10).with_seed(seed);
    spec.nu = nu;
    spec.bar_a_support = support;
    spec.generate().unwrap()
}

fn kind_strategy() -> impl Strategy<Value = EstimatorKind> {
    prop_oneof![Just(EstimatorKind::Biased), Just(EstimatorKind::DoublyRobust), Just(EstimatorKind::Active)]
}

/// Lowest score among `alive`.
fn best_alive(sets: &NestedPolicySets, alive: &[bool]) -> f64 {
    (0..alive.len()).filter(|&p| alive[p]).map(|p| sets.scores[p]).fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn biased_rows_are_within_the_trigger_level(seed in any::<u64>(), nu in 0.0f64..0.6, support in 1usize..4) {
        let inst = triggered(seed, nu, support);
        for x in 0..inst.n_contexts() {
            for a_t in 0..inst.n_actions() {
                if inst.user.reveal_prob[x][a_t] >= 1.0 {
                    continue;
                }
                let row = biased_delta(false, a_t, None, x, &inst.loss).unwrap();
                for bar in (0..inst.n_actions()).filter(|&b| inst.user.bar_a_probs[x][b] > 0.0) {
                    for (a, v) in row.iter().enumerate() {
                        prop_assert!((v - inst.loss.get(x, a, bar)).abs() <= nu + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn every_shrink_rule_is_nested_and_keeps_the_leader(
        seed in any::<u64>(),
        rule in 0usize..4,
        kappa in 0.001f64..1.0,
        eps in 0.0f64..0.1,
        rounds in 1usize..200,
        raw in proptest::collection::vec(0.0f64..1.5, 4 * 200),
        queried in proptest::collection::vec(any::<bool>(), 200),
    ) {
        let inst = triggered(seed, 0.2, 2);
        let mut sets = NestedPolicySets::new(inst.n_policies());
        let mut rng = rng_from_seed(seed);
        for t in 1..=rounds {
            let x = inst.contexts.sample(&mut rng);
            // only the doubly-robust rows may leave [0, 1]
            let row: Vec<f64> = raw[4 * (t - 1)..4 * t].iter().map(|&v| if rule == 1 { v } else { v.min(1.0) }).collect();
            let before = sets.surviving.clone();
            match rule {
                0 => shrink_biased(&mut sets, &inst.policies, x, &row, t, 0.0, eps, 0.05, kappa, rounds),
                1 => shrink_dr(&mut sets, &inst.policies, x, &row, t, eps, 0.05, kappa),
                2 => active_shrink(&mut sets, &inst.policies, x, queried[t - 1].then_some(&row[..]), t, eps, 0.05, kappa),
                _ => {
                    let contract = EstimatorContract { v: kappa, b: kappa / 4.0, beta: 0.0 };
                    generic_shrink(&mut sets, &inst.policies, x, &row, t, contract, eps, 0.05, rounds)
                }
            }
            let leader = best_alive(&sets, &before);
            for p in 0..before.len() {
                prop_assert!(before[p] || !sets.surviving[p]);
                if before[p] && sets.scores[p] == leader {
                    prop_assert!(sets.surviving[p]);
                }
            }
            prop_assert!(sets.n_surviving() >= 1);
        }
    }

    #[test]
    fn runs_never_grow_the_surviving_set(seed in any::<u64>(), kind in kind_strategy(), scale in 0.01f64..1.0) {
        let inst = triggered(seed % 32, 0.1, 1);
        let mut est = EstimatorConfig::new(kind, 0.1);
        est.radius_scale = scale;
        let out = run_corral_outcome(&inst, &CorralConfig::new(est), 600, &mut rng_from_seed(seed)).unwrap();
        let sizes: Vec<usize> = out.trajectory.records.iter().map(|r| r.n_surviving).collect();
        prop_assert!(sizes.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(*sizes.last().unwrap() >= 1);
    }
}

#[test]
fn doubly_robust_second_moment_is_bounded() {
    let nu = 0.3;
    let inst = triggered(4, nu, 2);
    let horizon = 16;
    let tracker_cfg = EstimatorConfig::new(EstimatorKind::DoublyRobust, nu);
    let mut tracker = ConstraintTracker::new(tracker_cfg, &inst, horizon).unwrap();
    let gamma = tracker.gamma();
    assert!(gamma > 0.0 && gamma < 1.0);
    let bound = (2.0 + 2.0 * nu * nu / gamma) * 1.2;
    let mut rng = rng_from_seed(21);
    let k = inst.n_actions();
    let law = vec![1.0 / k as f64; k];
    let n = 100_000;
    for x in 0..inst.n_contexts() {
        let mut second = vec![0.0; k];
        for _ in 0..n {
            let row = if tracker.wants_probe(&inst, x, &mut rng) {
                let fb = env_step(&inst, x, inst.revealing_action(), true, &mut rng).unwrap();
                tracker.observe_probe(&inst, &fb, &law, &mut rng).unwrap()
            } else {
                let a = sample_categorical(&law, &mut rng);
                let fb = env_step(&inst, x, a, false, &mut rng).unwrap();
                tracker.observe_play(&inst, &fb).unwrap()
            };
            for (s, v) in second.iter_mut().zip(&row) {
                *s += v * v;
            }
        }
        for (a, s) in second.iter().enumerate() {
            let m = s / n as f64;
            assert!(m <= bound, "context {x}, action {a}: {m} > {bound}");
        }
    }
}

#[test]
fn probe_budget_is_respected() {
    let inst = triggered(8, 0.9, 2);
    let mut est = EstimatorConfig::new(EstimatorKind::DoublyRobust, 0.9);
    est.budget_cap = Some(BudgetCap::Count(7));
    let out = run_corral_outcome(&inst, &CorralConfig::new(est), 400, &mut rng_from_seed(2)).unwrap();
    let z = out.trajectory.total_z();
    assert!(z > 0 && z <= 7 + 1, "{z} probes");
}

#[test]
fn survivors_respect_the_final_radius() {
    let inst = triggered(12, 0.05, 2);
    let truth = solve_cbus(&inst);
    let horizon = 1 << 12;
    for seed in 0..20 {
        let est = EstimatorConfig::new(EstimatorKind::Biased, 0.05);
        let out = run_corral_outcome(&inst, &CorralConfig::new(est), horizon, &mut rng_from_seed(seed)).unwrap();
        let retained = truth.feasible_policies().iter().all(|&p| out.surviving[p]);
        if !retained {
            continue;
        }
        let radius = cbus::estimators::biased_radius(horizon, 0.05, 0.05, horizon, inst.n_policies());
        for p in (0..inst.n_policies()).filter(|&p| out.surviving[p]) {
            let excess = truth.exp_constraint[p] - truth.constraint_min;
            assert!(excess <= inst.epsilon + 2.0 * radius, "policy {p}: excess {excess}");
        }
    }
}

#[test]
fn probe_rows_feed_counterfactual_estimates() {
    // on a probing round the doubly-robust row differs from the revealed one
    // only through the estimate the learner would have formed
    let inst = triggered(3, 0.4, 2);
    let est = EstimatorConfig::new(EstimatorKind::DoublyRobust, 0.4);
    let mut tracker = ConstraintTracker::new(est, &inst, 16).unwrap();
    let gamma = tracker.gamma();
    let mut rng = rng_from_seed(5);
    let q = vec![1.0 / inst.n_policies() as f64; inst.n_policies()];
    let law = exp4_action_dist(&q, &inst.policies, 1);
    let fb = env_step(&inst, 1, inst.revealing_action(), true, &mut rng).unwrap();
    let row = tracker.observe_probe(&inst, &fb, &law, &mut rng).unwrap();
    let truth = fb.delta_row.unwrap();
    // hat + (truth - hat)/γ with a hat row in [0, 1]
    for (r, v) in row.iter().zip(&truth) {
        let hat = (r * gamma - v) / (gamma - 1.0);
        assert!((-1e-9..=1.0 + 1e-9).contains(&hat), "implied hat {hat}");
    }
}
