//! Constrained Exp4 base learner and the master that corrals several of them.

use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use cbus::corral::{corral_round, run_corral, run_corral_outcome, CorralConfig, CorralState};
use cbus::envs::{GeneratorKind, GeneratorSpec};
use cbus::estimators::{EstimatorConfig, EstimatorKind};
use cbus::exp4::{exp4_action_dist, exp4_distribution, exp4_loss_vector, exp4_update, run_single_base, Exp4State};
use cbus::harness::fit::fit_scaling_exponent;
use cbus::protocol::{env_step, Instance};
use cbus::sampling::{rng_from_seed, sample_categorical};

fn random_instance(seed: u64, nx: usize, k: usize, n_pol: usize) -> Instance {
    GeneratorSpec::new(GeneratorKind::Random, nx, k, n_pol).with_seed(seed).generate().unwrap()
}

fn normalized(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distribution_lives_on_survivors(
        losses in proptest::collection::vec(-50.0f64..500.0, 8),
        alive in proptest::collection::vec(any::<bool>(), 8),
        t in 0usize..10_000,
        eta0 in 0.01f64..5.0,
    ) {
        let mut mask = alive.clone();
        mask[t % 8] = true;
        let mut state = Exp4State::new(1.0, 8, eta0);
        state.cum_loss = losses;
        state.t_internal = t;
        let q = exp4_distribution(&state, &mask);
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for p in 0..8 {
            prop_assert!(q[p] >= 0.0);
            if !mask[p] {
                prop_assert_eq!(q[p], 0.0);
            }
        }
        // restricting further renormalizes proportionally
        let full = exp4_distribution(&state, &[true; 8]);
        let mass: f64 = (0..8).filter(|&p| mask[p]).map(|p| full[p]).sum();
        if mass > 1e-200 {
            for p in (0..8).filter(|&p| mask[p]) {
                prop_assert!((q[p] - full[p] / mass).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn action_law_sums_to_one(seed in any::<u64>(), raw in proptest::collection::vec(0.01f64..1.0, 12)) {
        let inst = random_instance(seed % 64, 4, 4, 12);
        let q = normalized(&raw);
        for x in 0..inst.n_contexts() {
            let p = exp4_action_dist(&q, &inst.policies, x);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn updates_commute(
        a in proptest::collection::vec(0.0f64..10.0, 6),
        b in proptest::collection::vec(0.0f64..10.0, 6),
    ) {
        let mut s1 = Exp4State::new(0.5, 6, 1.0);
        let mut s2 = s1.clone();
        exp4_update(&mut s1, &a, true);
        exp4_update(&mut s1, &b, true);
        exp4_update(&mut s2, &b, true);
        exp4_update(&mut s2, &a, true);
        for (x, y) in s1.cum_loss.iter().zip(&s2.cum_loss) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn sampled_actions_follow_the_induced_law() {
    let inst = random_instance(6, 4, 5, 16);
    let q = normalized(&(1..=16).map(|i| i as f64).collect::<Vec<_>>());
    let x = 2;
    let p = exp4_action_dist(&q, &inst.policies, x);
    let n = 100_000;
    let mut counts = vec![0usize; p.len()];
    let mut rng = rng_from_seed(3);
    for _ in 0..n {
        counts[inst.policies.action(sample_categorical(&q, &mut rng), x)] += 1;
    }
    let cells: Vec<(f64, usize)> = p.iter().copied().zip(counts).filter(|(w, _)| *w > 0.0).collect();
    let stat: f64 = cells.iter().map(|&(w, c)| (c as f64 - n as f64 * w).powi(2) / (n as f64 * w)).sum();
    let dof = (cells.len() - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    assert!(p_value > 1e-3, "chi-square {stat} on {dof} dof, p = {p_value}");
}

#[test]
fn importance_weighted_losses_are_unbiased_with_bounded_second_moment() {
    let inst = random_instance(9, 4, 4, 12);
    let k = inst.n_actions();
    let q = normalized(&(0..12).map(|i| 1.0 + (i % 5) as f64).collect::<Vec<_>>());
    let x = 1;
    let p = exp4_action_dist(&q, &inst.policies, x);
    let bar_row: Vec<f64> = (0..k).map(|a| inst.loss.get(x, a, 0)).collect();
    let n = 100_000;
    for mu in [1.0, 0.6, 0.2] {
        let mut rng = rng_from_seed(11);
        let mut sums = vec![0.0; 12];
        let mut squares = vec![0.0; 12];
        let mut weighted_second = 0.0;
        for _ in 0..n {
            let a = sample_categorical(&p, &mut rng);
            let fb = env_step(&inst, x, a, false, &mut rng).unwrap();
            let loss = exp4_loss_vector(mu, false, a, fb.reward, p[a], &bar_row, &inst.policies, x).unwrap();
            for i in 0..12 {
                sums[i] += loss[i];
                squares[i] += loss[i] * loss[i];
            }
            weighted_second += q.iter().zip(&loss).map(|(w, l)| w * l * l).sum::<f64>();
        }
        let nf = n as f64;
        // policies sharing an action share an estimate, so test one per action
        let mut seen = vec![false; k];
        for i in 0..12 {
            let a = inst.policies.action(i, x);
            if std::mem::replace(&mut seen[a], true) {
                continue;
            }
            let want = mu * (1.0 - inst.effective_reward(x, a)) + (1.0 - mu) * bar_row[a];
            let mean = sums[i] / nf;
            let se = ((squares[i] / nf - mean * mean) / (nf - 1.0)).sqrt();
            assert!((mean - want).abs() <= 3.0 * se + 1e-12, "mu {mu}, policy {i}: {mean} vs {want}");
        }
        let v = bar_row.iter().cloned().fold(0.0, f64::max);
        let bound = 2.0 * (mu * mu * k as f64 + (1.0 - mu).powi(2) * v * v) * 1.2;
        assert!(weighted_second / nf <= bound, "mu {mu}: second moment {} > {bound}", weighted_second / nf);
    }
}

#[test]
fn single_base_regret_grows_sublinearly() {
    // a tolerance of 1 makes every policy feasible, so no constraint is in play
    let mut spec = GeneratorSpec::new(GeneratorKind::Random, 4, 2, 8).with_seed(13);
    spec.epsilon = 1.0;
    let inst = spec.generate().unwrap();
    let est = EstimatorConfig::new(EstimatorKind::Biased, 0.0);
    let seeds: Vec<u64> = (0..20).collect();
    let points: Vec<(f64, f64)> = (10..=14)
        .map(|e| {
            let t = 1usize << e;
            let total: f64 = seeds
                .iter()
                .map(|&s| run_single_base(&inst, &est, 1.0, None, t, &mut rng_from_seed(s)).unwrap().final_cum_reg_r())
                .sum();
            (t as f64, total / seeds.len() as f64)
        })
        .collect();
    let fit = fit_scaling_exponent(&points).unwrap();
    assert!(fit.slope <= 0.62, "slope {} over {points:?}", fit.slope);
}

#[test]
fn one_base_corral_replays_the_single_learner() {
    let inst = random_instance(4, 5, 4, 20);
    for kind in [EstimatorKind::Biased, EstimatorKind::DoublyRobust, EstimatorKind::Active] {
        let est = EstimatorConfig::new(kind, 0.2);
        let mut cfg = CorralConfig::new(est.clone());
        cfg.mu_grid = Some(vec![0.7]);
        let corral = run_corral(&inst, &cfg, 3000, &mut rng_from_seed(5)).unwrap();
        let mut single = run_single_base(&inst, &est, 0.7, None, 3000, &mut rng_from_seed(5)).unwrap().records;
        // a probing round has no base in charge
        for r in single.iter_mut().filter(|r| r.z) {
            r.active_mu = None;
        }
        assert_eq!(corral.records, single, "{kind:?}");
    }
}

#[test]
fn probing_rounds_freeze_every_learner() {
    let mut spec = GeneratorSpec::new(GeneratorKind::Massart, 6, 4, 12).with_seed(2);
    spec.tau = 0.5;
    spec.epsilon = 0.05;
    let inst = spec.generate().unwrap();
    let cfg = CorralConfig::new(EstimatorConfig::new(EstimatorKind::Active, 0.0));
    let mut state = CorralState::new(&inst, &cfg, 2000).unwrap();
    let mut rng = rng_from_seed(1);
    let mut probes = 0;
    for _ in 0..2000 {
        let losses: Vec<Vec<f64>> = state.bases.iter().map(|b| b.cum_loss.clone()).collect();
        let clocks: Vec<usize> = state.bases.iter().map(|b| b.t_internal).collect();
        let step = corral_round(&mut state, &inst, &mut rng).unwrap();
        if step.feedback.z {
            probes += 1;
            assert_eq!(step.feedback.action, inst.revealing_action());
            assert!(step.base.is_none());
            assert_eq!(losses, state.bases.iter().map(|b| b.cum_loss.clone()).collect::<Vec<_>>());
            assert_eq!(clocks, state.bases.iter().map(|b| b.t_internal).collect::<Vec<_>>());
            // the next round recomputes the same master law
            let mut peek = state.clone();
            corral_round(&mut peek, &inst, &mut rng_from_seed(0)).unwrap();
            assert_eq!(state.master_weights, peek.master_weights);
        }
    }
    assert!(probes > 0);
}

#[test]
fn master_keeps_full_support() {
    let inst = random_instance(7, 4, 4, 12);
    let horizon = 3000;
    let cfg = CorralConfig::new(EstimatorConfig::new(EstimatorKind::Biased, 0.0));
    let mut state = CorralState::new(&inst, &cfg, horizon).unwrap();
    let m = state.n_bases() as f64;
    let floor = 1.0 / (2.0 * m * horizon as f64);
    let mut rng = rng_from_seed(4);
    for _ in 0..horizon {
        let step = corral_round(&mut state, &inst, &mut rng).unwrap();
        assert!((step.q_played.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((state.master_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(state.master_weights.iter().all(|&w| w >= floor * (1.0 - 1e-9)));
    }
}

#[test]
fn master_importance_weights_are_unbiased() {
    // from the same mid-run state, the expected loss increment a base receives
    // under the master equals the one it would receive playing alone
    let mut spec = GeneratorSpec::new(GeneratorKind::Triggered, 4, 3, 6).with_seed(5);
    spec.nu = 0.2;
    let inst = spec.generate().unwrap();
    let mut cfg = CorralConfig::new(EstimatorConfig::new(EstimatorKind::Biased, 0.2));
    cfg.mu_grid = Some(vec![0.3, 0.6, 0.9]);
    let mut state = CorralState::new(&inst, &cfg, 1000).unwrap();
    let mut rng = rng_from_seed(30);
    for _ in 0..300 {
        corral_round(&mut state, &inst, &mut rng).unwrap();
    }
    let n = 100_000;
    let n_pol = inst.n_policies();
    let increments = |start: &CorralState, m: usize, rng: &mut _| {
        let mut sums = vec![(0.0, 0.0); n_pol];
        for _ in 0..n {
            let mut s = start.clone();
            corral_round(&mut s, &inst, rng).unwrap();
            for (acc, (after, before)) in sums.iter_mut().zip(s.bases[m].cum_loss.iter().zip(&start.bases[m].cum_loss)) {
                let d = after - before;
                acc.0 += d;
                acc.1 += d * d;
            }
        }
        sums.into_iter()
            .map(|(s1, s2)| {
                let mean = s1 / n as f64;
                (mean, (s2 / n as f64 - mean * mean) / (n as f64 - 1.0))
            })
            .collect::<Vec<_>>()
    };
    for m in 0..3 {
        let mut alone_cfg = cfg.clone();
        alone_cfg.mu_grid = Some(vec![state.bases[m].mu]);
        let mut alone = CorralState::new(&inst, &alone_cfg, 1000).unwrap();
        alone.bases[0] = state.bases[m].clone();
        alone.tracker = state.tracker.clone();
        let shared = increments(&state, m, &mut rng);
        let solo = increments(&alone, 0, &mut rng);
        for p in 0..n_pol {
            let se = (shared[p].1 + solo[p].1).sqrt();
            assert!((shared[p].0 - solo[p].0).abs() <= 3.0 * se, "base {m}, policy {p}: {:?} vs {:?}", shared[p], solo[p]);
        }
    }
}

#[test]
fn unbiased_schedule_without_bias_matches_the_biased_run() {
    let mut spec = GeneratorSpec::new(GeneratorKind::Triggered, 6, 4, 16).with_seed(3);
    spec.nu = 0.0;
    let inst = spec.generate().unwrap();
    let run = |kind| {
        let cfg = CorralConfig::new(EstimatorConfig::new(kind, 0.0));
        run_corral_outcome(&inst, &cfg, 2000, &mut rng_from_seed(6)).unwrap().trajectory
    };
    let (dr, biased) = (run(EstimatorKind::DoublyRobust), run(EstimatorKind::Biased));
    assert_eq!(dr.total_z(), 0);
    assert_eq!(dr.actions(), biased.actions());
}
