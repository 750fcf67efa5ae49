use std::sync::Arc;

use proptest::prelude::*;

use prefrl_core::env::{make_env, Action, EnvId, RewardAudit};
use prefrl_core::oracle::label_from_returns;
use prefrl_core::orchestrator::{annealed_label_rate, ExperimentConfig, LabelBuffer, LabelSchedule, ScheduleKind};
use prefrl_core::policy::{compute_gae, RolloutBatch};
use prefrl_core::query::{population_variance, sample_candidate_pairs, CandidatePool};
use prefrl_core::reward::{adapt_regularization, preference_from_sums, VALIDATION_BAND};
use prefrl_core::segment::{LabelSource, Mu, PreferenceRecord, RecordId, SegmentId, TrajectorySegment};

fn tiny_segment(id: u64) -> TrajectorySegment {
    let spec = EnvId::Pendulum.spec();
    TrajectorySegment::new(
        SegmentId(id),
        vec![vec![1.0, 0.0, id as f64]],
        vec![Action::Continuous(vec![0.0])],
        Some(vec![0.0]),
        0,
        0,
        vec![],
        &spec.action_space,
    )
    .unwrap()
}

fn batch_from(rewards: Vec<f64>, values: Vec<f64>, bootstrap: f64) -> RolloutBatch {
    let n = rewards.len();
    RolloutBatch {
        steps: n,
        workers: 1,
        observations: ndarray::Array2::zeros((n, 1)),
        actions: vec![Action::Discrete(0); n],
        log_probs: vec![0.0; n],
        values,
        rewards,
        bootstrap_values: vec![bootstrap],
    }
}

proptest! {
    #[test]
    fn preference_is_bounded_antisymmetric_and_monotone(a in -1e3f64..1e3, b in -1e3f64..1e3, d in 0.0f64..50.0) {
        let p = preference_from_sums(a, b);
        prop_assert!((0.05..=0.95).contains(&p));
        prop_assert_eq!(p + preference_from_sums(b, a), 1.0);
        prop_assert!(preference_from_sums(a + d, b) >= p);
    }

    #[test]
    fn oracle_labels_swap_with_their_arguments(a in -50.0f64..50.0, b in -50.0f64..50.0, tol in 0.0f64..1.0) {
        prop_assert_eq!(label_from_returns(a, b, tol), label_from_returns(b, a, tol).swapped());
        prop_assert!(label_from_returns(a, b, tol).is_storable());
    }

    #[test]
    fn anneal_factor_decreases_within_unit_interval(c in 1.0f64..1e7, t in 0.0f64..1e8, dt in 0.0f64..1e6) {
        let f = annealed_label_rate(ScheduleKind::Smooth, c, 5e6, t);
        prop_assert!(f > 0.0 && f <= 1.0);
        prop_assert!(annealed_label_rate(ScheduleKind::Smooth, c, 5e6, t + dt) <= f);
        prop_assert!(annealed_label_rate(ScheduleKind::Stepped, c, 5e6, t) >= f);
    }

    #[test]
    fn labels_due_is_monotone_and_spends_the_budget(
        initial in 0usize..200,
        online in 0usize..3000,
        horizon in 1e3f64..1e6,
        stepped in any::<bool>(),
        probes in proptest::collection::vec(0.0f64..1.0, 1..20),
    ) {
        let kind = if stepped { ScheduleKind::Stepped } else { ScheduleKind::Smooth };
        let schedule = LabelSchedule::new(kind, horizon / 5.0, horizon / 10.0, initial, online, horizon);
        let mut ts: Vec<f64> = probes.iter().map(|p| p * horizon).collect();
        ts.sort_by(f64::total_cmp);
        let mut last = schedule.labels_due(0.0);
        prop_assert!(last >= initial);
        for t in ts {
            let due = schedule.labels_due(t);
            prop_assert!(due >= last && due <= initial + online);
            last = due;
        }
        prop_assert_eq!(schedule.labels_due(horizon), initial + online);
    }

    #[test]
    fn label_buffer_never_exceeds_capacity(capacity in 1usize..50, pushes in 0u64..200, rate in 0.0f64..40.0) {
        let mut buffer = LabelBuffer::new(capacity);
        for i in 0..pushes {
            buffer.push(PreferenceRecord {
                record_id: RecordId(i),
                seg1_id: SegmentId(0),
                seg2_id: SegmentId(1),
                mu: Mu::TIE,
                source: LabelSource::Oracle,
                unix_ms: 0,
            });
            prop_assert!(buffer.len() <= capacity);
            let passes = buffer.advance(rate);
            prop_assert!(passes as f64 <= rate / buffer.len() as f64 + 1.0);
        }
        prop_assert_eq!(buffer.len(), (pushes as usize).min(capacity));
    }

    #[test]
    fn candidate_pairs_are_distinct(n in 2u64..30, m in 1usize..200, seed in any::<u64>()) {
        let mut pool = CandidatePool::new(64, seed);
        (0..n).for_each(|i| pool.push(Arc::new(tiny_segment(i))));
        let pairs = sample_candidate_pairs(&mut pool, m).unwrap();
        let total = (n * (n - 1) / 2) as usize;
        prop_assert_eq!(pairs.len(), m.min(total));
        let mut seen = std::collections::HashSet::new();
        for (a, b) in &pairs {
            prop_assert!(a.id != b.id);
            prop_assert!(seen.insert((a.id.min(b.id), a.id.max(b.id))));
        }
    }

    #[test]
    fn variance_is_shift_invariant(values in proptest::collection::vec(0.0f64..1.0, 1..12), shift in -1.0f64..1.0) {
        let v = population_variance(&values);
        prop_assert!(v >= 0.0);
        let moved: Vec<f64> = values.iter().map(|x| x + shift).collect();
        prop_assert!((population_variance(&moved) - v).abs() < 1e-12);
    }

    #[test]
    fn gae_with_zero_lambda_is_the_td_error(
        rewards in proptest::collection::vec(-5.0f64..5.0, 1..20),
        seed_values in proptest::collection::vec(-5.0f64..5.0, 21),
        gamma in 0.5f64..1.0,
    ) {
        let n = rewards.len();
        let values = seed_values[..n].to_vec();
        let bootstrap = seed_values[n];
        let est = compute_gae(&batch_from(rewards.clone(), values.clone(), bootstrap), gamma, 0.0);
        for t in 0..n {
            let next = if t + 1 == n { bootstrap } else { values[t + 1] };
            prop_assert!((est.advantages[t] - (rewards[t] + gamma * next - values[t])).abs() < 1e-12);
            prop_assert!((est.returns[t] - est.advantages[t] - values[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn standardized_advantages_have_zero_mean_unit_std(
        rewards in proptest::collection::vec(-5.0f64..5.0, 2..20),
    ) {
        let n = rewards.len();
        let est = compute_gae(&batch_from(rewards, vec![0.0; n], 0.0), 0.9, 0.9);
        let adv = est.standardized();
        let mean = adv.iter().sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        let spread = population_variance(&est.advantages);
        if spread > 1e-12 {
            prop_assert!((population_variance(&adv) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn regularization_moves_toward_the_band(coeff in 1e-6f64..1.0, train in 0.01f64..2.0, ratio in 0.2f64..3.0) {
        let next = adapt_regularization(coeff, train, train * ratio, 1.1);
        if ratio > VALIDATION_BAND.1 + 1e-9 {
            prop_assert!(next > coeff);
        } else if ratio < VALIDATION_BAND.0 - 1e-9 {
            prop_assert!(next < coeff);
        } else if ratio > VALIDATION_BAND.0 + 1e-9 && ratio < VALIDATION_BAND.1 - 1e-9 {
            prop_assert_eq!(next, coeff);
        }
    }

    #[test]
    fn environments_replay_from_their_seed(seed in any::<u64>(), arcade in any::<bool>(), raw in proptest::collection::vec(0.0f64..1.0, 1..60)) {
        let id = if arcade { EnvId::Arcade } else { EnvId::Pendulum };
        let actions: Vec<Action> = raw
            .iter()
            .map(|u| if arcade { Action::Discrete((u * 3.0) as usize % 3) } else { Action::Continuous(vec![4.0 * u - 2.0]) })
            .collect();
        let trace = || {
            let mut env = make_env(id);
            let mut audit = RewardAudit::default();
            let mut out = vec![env.reset(seed)];
            for a in &actions {
                let (obs, t) = env.step(a, false).unwrap();
                out.push(obs);
                out.push(vec![t.true_reward.reveal(&mut audit)]);
            }
            out
        };
        prop_assert_eq!(trace(), trace());
    }

    #[test]
    fn config_survives_a_toml_round_trip(
        budget in 1usize..5000,
        steps in 10_000u64..1_000_000,
        seed in any::<u32>(),
        arcade in any::<bool>(),
        no_segments in any::<bool>(),
    ) {
        let env = if arcade { "arcade" } else { "pendulum" };
        let overrides = vec![
            format!("env={env}"),
            format!("label_budget={budget}"),
            format!("total_steps={steps}"),
            format!("seed={seed}"),
            format!("no_segments={no_segments}"),
        ];
        let config = ExperimentConfig::from_toml_str("", &overrides).unwrap();
        let again = ExperimentConfig::from_toml_str(&config.to_toml(), &[]).unwrap();
        prop_assert_eq!(config, again);
    }
}
