use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use robotline::bench::{mean_std, random_config, RandomDispatch};
use robotline::heuristics::{
    fcfs_decide_with, lpt_decide_with, rule_priority_decide, spt_decide_with, Admission, PriorityTable,
};
use robotline::llm::{format_actions, parse_actions};
use robotline::marl::{featurize, policy_probs, softmax, PolicyParams};
use robotline::model::{decode_state_vector, encode_state_vector, ObservedState};
use robotline::sim::feasible_actions_with;
use robotline::{run_episode, JointAction, LineConfig, SystemState};

/// A random line and the states visited by random dispatch on it.
fn rollout(seed: u64, horizon: usize) -> (LineConfig, Vec<SystemState>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = random_config(&mut rng, horizon);
    let trace = run_episode(&config, &mut RandomDispatch::new(seed, None), seed, horizon).unwrap();
    let states = trace.records.into_iter().map(|r| r.state).collect();
    (config, states)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conservation_holds_on_random_lines(seed in any::<u64>()) {
        // run_episode checks every invariant after each step
        let (config, states) = rollout(seed, 300);
        let last = states.last().unwrap();
        prop_assert_eq!(last.throughput(), last.produced[config.machine_count - 1]);
    }

    #[test]
    fn state_vector_round_trips(seed in any::<u64>()) {
        let (config, states) = rollout(seed, 120);
        for state in states.iter().step_by(7) {
            let v = encode_state_vector::<f64>(state, &config).unwrap();
            prop_assert_eq!(v.len(), config.state_len());
            let decoded = decode_state_vector(&v, config.machine_count).unwrap();
            prop_assert_eq!(decoded, ObservedState::of_state(state, &config));
        }
    }

    #[test]
    fn state_vector_is_injective(seed in any::<u64>()) {
        let (config, states) = rollout(seed, 80);
        let observed: Vec<_> = states.iter().map(|s| ObservedState::<f64>::of_state(s, &config)).collect();
        let vectors: Vec<_> = states.iter().map(|s| encode_state_vector::<f64>(s, &config).unwrap()).collect();
        for a in 0..states.len() {
            for b in a + 1..states.len() {
                prop_assert_eq!(observed[a] == observed[b], vectors[a] == vectors[b]);
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&logits).unwrap();
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax(&logits.iter().map(|&l| l as f32).collect::<Vec<_>>()).unwrap();
        prop_assert!((q.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn policy_probabilities_on_visited_states(seed in any::<u64>(), scale in 0.0f64..20.0) {
        let (config, states) = rollout(seed, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PolicyParams::<f64>::random(
            config.robot_count,
            config.machine_count,
            robotline::marl::feature_len(&config),
            scale,
            &mut rng,
        );
        let narrow = params.cast::<f32>();
        for state in states.iter().step_by(5) {
            let phi = featurize::<f64>(state, &config).unwrap();
            let phi32 = featurize::<f32>(state, &config).unwrap();
            for agent in 0..config.robot_count {
                let p = policy_probs(&params, &phi, agent).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let p32 = policy_probs(&narrow, &phi32, agent).unwrap();
                for (a, b) in p.iter().zip(&p32) {
                    prop_assert!((a - *b as f64).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn action_lists_round_trip(robots in 1usize..6, machines in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = (0..robots).map(|_| rand::Rng::random_range(&mut rng, 0..machines)).collect();
        let action = JointAction(targets);
        let text = format_actions(&action);
        let parsed = parse_actions(&text, robots, machines).unwrap();
        prop_assert_eq!(&parsed, &action);
        prop_assert_eq!(format_actions(&parsed), text);
    }

    #[test]
    fn mean_and_std_ignore_order(mut values in prop::collection::vec(0.0f64..100.0, 2..30)) {
        let (m1, s1, d1) = mean_std(&values);
        values.reverse();
        let (m2, s2, d2) = mean_std(&values);
        prop_assert!((m1 - m2).abs() < 1e-9 && (s1 - s2).abs() < 1e-9 && d1 == d2);
        prop_assert!(s1 >= 0.0);
        let constant = vec![values[0]; values.len()];
        prop_assert!(mean_std(&constant).1.abs() < 1e-9);
    }

    #[test]
    fn dispatch_rules_pick_distinct_feasible_machines(seed in any::<u64>()) {
        let (config, states) = rollout(seed, 150);
        let table = PriorityTable::downstream_first(config.machine_count);
        for state in states.iter().filter(|s| s.any_idle_robot()) {
            for admission in [Admission::Sequential, Admission::OnePartInFlight] {
                let feasible = feasible_actions_with(state, &config, admission.wip_cap());
                let count = feasible.iter().filter(|&&f| f).count();
                let decisions = [
                    fcfs_decide_with(state, &config, admission),
                    spt_decide_with(state, &config, admission),
                    lpt_decide_with(state, &config, admission),
                ];
                for decision in decisions {
                    let idle: Vec<usize> = state.idle_robots().map(|k| decision.joint_action.0[k]).collect();
                    let served = idle.len().min(count);
                    // the first idle robots get distinct feasible machines, the rest the placeholder
                    for (n, &target) in idle.iter().enumerate() {
                        if n < served {
                            prop_assert!(feasible[target]);
                            prop_assert!(!idle[..n].contains(&target));
                        } else {
                            prop_assert_eq!(target, 0);
                        }
                    }
                }
            }
            let rule = rule_priority_decide(state, &config, &table);
            let feasible = feasible_actions_with(state, &config, None);
            let first_idle = state.idle_robots().next().unwrap();
            if let Some(best) = (0..config.machine_count).rev().find(|&i| feasible[i]) {
                prop_assert_eq!(rule.joint_action.0[first_idle], best);
            }
        }
    }
}

#[test]
fn equal_processing_times_make_heuristics_agree() {
    let config = LineConfig::config1();
    let trace = run_episode(&config, &mut RandomDispatch::new(3, None), 0, 400).unwrap();
    for state in trace.records.iter().map(|r| &r.state) {
        let f = fcfs_decide_with(state, &config, Admission::OnePartInFlight).joint_action;
        assert_eq!(f, spt_decide_with(state, &config, Admission::OnePartInFlight).joint_action);
        assert_eq!(f, lpt_decide_with(state, &config, Admission::OnePartInFlight).joint_action);
    }
}
