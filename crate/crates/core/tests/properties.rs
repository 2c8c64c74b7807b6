//! Property-based invariants over randomly generated instances.

use cis_core::conditioner::Conditioner;
use cis_core::environments::{random_dirichlet_policy, random_mdp, random_q_function, QScale, RandomMdpSpec};
use cis_core::estimators::{estimate, OracleWeights, Scheme, WeightProvider};
use cis_core::exact::{enumerate_trajectories, exact_conditional_weight, Measure};
use cis_core::harness::bootstrap::bootstrap_ci;
use cis_core::mdp::{mix_policies, sample_trajectory, StatePair};
use cis_core::mdp_io::{parse_mdp, write_mdp};
use cis_core::regression::{fit_batch, Objective};
use cis_core::rng::seeded;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn spec(n_nonterminal: usize, n_actions: usize) -> RandomMdpSpec {
    RandomMdpSpec {
        n_nonterminal,
        n_actions,
        max_outcomes: 3,
        ..RandomMdpSpec::default()
    }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mdp_text_round_trips(seed in any::<u64>(), states in 1usize..5, actions in 1usize..4) {
        let mdp = random_mdp(&spec(states, actions), &mut seeded(seed));
        let text = write_mdp(&mdp);
        let back = parse_mdp(&text).unwrap();
        prop_assert_eq!(&back, &mdp);
        prop_assert_eq!(write_mdp(&back), text);
    }

    #[test]
    fn conditional_weights_have_unit_behaviour_mean(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = seeded(seed);
        let mdp = random_mdp(&spec(3, 2), &mut rng);
        let pi = random_dirichlet_policy(&mdp, &mut rng);
        let mu = random_dirichlet_policy(&mdp, &mut rng);
        let law = enumerate_trajectories(&mdp, &mu, &pi, StatePair::new(0, 0), n).unwrap();
        for phi in [Conditioner::Return, Conditioner::RewardSequence, Conditioner::StateAt(n), Conditioner::FullTrajectory] {
            let table = exact_conditional_weight(&law, phi);
            let mean = law
                .expectation(Measure::Behaviour, |a| Ok(table.weight_of(&a.trajectory, law.gamma).unwrap()))
                .unwrap();
            prop_assert!((mean - 1.0).abs() < 1e-12, "{phi}: {mean}");
        }
    }

    #[test]
    fn regression_ignores_observation_order(seed in any::<u64>(), len in 1usize..200) {
        let mut rng = seeded(seed);
        let mdp = random_mdp(&spec(3, 2), &mut rng);
        let pi = random_dirichlet_policy(&mdp, &mut rng);
        let mu = random_dirichlet_policy(&mdp, &mut rng);
        let start = StatePair::new(0, 1);
        let mut batch: Vec<_> = (0..len)
            .map(|_| sample_trajectory(&mdp, &mu, start, 3, &mut rng).unwrap())
            .collect();
        let phi = Conditioner::Return;
        for objective in [Objective::Plain, Objective::PsiWeighted] {
            let forward = fit_batch(&batch, phi, &pi, &mu, mdp.gamma(), objective).unwrap();
            batch.shuffle(&mut rng);
            let shuffled = fit_batch(&batch, phi, &pi, &mu, mdp.gamma(), objective).unwrap();
            for traj in &batch {
                let key = phi.key(traj, mdp.gamma());
                let a = forward.query(start, phi, &key, f64::NAN).unwrap();
                let b = shuffled.query(start, phi, &key, f64::NAN).unwrap();
                prop_assert!(relative_gap(a, b) < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn on_policy_estimators_coincide(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = seeded(seed);
        let mdp = random_mdp(&spec(3, 2), &mut rng);
        let pi = random_dirichlet_policy(&mdp, &mut rng);
        let mu = random_dirichlet_policy(&mdp, &mut rng);
        let same = mix_policies(&pi, &mu, 0.0).unwrap();
        let q = random_q_function(&mdp, 1.0, QScale::StdDev, &mut rng).unwrap();
        let schemes = [Scheme::Ois, Scheme::Pdis, Scheme::Rcis, Scheme::Scis, Scheme::RewardCis, Scheme::Uncorrected];
        let start = StatePair::new(0, 0);
        let law = enumerate_trajectories(&mdp, &mu, &same, start, n).unwrap();
        let oracle = OracleWeights::for_schemes(&law, &schemes);
        let provider = WeightProvider::Oracle(&oracle);
        for _ in 0..20 {
            let traj = sample_trajectory(&mdp, &mu, start, n, &mut rng).unwrap();
            let values: Vec<f64> = schemes
                .iter()
                .map(|&s| estimate(s, &traj, &q, &same, &mu, mdp.gamma(), Some(&provider)).unwrap())
                .collect();
            for v in &values {
                prop_assert!((v - values[0]).abs() <= 1e-12, "{values:?}");
            }
        }
    }

    #[test]
    fn bootstrap_interval_brackets_the_mean(xs in prop::collection::vec(-1e3f64..1e3, 1..60), seed in any::<u64>()) {
        let (lo, hi) = bootstrap_ci(&xs, 0.9, 200, &mut seeded(seed)).unwrap();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= mean && mean <= hi);
        prop_assert!(lo >= min - 1e-9 && hi <= max + 1e-9);
    }
}
