//! Sampled and fitted quantities against closed-form oracles.

use cis_core::conditioner::Conditioner;
use cis_core::environments::branch_mdp;
use cis_core::estimators::{EstimatorSpec, Scheme};
use cis_core::exact::{bellman_power, enumerate_trajectories, exact_conditional_weight, Measure};
use cis_core::harness::config::{ExperimentConfig, ExperimentKind};
use cis_core::harness::{draw_instance, operator_repetition, repetition_seed};
use cis_core::mdp::{bootstrapped_return, sample_trajectory, StatePair, Trajectory};
use cis_core::regression::{fit_batch, Objective};
use cis_core::rng::seeded;

/// Every atom of the branch law repeated in proportion to its behaviour mass.
fn frequency_batch(copies: usize) -> Vec<Trajectory> {
    let (mdp, pi, mu) = branch_mdp();
    let law = enumerate_trajectories(&mdp, &mu, &pi, StatePair::new(0, 0), 2).unwrap();
    law.atoms
        .iter()
        .flat_map(|a| std::iter::repeat_n(a.trajectory.clone(), (a.p_mu * copies as f64).round() as usize))
        .collect()
}

#[test]
fn fit_on_exact_frequencies_recovers_conditional_weights() {
    let (mdp, pi, mu) = branch_mdp();
    let start = StatePair::new(0, 0);
    let law = enumerate_trajectories(&mdp, &mu, &pi, start, 2).unwrap();
    let batch = frequency_batch(1000);
    for phi in [
        Conditioner::Return,
        Conditioner::RewardSequence,
        Conditioner::FullTrajectory,
        Conditioner::StateAt(2),
    ] {
        let store = fit_batch(&batch, phi, &pi, &mu, mdp.gamma(), Objective::Plain).unwrap();
        for (key, w) in exact_conditional_weight(&law, phi).iter() {
            let got = store.query(start, phi, key, f64::NAN).unwrap();
            assert!((got - w).abs() < 1e-12, "{phi} {key}: {got} vs {w}");
        }
    }
}

#[test]
fn return_weight_on_branch_is_one() {
    let (mdp, pi, mu) = branch_mdp();
    let start = StatePair::new(0, 0);
    let law = enumerate_trajectories(&mdp, &mu, &pi, start, 2).unwrap();
    let table = exact_conditional_weight(&law, Conditioner::Return);
    assert_eq!(table.len(), 1);
    let (_, w) = table.iter().next().unwrap();
    assert!((w - 1.0).abs() < 1e-15);
}

#[test]
fn sampled_fit_approaches_conditional_weights() {
    let (mdp, pi, mu) = branch_mdp();
    let start = StatePair::new(0, 0);
    let law = enumerate_trajectories(&mdp, &mu, &pi, start, 2).unwrap();
    let mut rng = seeded(7);
    let batch: Vec<_> = (0..200_000)
        .map(|_| sample_trajectory(&mdp, &mu, start, 2, &mut rng).unwrap())
        .collect();
    for phi in [Conditioner::Return, Conditioner::FullTrajectory] {
        let store = fit_batch(&batch, phi, &pi, &mu, mdp.gamma(), Objective::Plain).unwrap();
        for (key, w) in exact_conditional_weight(&law, phi).iter() {
            let got = store.query(start, phi, key, f64::NAN).unwrap();
            assert!((got - w).abs() < 0.02, "{phi} {key}: {got} vs {w}");
        }
    }
}

#[test]
fn operator_target_matches_dynamic_programming() {
    let cfg = ExperimentConfig::defaults(ExperimentKind::Operator);
    let setting = cfg.base_setting();
    let inst = draw_instance(&cfg, &setting, repetition_seed(&cfg, 3)).unwrap();
    let dp = bellman_power(&inst.mdp, &inst.target, &inst.q, setting.n);
    for pair in inst.mdp.nonterminal_pairs() {
        let law = enumerate_trajectories(&inst.mdp, &inst.behaviour, &inst.target, pair, setting.n).unwrap();
        let exact = law
            .expectation(Measure::Target, |a| {
                Ok(bootstrapped_return(&a.trajectory, &inst.q, &inst.target, inst.mdp.gamma()))
            })
            .unwrap();
        let expected = dp[pair.state][pair.action];
        assert!((exact - expected).abs() < 1e-9, "{pair:?}: {exact} vs {expected}");
    }
}

/// Final running means across repetitions centre on the exact operator
/// value within three standard errors.
#[test]
fn operator_estimates_are_unbiased_in_aggregate() {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Operator);
    cfg.samples = 10_000;
    cfg.repetitions = 40;
    cfg.estimators = vec![
        EstimatorSpec::oracle(Scheme::Ois),
        EstimatorSpec::oracle(Scheme::Pdis),
        EstimatorSpec::oracle(Scheme::Rcis),
        EstimatorSpec::oracle(Scheme::Scis),
    ];
    let setting = cfg.base_setting();
    let errors: Vec<Vec<f64>> = (0..cfg.repetitions)
        .map(|r| operator_repetition(&cfg, &setting, r).unwrap().final_errors)
        .collect();
    for (e, spec) in cfg.estimators.iter().enumerate() {
        let xs: Vec<f64> = errors.iter().map(|v| v[e]).collect();
        let k = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / k;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
        let se = (var / k).sqrt();
        assert!(mean.abs() <= 3.0 * se, "{spec}: mean error {mean}, standard error {se}");
    }
}
