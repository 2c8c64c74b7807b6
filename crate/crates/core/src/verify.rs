//! Exact property checks on a fixed battery of small instances.
//!
//! Every check enumerates trajectory laws exactly and compares estimator
//! moments, variances and conditional weights against independently
//! computed quantities. Each returns the worst deviation found, so callers
//! can report margins as well as pass/fail.

use rand::Rng;

use crate::conditioner::{quantize, Conditioner, GroupKey};
use crate::environments::{
    branch_mdp, build_chain, random_dirichlet_policy, random_mdp, random_q_function, ChainSpec, QScale, RandomMdpSpec,
};
use crate::error::Result;
use crate::estimators::{OracleWeights, Scheme};
use crate::exact::{
    enumerate_trajectories, estimator_moments, exact_conditional_weight, exact_operator, return_distribution,
    state_marginal, EnumeratedDistribution, Measure,
};
use crate::mdp::{importance_ratio, sample_trajectory, trajectory_ratio, Mdp, Policy, StatePair};
use crate::qfunction::{state_value, TabularQ};
use crate::regression::{fit_batch, Objective};
use crate::rng::{seeded, stream};

/// Seed of the shipped battery.
pub const BATTERY_SEED: u64 = 20_190_601;
/// Number of random instances beside the chain.
pub const RANDOM_INSTANCES: usize = 50;

pub const UNBIASED_TOL: f64 = 1e-9;
pub const TERM_TOL: f64 = 1e-10;
pub const VARIANCE_SLACK: f64 = 1e-12;
pub const IDENTITY_TOL: f64 = 1e-12;
pub const MINIMISER_TOL: f64 = 1e-8;
pub const CONSISTENCY_TOL: f64 = 0.02;
pub const REGRESSION_BATCHES: usize = 20;
pub const CONSISTENCY_SAMPLES: usize = 200_000;

/// One evaluation instance: an MDP, target and behaviour policies, a
/// Q-function and a horizon, with the exact law from every start pair.
pub struct Instance {
    pub label: String,
    pub mdp: Mdp,
    pub target: Policy,
    pub behaviour: Policy,
    pub q: TabularQ,
    pub n: usize,
    pub laws: Vec<EnumeratedDistribution>,
}

impl Instance {
    pub fn new(label: String, mdp: Mdp, target: Policy, behaviour: Policy, q: TabularQ, n: usize) -> Result<Self> {
        let laws = mdp
            .nonterminal_pairs()
            .into_iter()
            .map(|pair| enumerate_trajectories(&mdp, &behaviour, &target, pair, n))
            .collect::<Result<_>>()?;
        Ok(Self {
            label,
            mdp,
            target,
            behaviour,
            q,
            n,
            laws,
        })
    }
}

/// Random instances (2-3 non-terminal states, 2-3 actions, rewards in
/// {0, 1, 2}, n in 1..=4) followed by the noisy chain with n = 3.
pub fn battery(seed: u64) -> Result<Vec<Instance>> {
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(RANDOM_INSTANCES + 1);
    for i in 0..RANDOM_INSTANCES {
        let spec = RandomMdpSpec {
            n_nonterminal: rng.random_range(2..=3),
            n_actions: rng.random_range(2..=3),
            gamma: 0.9,
            ..RandomMdpSpec::default()
        };
        let mdp = random_mdp(&spec, &mut rng);
        let target = random_dirichlet_policy(&mdp, &mut rng);
        let behaviour = random_dirichlet_policy(&mdp, &mut rng);
        let q = random_q_function(&mdp, 0.1, QScale::Variance, &mut rng)?;
        let n = rng.random_range(1..=4);
        out.push(Instance::new(format!("random #{i}"), mdp, target, behaviour, q, n)?);
    }
    let chain = build_chain(&ChainSpec::default().with_noise(0.1))?;
    let target = random_dirichlet_policy(&chain, &mut rng);
    let behaviour = random_dirichlet_policy(&chain, &mut rng);
    let q = random_q_function(&chain, 0.1, QScale::Variance, &mut rng)?;
    out.push(Instance::new("chain".into(), chain, target, behaviour, q, 3)?);
    Ok(out)
}

/// Outcome of one property over the battery.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub cases: usize,
    /// Largest deviation (equalities) or violation (inequalities) seen.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            cases: 0,
            worst: 0.0,
            tolerance,
            detail: String::new(),
        }
    }

    fn record(&mut self, deviation: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        if !(deviation <= self.worst) {
            self.worst = deviation;
            self.detail = what();
        }
    }

    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let mut line = format!(
            "{verdict} {}: {} cases, worst {:.3e} (tolerance {:.0e})",
            self.name, self.cases, self.worst, self.tolerance
        );
        if !self.passed() {
            line.push_str(&format!(" at {}", self.detail));
        }
        line
    }

    /// Combines two checks into one line; the tolerance is not meaningful
    /// across them, so the combined worst is the larger ratio to tolerance.
    fn and(self, name: &'static str, other: Check) -> Check {
        let a = self.worst / self.tolerance;
        let b = other.worst / other.tolerance;
        let (worst, detail) = if a >= b {
            (a, format!("{}: {}", self.name, self.detail))
        } else {
            (b, format!("{}: {}", other.name, other.detail))
        };
        Check {
            name,
            cases: self.cases + other.cases,
            worst,
            tolerance: 1.0,
            detail,
        }
    }
}

/// `|got - expected|`, divided by `|expected|` once that exceeds 1.
///
/// An f64 near `w` is only resolved to `w * 2^-52`, so identities between
/// large weights are compared relative to their size.
pub fn scaled_deviation(got: f64, expected: f64) -> f64 {
    (got - expected).abs() / expected.abs().max(1.0)
}

fn at(inst: &Instance, law: &EnumeratedDistribution, what: &str) -> String {
    format!("{} {} n={} {what}", inst.label, law.start, inst.n)
}

/// Exact behaviour means of OIS, PDIS and the return-conditioned
/// estimators equal the exact n-step operator value.
pub fn check_unbiased_estimators(battery: &[Instance]) -> Result<Check> {
    let schemes = [
        Scheme::Ois,
        Scheme::Pdis,
        Scheme::Rcis,
        Scheme::ReturnConditioned(Conditioner::RewardSequence),
        Scheme::ReturnConditioned(Conditioner::FullTrajectory),
    ];
    let mut check = Check::new("unbiased estimators", UNBIASED_TOL);
    for inst in battery {
        for law in &inst.laws {
            let exact = exact_operator(&inst.mdp, &inst.target, &inst.q, inst.n, law.start)?;
            let oracle = OracleWeights::for_schemes(law, &schemes);
            for scheme in schemes {
                let m = estimator_moments(law, scheme, &inst.q, &inst.target, &inst.behaviour, &oracle)?;
                check.record((m.mean - exact).abs(), || at(inst, law, &format!("{scheme:?}")));
            }
        }
    }
    Ok(check)
}

/// For every reward index, the per-decision term has variance no larger
/// than the same reward weighted by the full trajectory ratio.
pub fn check_per_decision_variance(battery: &[Instance]) -> Result<Check> {
    let mut check = Check::new("per-decision variance", VARIANCE_SLACK);
    for inst in battery {
        let gamma = inst.mdp.gamma();
        for law in &inst.laws {
            for t in 0..inst.n {
                let disc = gamma.powi(t as i32);
                let pd = law.moments(|a| {
                    Ok(importance_ratio(&a.trajectory, &inst.target, &inst.behaviour, 1, t)?
                        * disc
                        * a.trajectory.reward(t))
                })?;
                let full = law.moments(|a| {
                    Ok(trajectory_ratio(&a.trajectory, &inst.target, &inst.behaviour)? * disc * a.trajectory.reward(t))
                })?;
                check.record(pd.variance - full.variance, || at(inst, law, &format!("t={t}")));
            }
        }
    }
    Ok(check)
}

/// Each state-conditioned and reward-conditioned reward term, and the
/// state-conditioned bootstrap term, is unbiased for its target term.
pub fn check_state_conditioned_terms(battery: &[Instance]) -> Result<Check> {
    let mut check = Check::new("conditioned reward terms unbiased", TERM_TOL);
    for inst in battery {
        let gamma = inst.mdp.gamma();
        for law in &inst.laws {
            for t in 0..=inst.n {
                let disc = gamma.powi(t as i32);
                let term = |a: &crate::exact::Atom| {
                    if t < inst.n {
                        disc * a.trajectory.reward(t)
                    } else {
                        disc * state_value(&inst.q, &inst.target, a.trajectory.final_state())
                    }
                };
                let truth = law.expectation(Measure::Target, |a| Ok(term(a)))?;
                let phis: Vec<Conditioner> = if t < inst.n {
                    vec![Conditioner::StateActionRewardAt(t), Conditioner::RewardAt(t)]
                } else {
                    vec![Conditioner::StateAt(t)]
                };
                for phi in phis {
                    let table = exact_conditional_weight(law, phi);
                    let est = law.expectation(Measure::Behaviour, |a| {
                        let w = table.weight_of(&a.trajectory, law.gamma).expect("key realised under mu");
                        Ok(w * term(a))
                    })?;
                    check.record((est - truth).abs(), || at(inst, law, &format!("{phi}")));
                }
            }
        }
    }
    Ok(check)
}

/// State-conditioned weights equal the state-marginal ratio times the
/// action ratio (and 1 at `t = 0`).
pub fn check_state_marginal_identity(battery: &[Instance]) -> Result<Check> {
    let mut check = Check::new("state-conditioned weight identity", IDENTITY_TOL);
    for inst in battery {
        let n_states = inst.mdp.n_states();
        for law in &inst.laws {
            for t in 0..inst.n {
                let table = exact_conditional_weight(law, Conditioner::StateActionRewardAt(t));
                let p_pi = state_marginal(law, t, Measure::Target, n_states)?;
                let p_mu = state_marginal(law, t, Measure::Behaviour, n_states)?;
                for atom in &law.atoms {
                    let (x, a) = (atom.trajectory.state(t), atom.trajectory.action(t));
                    let expected = if t == 0 {
                        1.0
                    } else {
                        (p_pi[x] / p_mu[x]) * (inst.target.prob(x, a) / inst.behaviour.prob(x, a))
                    };
                    let w = table.weight_of(&atom.trajectory, law.gamma).expect("key realised under mu");
                    check.record(scaled_deviation(w, expected), || {
                        at(inst, law, &format!("t={t} x={x} a={a} w={w} expected={expected}"))
                    });
                }
            }
        }
    }
    Ok(check)
}

fn conditioned_variance(
    law: &EnumeratedDistribution,
    inst: &Instance,
    phi: Option<Conditioner>,
    target: impl Fn(&crate::mdp::Trajectory) -> f64,
) -> Result<f64> {
    let table = phi.map(|p| exact_conditional_weight(law, p));
    let m = law.moments(|a| {
        let w = match &table {
            Some(t) => t.weight_of(&a.trajectory, law.gamma).expect("key realised under mu"),
            None => trajectory_ratio(&a.trajectory, &inst.target, &inst.behaviour)?,
        };
        Ok(w * target(&a.trajectory))
    })?;
    Ok(m.variance)
}

/// Conditioning the ratio on a functional the target factors through never
/// increases variance.
pub fn check_conditioning_reduces_variance(battery: &[Instance]) -> Result<Check> {
    let mut check = Check::new("conditioning reduces variance", VARIANCE_SLACK);
    for inst in battery {
        let gamma = inst.mdp.gamma();
        for law in &inst.laws {
            let ret = |tr: &crate::mdp::Trajectory| tr.discounted_return(gamma);
            let plain = conditioned_variance(law, inst, None, ret)?;
            for phi in [Conditioner::Return, Conditioner::RewardSequence] {
                let v = conditioned_variance(law, inst, Some(phi), ret)?;
                check.record(v - plain, || at(inst, law, &format!("{phi}")));
            }
            for t in 0..inst.n {
                let reward = |tr: &crate::mdp::Trajectory| tr.reward(t);
                let plain = conditioned_variance(law, inst, None, reward)?;
                for phi in [Conditioner::RewardAt(t), Conditioner::StateActionRewardAt(t)] {
                    let v = conditioned_variance(law, inst, Some(phi), reward)?;
                    check.record(v - plain, || at(inst, law, &format!("{phi}")));
                }
            }
        }
    }
    Ok(check)
}

/// Coarser conditioning gives lower variance along
/// return, reward sequence, full trajectory.
pub fn check_refinement_ordering(battery: &[Instance]) -> Result<Check> {
    let mut check = Check::new("refinement ordering", VARIANCE_SLACK);
    for inst in battery {
        let gamma = inst.mdp.gamma();
        for law in &inst.laws {
            let ret = |tr: &crate::mdp::Trajectory| tr.discounted_return(gamma);
            let by_return = conditioned_variance(law, inst, Some(Conditioner::Return), ret)?;
            let by_rewards = conditioned_variance(law, inst, Some(Conditioner::RewardSequence), ret)?;
            let full = conditioned_variance(law, inst, None, ret)?;
            check.record(by_return - by_rewards, || at(inst, law, "return vs rewards"));
            check.record(by_rewards - full, || at(inst, law, "rewards vs full"));
        }
    }
    Ok(check)
}

/// Return-conditioned weights equal the ratio of the return pmfs.
pub fn check_return_pmf_ratio(battery: &[Instance]) -> Result<Check> {
    let mut check = Check::new("return pmf ratio", IDENTITY_TOL);
    for inst in battery {
        for law in &inst.laws {
            let table = exact_conditional_weight(law, Conditioner::Return);
            let p_pi = return_distribution(law, Measure::Target);
            let p_mu = return_distribution(law, Measure::Behaviour);
            for (g, m) in p_mu.iter() {
                let w = table
                    .get(&GroupKey::from_tokens(vec![quantize(g)]))
                    .expect("every realised return has a weight");
                let expected = p_pi.mass(g) / m;
                check.record(scaled_deviation(w, expected), || at(inst, law, &format!("g={g}")));
            }
        }
    }
    Ok(check)
}

/// Golden-section minimisation of `sum_i c_i (f - rho_i)^2` over
/// `[lo, hi]`. Objective values are compared through their exact
/// difference `(x1 - x2) sum_i c_i (x1 + x2 - 2 rho_i)` so the search
/// resolves the argmin to rounding error rather than to `sqrt(eps)`.
pub fn golden_section_argmin(points: &[(f64, f64)], mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let first_is_lower = |x1: f64, x2: f64| {
        let s: f64 = points.iter().map(|&(rho, c)| c * (x1 + x2 - 2.0 * rho)).sum();
        (x1 - x2) * s < 0.0
    };
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    // each step shrinks the bracket by the golden ratio; the cap only
    // matters once the bracket is below one ulp
    for _ in 0..400 {
        if hi - lo <= tol {
            break;
        }
        if first_is_lower(x1, x2) {
            hi = x2;
            x2 = x1;
            x1 = hi - ratio * (hi - lo);
        } else {
            lo = x1;
            x1 = x2;
            x2 = lo + ratio * (hi - lo);
        }
    }
    0.5 * (lo + hi)
}

/// The store's per-key weight matches a numerical minimisation of both
/// empirical objectives on random batches.
pub fn check_regression_minimiser(battery: &[Instance], seed: u64) -> Result<Check> {
    let mut check = Check::new("regression minimiser", MINIMISER_TOL);
    let mut rng = stream(seed, 1);
    for b in 0..REGRESSION_BATCHES {
        let inst = &battery[rng.random_range(0..battery.len())];
        let law = &inst.laws[rng.random_range(0..inst.laws.len())];
        let size = rng.random_range(20..200);
        let trajs = (0..size)
            .map(|_| sample_trajectory(&inst.mdp, &inst.behaviour, law.start, inst.n, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let gamma = inst.mdp.gamma();
        let phi = Conditioner::Return;
        for objective in [Objective::Plain, Objective::PsiWeighted] {
            let store = fit_batch(&trajs, phi, &inst.target, &inst.behaviour, gamma, objective)?;
            let mut groups: std::collections::BTreeMap<GroupKey, Vec<(f64, f64)>> = Default::default();
            for tr in &trajs {
                let rho = trajectory_ratio(tr, &inst.target, &inst.behaviour)?;
                let psi = tr.discounted_return(gamma);
                let c = match objective {
                    Objective::Plain => 1.0,
                    Objective::PsiWeighted => psi * psi,
                };
                groups.entry(phi.key(tr, gamma)).or_default().push((rho, c));
            }
            for (key, points) in groups {
                let points: Vec<(f64, f64)> = if points.iter().all(|&(_, c)| c == 0.0) {
                    // a flat weighted objective; the store keeps the plain mean
                    points.iter().map(|&(r, _)| (r, 1.0)).collect()
                } else {
                    points
                };
                let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - 1.0;
                let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) + 1.0;
                let argmin = golden_section_argmin(&points, lo, hi, 1e-13);
                let got = store.query(law.start, phi, &key, f64::NAN)?;
                check.record((got - argmin).abs(), || {
                    format!("batch {b} {} {} {key} {}", inst.label, law.start, objective.name())
                });
            }
        }
    }
    Ok(check)
}

/// Online weights from `CONSISTENCY_SAMPLES` behaviour trajectories on the
/// branch instance approach the exact conditional weight.
pub fn check_regression_consistency(seed: u64) -> Result<Check> {
    let mut check = Check::new("regression consistency", CONSISTENCY_TOL);
    let (mdp, pi, mu) = branch_mdp();
    let start = StatePair::new(0, 0);
    let law = enumerate_trajectories(&mdp, &mu, &pi, start, 2)?;
    let mut rng = stream(seed, 2);
    let trajs = (0..CONSISTENCY_SAMPLES)
        .map(|_| sample_trajectory(&mdp, &mu, start, 2, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    for phi in [Conditioner::Return, Conditioner::FullTrajectory] {
        let store = fit_batch(&trajs, phi, &pi, &mu, mdp.gamma(), Objective::Plain)?;
        let exact = exact_conditional_weight(&law, phi);
        for (key, w) in exact.iter() {
            let got = store.query(start, phi, key, f64::NAN)?;
            check.record((got - w).abs(), || format!("branch {phi} {key}"));
        }
    }
    Ok(check)
}

/// All seven property lines, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let battery = battery(seed)?;
    Ok(vec![
        check_unbiased_estimators(&battery)?,
        check_per_decision_variance(&battery)?,
        check_state_conditioned_terms(&battery)?
            .and("state-conditioned terms", check_state_marginal_identity(&battery)?),
        check_conditioning_reduces_variance(&battery)?,
        check_refinement_ordering(&battery)?,
        check_return_pmf_ratio(&battery)?,
        check_regression_minimiser(&battery, seed)?.and("regression weights", check_regression_consistency(seed)?),
    ])
}
