//! Exact ground truth by exhaustive trajectory enumeration and dynamic
//! programming.
//!
//! Everything here is deterministic and serves as the oracle the sampled
//! estimators are checked against: trajectory laws under both policies,
//! Bellman operator applications, `Q^pi`, return and state marginals, and
//! exact conditional importance weights.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use crate::conditioner::{quantize, Conditioner, GroupKey};
use crate::error::{invalid, CisError, Result};
use crate::estimators::{estimate, OracleWeights, Scheme, WeightProvider};
use crate::mdp::{Mdp, Policy, StatePair, Trajectory};
use crate::qfunction::{state_value, ActionValues, TabularQ};

/// Default refusal threshold on the number of enumerated trajectories.
pub const DEFAULT_ATOM_CAP: u128 = 10_000_000;

/// Which trajectory law to read masses from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    /// The behaviour policy `mu`.
    Behaviour,
    /// The target policy `pi`.
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub trajectory: Trajectory,
    pub p_mu: f64,
    pub p_pi: f64,
}

impl Atom {
    pub fn mass(&self, which: Measure) -> f64 {
        match which {
            Measure::Behaviour => self.p_mu,
            Measure::Target => self.p_pi,
        }
    }

    /// `p_pi / p_mu`, equal to `rho_{1:n-1}` of the trajectory.
    pub fn likelihood_ratio(&self) -> f64 {
        self.p_pi / self.p_mu
    }
}

/// The finite law of `tau_{0:n}` given `(X_0, A_0)`, enumerated over the
/// support of the behaviour policy.
#[derive(Debug, Clone)]
pub struct EnumeratedDistribution {
    pub start: StatePair,
    pub horizon: usize,
    pub gamma: f64,
    pub atoms: Vec<Atom>,
}

/// Exact number of trajectories with positive behaviour probability.
pub fn count_trajectories(mdp: &Mdp, mu: &Policy, start: StatePair, n: usize) -> Result<u128> {
    mdp.check_pair(start)?;
    if n == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    // paths[x] = number of continuations of length `k` from state x after its action is drawn
    let states = mdp.n_states();
    let mut from_state = vec![1u128; states];
    let branch = |x: usize, a: usize, tails: &[u128]| -> u128 {
        mdp.outcomes(x, a)
            .iter()
            .filter(|o| o.prob > 0.0)
            .map(|o| tails[o.next_state])
            .fold(0u128, |acc, c| acc.saturating_add(c))
    };
    for _ in 1..n {
        let next: Vec<u128> = (0..states)
            .map(|x| {
                (0..mdp.actions_at(x))
                    .filter(|&a| mu.prob(x, a) > 0.0)
                    .map(|a| branch(x, a, &from_state))
                    .fold(0u128, |acc, c| acc.saturating_add(c))
            })
            .collect();
        from_state = next;
    }
    Ok(branch(start.state, start.action, &from_state))
}

pub fn enumerate_trajectories(
    mdp: &Mdp,
    mu: &Policy,
    pi: &Policy,
    start: StatePair,
    n: usize,
) -> Result<EnumeratedDistribution> {
    enumerate_trajectories_capped(mdp, mu, pi, start, n, DEFAULT_ATOM_CAP)
}

/// Enumerates every `tau_{0:n}` with positive behaviour probability.
///
/// Fails with [`CisError::SupportViolation`] when the target policy puts
/// mass on an action the behaviour policy never takes at a reachable state,
/// and with [`CisError::EnumerationTooLarge`] above `cap` atoms.
pub fn enumerate_trajectories_capped(
    mdp: &Mdp,
    mu: &Policy,
    pi: &Policy,
    start: StatePair,
    n: usize,
    cap: u128,
) -> Result<EnumeratedDistribution> {
    let count = count_trajectories(mdp, mu, start, n)?;
    if count > cap {
        return Err(CisError::EnumerationTooLarge { count, cap });
    }
    let mut walker = Walker {
        mdp,
        mu,
        pi,
        n,
        states: Vec::with_capacity(n),
        actions: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        atoms: Vec::with_capacity(count as usize),
        start,
    };
    walker.expand(start.state, start.action, 1.0, 1.0)?;
    Ok(EnumeratedDistribution {
        start,
        horizon: n,
        gamma: mdp.gamma(),
        atoms: walker.atoms,
    })
}

struct Walker<'a> {
    mdp: &'a Mdp,
    mu: &'a Policy,
    pi: &'a Policy,
    n: usize,
    start: StatePair,
    states: Vec<usize>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    atoms: Vec<Atom>,
}

impl Walker<'_> {
    fn expand(&mut self, x: usize, a: usize, p_mu: f64, p_pi: f64) -> Result<()> {
        for o in self.mdp.outcomes(x, a) {
            if o.prob <= 0.0 {
                continue;
            }
            let (q_mu, q_pi) = (p_mu * o.prob, p_pi * o.prob);
            self.states.push(o.next_state);
            self.rewards.push(o.reward);
            if self.states.len() == self.n {
                self.atoms.push(Atom {
                    trajectory: Trajectory::new(
                        self.start,
                        self.states.clone(),
                        self.actions.clone(),
                        self.rewards.clone(),
                    )?,
                    p_mu: q_mu,
                    p_pi: q_pi,
                });
            } else {
                let y = o.next_state;
                for b in 0..self.mdp.actions_at(y) {
                    let (m, p) = (self.mu.prob(y, b), self.pi.prob(y, b));
                    if m <= 0.0 {
                        if p > 0.0 {
                            return Err(CisError::SupportViolation { state: y, action: b });
                        }
                        continue;
                    }
                    self.actions.push(b);
                    self.expand(y, b, q_mu * m, q_pi * p)?;
                    self.actions.pop();
                }
            }
            self.states.pop();
            self.rewards.pop();
        }
        Ok(())
    }
}

impl EnumeratedDistribution {
    pub fn total_mass(&self, which: Measure) -> f64 {
        self.atoms.iter().map(|a| a.mass(which)).sum()
    }

    /// `E[f(tau)]` under the chosen law.
    pub fn expectation<F>(&self, which: Measure, mut f: F) -> Result<f64>
    where
        F: FnMut(&Atom) -> Result<f64>,
    {
        let mut total = 0.0;
        for atom in &self.atoms {
            total += atom.mass(which) * f(atom)?;
        }
        Ok(total)
    }

    /// Exact mean and variance of `f(tau)` under the behaviour law.
    pub fn moments<F>(&self, mut f: F) -> Result<Moments>
    where
        F: FnMut(&Atom) -> Result<f64>,
    {
        let values = self
            .atoms
            .iter()
            .map(&mut f)
            .collect::<Result<Vec<f64>>>()?;
        let mean: f64 = self.atoms.iter().zip(&values).map(|(a, v)| a.p_mu * v).sum();
        let variance = self
            .atoms
            .iter()
            .zip(&values)
            .map(|(a, v)| a.p_mu * (v - mean) * (v - mean))
            .sum();
        Ok(Moments { mean, variance })
    }

    /// Writes one CSV row per atom: trajectory, masses, ratio and return.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "trajectory,p_mu,p_pi,rho,return")?;
        for atom in &self.atoms {
            writeln!(
                out,
                "{},{},{},{},{}",
                atom.trajectory,
                atom.p_mu,
                atom.p_pi,
                atom.likelihood_ratio(),
                atom.trajectory.discounted_return(self.gamma)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

/// `((T^pi)^n Q)(x, a)` by enumerating the target law.
pub fn exact_operator<Q: ActionValues + ?Sized>(
    mdp: &Mdp,
    pi: &Policy,
    q: &Q,
    n: usize,
    start: StatePair,
) -> Result<f64> {
    let law = enumerate_trajectories(mdp, pi, pi, start, n)?;
    let discount = mdp.gamma().powi(n as i32);
    law.expectation(Measure::Target, |atom| {
        let t = &atom.trajectory;
        Ok(t.discounted_return(mdp.gamma()) + discount * state_value(q, pi, t.final_state()))
    })
}

/// One application of `T^pi` to a full table.
pub fn bellman_backup<Q: ActionValues + ?Sized>(mdp: &Mdp, pi: &Policy, q: &Q) -> Vec<Vec<f64>> {
    let values: Vec<f64> = (0..mdp.n_states()).map(|x| state_value(q, pi, x)).collect();
    (0..mdp.n_states())
        .map(|x| {
            (0..mdp.actions_at(x))
                .map(|a| {
                    mdp.outcomes(x, a)
                        .iter()
                        .map(|o| o.prob * (o.reward + mdp.gamma() * values[o.next_state]))
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// `(T^pi)^n Q` for every pair by repeated backups (no enumeration).
pub fn bellman_power<Q: ActionValues + ?Sized>(
    mdp: &Mdp,
    pi: &Policy,
    q: &Q,
    n: usize,
) -> Vec<Vec<f64>> {
    let mut table: Vec<Vec<f64>> = (0..mdp.n_states())
        .map(|x| (0..mdp.actions_at(x)).map(|a| q.value(x, a)).collect())
        .collect();
    for _ in 0..n {
        table = bellman_backup(mdp, pi, &Rows(&table));
    }
    table
}

struct Rows<'a>(&'a [Vec<f64>]);

impl ActionValues for Rows<'_> {
    fn value(&self, state: usize, action: usize) -> f64 {
        self.0[state][action]
    }
}

/// `Q^pi` by value iteration from zero.
///
/// Stops once the sup-norm change falls below `tol (1 - gamma) / gamma`,
/// which guarantees `||T^pi Q - Q||_inf < tol`.
pub fn solve_q_pi(mdp: &Mdp, pi: &Policy, tol: f64) -> Result<TabularQ> {
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let gamma = mdp.gamma();
    let threshold = if gamma > 0.0 {
        tol * (1.0 - gamma) / gamma
    } else {
        f64::INFINITY
    };
    let mut q = TabularQ::zeros(mdp);
    loop {
        let next = TabularQ::from_rows(mdp, bellman_backup(mdp, pi, &q))?;
        let change = next.max_abs_diff(&q);
        q = next;
        if change < threshold {
            return Ok(q);
        }
    }
}

/// Probability mass function of the truncated return, keyed by its
/// quantised value.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPmf {
    masses: BTreeMap<i64, (f64, f64)>,
}

impl ReturnPmf {
    /// Mass at return value `g` (after quantisation).
    pub fn mass(&self, g: f64) -> f64 {
        self.masses.get(&quantize(g)).map_or(0.0, |&(_, m)| m)
    }

    /// `(return value, mass)` pairs in increasing return order.
    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.masses.values().copied()
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.masses.values().map(|&(_, m)| m).sum()
    }
}

pub fn return_distribution(law: &EnumeratedDistribution, which: Measure) -> ReturnPmf {
    let mut masses = BTreeMap::new();
    for atom in &law.atoms {
        let g = atom.trajectory.discounted_return(law.gamma);
        let entry = masses.entry(quantize(g)).or_insert((g, 0.0));
        entry.1 += atom.mass(which);
    }
    ReturnPmf { masses }
}

/// Law of `X_t` from the fixed start pair, indexed by state.
pub fn state_marginal(
    law: &EnumeratedDistribution,
    t: usize,
    which: Measure,
    n_states: usize,
) -> Result<Vec<f64>> {
    if t > law.horizon {
        return Err(invalid(format!("time {t} exceeds horizon {}", law.horizon)));
    }
    let mut probs = vec![0.0; n_states];
    for atom in &law.atoms {
        probs[atom.trajectory.state(t)] += atom.mass(which);
    }
    Ok(probs)
}

/// `E_mu[rho_{1:n-1} | Phi = k]` for every key `k` realised under `mu`.
#[derive(Debug, Clone)]
pub struct ConditionalWeightTable {
    pub conditioner: Conditioner,
    pub start: StatePair,
    pub horizon: usize,
    weights: HashMap<GroupKey, f64>,
}

impl ConditionalWeightTable {
    pub fn get(&self, key: &GroupKey) -> Option<f64> {
        self.weights.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupKey, f64)> {
        self.weights.iter().map(|(k, &w)| (k, w))
    }

    /// Looks up the weight of the key `traj` realises.
    pub fn weight_of(&self, traj: &Trajectory, gamma: f64) -> Option<f64> {
        self.get(&self.conditioner.key(traj, gamma))
    }
}

/// Groups atoms by `phi` and forms `sum p_pi / sum p_mu` per group.
pub fn exact_conditional_weight(
    law: &EnumeratedDistribution,
    phi: Conditioner,
) -> ConditionalWeightTable {
    let mut sums: HashMap<GroupKey, (f64, f64)> = HashMap::new();
    for atom in &law.atoms {
        let entry = sums
            .entry(phi.key(&atom.trajectory, law.gamma))
            .or_insert((0.0, 0.0));
        entry.0 += atom.p_pi;
        entry.1 += atom.p_mu;
    }
    ConditionalWeightTable {
        conditioner: phi,
        start: law.start,
        horizon: law.horizon,
        weights: sums.into_iter().map(|(k, (pi, mu))| (k, pi / mu)).collect(),
    }
}

/// Exact mean and variance under `mu` of a scheme's per-trajectory estimate,
/// with conditional weights read from `oracle`.
pub fn estimator_moments<Q: ActionValues + ?Sized>(
    law: &EnumeratedDistribution,
    scheme: Scheme,
    q: &Q,
    pi: &Policy,
    mu: &Policy,
    oracle: &OracleWeights,
) -> Result<Moments> {
    let provider = WeightProvider::Oracle(oracle);
    law.moments(|atom| estimate(scheme, &atom.trajectory, q, pi, mu, law.gamma, Some(&provider)))
}
