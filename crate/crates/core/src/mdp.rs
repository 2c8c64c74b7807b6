//! Finite MDPs, Markov policies and truncated trajectories.
//!
//! Transitions are stored as a joint law over `(next_state, reward)` for
//! every non-terminal `(state, action)`. Terminal states expose a single
//! "stay" action (index 0) that self-loops with reward 0, so every policy
//! puts probability 1 on it and importance ratios after absorption are
//! exactly 1.

use rand::Rng;

use crate::error::{invalid, CisError, Result};
use crate::qfunction::{state_value, ActionValues};
use crate::rng::SimRng;

/// Tolerance on probability rows summing to one.
pub const PROB_TOL: f64 = 1e-12;

/// The action index every terminal state exposes.
pub const STAY: usize = 0;

/// A `(state, action)` pair, typically the fixed start `(X_0, A_0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatePair {
    pub state: usize,
    pub action: usize,
}

impl StatePair {
    pub fn new(state: usize, action: usize) -> Self {
        Self { state, action }
    }
}

impl std::fmt::Display for StatePair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.state, self.action)
    }
}

/// One atom of the joint `(next_state, reward)` transition law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub next_state: usize,
    pub reward: f64,
    pub prob: f64,
}

impl Outcome {
    pub fn new(next_state: usize, reward: f64, prob: f64) -> Self {
        Self {
            next_state,
            reward,
            prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    gamma: f64,
    n_actions: usize,
    terminal: Vec<bool>,
    initial: Vec<f64>,
    transitions: Vec<Vec<Vec<Outcome>>>,
}

impl Mdp {
    /// Builds and validates an MDP.
    ///
    /// `transitions[x][a]` lists the outcomes of `(x, a)`. Non-terminal
    /// states must provide exactly `n_actions` actions. Terminal states may
    /// pass an empty list (the stay action is filled in) or exactly the
    /// stay action.
    pub fn new(
        gamma: f64,
        n_actions: usize,
        terminal: Vec<bool>,
        initial: Vec<f64>,
        mut transitions: Vec<Vec<Vec<Outcome>>>,
    ) -> Result<Self> {
        let n_states = terminal.len();
        if n_states == 0 || n_actions == 0 {
            return Err(invalid("an MDP needs at least one state and one action"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(invalid(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        if transitions.len() != n_states || initial.len() != n_states {
            return Err(invalid(format!(
                "expected {n_states} transition rows and initial probabilities"
            )));
        }
        check_distribution(&initial).map_err(|e| invalid(format!("initial distribution: {e}")))?;

        for (x, row) in transitions.iter_mut().enumerate() {
            if terminal[x] {
                let stay = vec![Outcome::new(x, 0.0, 1.0)];
                match row.as_slice() {
                    [] => row.push(stay),
                    [only] if only.as_slice() == stay.as_slice() => {}
                    _ => {
                        return Err(invalid(format!(
                            "terminal state {x} must expose only the zero-reward stay action"
                        )))
                    }
                }
                continue;
            }
            if row.len() != n_actions {
                return Err(invalid(format!(
                    "state {x} lists {} actions, expected {n_actions}",
                    row.len()
                )));
            }
            for (a, outcomes) in row.iter().enumerate() {
                if outcomes.is_empty() {
                    return Err(invalid(format!("({x}, {a}) has no outcomes")));
                }
                for o in outcomes {
                    if o.next_state >= n_states {
                        return Err(invalid(format!(
                            "({x}, {a}) transitions to unknown state {}",
                            o.next_state
                        )));
                    }
                    if !o.reward.is_finite() {
                        return Err(invalid(format!("({x}, {a}) has a non-finite reward")));
                    }
                }
                let probs: Vec<f64> = outcomes.iter().map(|o| o.prob).collect();
                check_distribution(&probs).map_err(|e| invalid(format!("({x}, {a}): {e}")))?;
            }
        }

        Ok(Self {
            gamma,
            n_actions,
            terminal,
            initial,
            transitions,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_states(&self) -> usize {
        self.terminal.len()
    }

    /// Number of actions at non-terminal states.
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of actions available at `state` (1 for terminal states).
    pub fn actions_at(&self, state: usize) -> usize {
        self.transitions[state].len()
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn terminal_flags(&self) -> &[bool] {
        &self.terminal
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial
    }

    pub fn outcomes(&self, state: usize, action: usize) -> &[Outcome] {
        &self.transitions[state][action]
    }

    pub fn contains(&self, pair: StatePair) -> bool {
        pair.state < self.n_states() && pair.action < self.actions_at(pair.state)
    }

    /// All `(x, a)` with `x` non-terminal, in index order.
    pub fn nonterminal_pairs(&self) -> Vec<StatePair> {
        (0..self.n_states())
            .filter(|&x| !self.terminal[x])
            .flat_map(|x| (0..self.actions_at(x)).map(move |a| StatePair::new(x, a)))
            .collect()
    }

    pub(crate) fn check_pair(&self, pair: StatePair) -> Result<()> {
        if self.contains(pair) {
            Ok(())
        } else {
            Err(invalid(format!("state-action pair {pair} is out of range")))
        }
    }
}

fn check_distribution(probs: &[f64]) -> std::result::Result<(), String> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("probabilities must be finite and non-negative".into());
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(format!("probabilities sum to {total}, not 1"));
    }
    Ok(())
}

/// A Markov policy: one action distribution per state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: Vec<Vec<f64>>,
}

impl Policy {
    /// Validates `probs` against the action layout of `mdp`.
    pub fn new(mdp: &Mdp, probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.len() != mdp.n_states() {
            return Err(invalid(format!(
                "policy covers {} states, MDP has {}",
                probs.len(),
                mdp.n_states()
            )));
        }
        for (x, row) in probs.iter().enumerate() {
            if row.len() != mdp.actions_at(x) {
                return Err(invalid(format!(
                    "policy row {x} has {} entries, state offers {} actions",
                    row.len(),
                    mdp.actions_at(x)
                )));
            }
            check_distribution(row).map_err(|e| invalid(format!("policy row {x}: {e}")))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(mdp: &Mdp) -> Self {
        let probs = (0..mdp.n_states())
            .map(|x| {
                let k = mdp.actions_at(x);
                vec![1.0 / k as f64; k]
            })
            .collect();
        Self { probs }
    }

    /// Puts probability 1 on `choose(x)` at every non-terminal state.
    pub fn deterministic(mdp: &Mdp, choose: impl Fn(usize) -> usize) -> Result<Self> {
        let probs = (0..mdp.n_states())
            .map(|x| {
                let k = mdp.actions_at(x);
                let a = if mdp.is_terminal(x) { STAY } else { choose(x) };
                let mut row = vec![0.0; k];
                if a < k {
                    row[a] = 1.0;
                }
                row
            })
            .collect();
        Self::new(mdp, probs)
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state][action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state]
    }

    fn same_layout(&self, other: &Policy) -> bool {
        self.probs.len() == other.probs.len()
            && self
                .probs
                .iter()
                .zip(&other.probs)
                .all(|(a, b)| a.len() == b.len())
    }
}

/// `supp(pi(.|x)) ⊆ supp(mu(.|x))` at every state.
pub fn check_support_condition(pi: &Policy, mu: &Policy) -> Result<bool> {
    if !pi.same_layout(mu) {
        return Err(invalid("policies are defined over different state/action spaces"));
    }
    Ok(pi
        .probs
        .iter()
        .zip(&mu.probs)
        .all(|(p, m)| p.iter().zip(m).all(|(&p, &m)| p <= 0.0 || m > 0.0)))
}

/// Per-state mixture `beta * pi + (1 - beta) * mu`.
pub fn mix_policies(pi: &Policy, mu: &Policy, beta: f64) -> Result<Policy> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    if !pi.same_layout(mu) {
        return Err(invalid("policies are defined over different state/action spaces"));
    }
    let probs = pi
        .probs
        .iter()
        .zip(&mu.probs)
        .map(|(p, m)| {
            p.iter()
                .zip(m)
                .map(|(&p, &m)| beta * p + (1.0 - beta) * m)
                .collect()
        })
        .collect();
    Ok(Policy { probs })
}

/// A truncated trajectory `X_0, A_0, R_0, X_1, ..., X_n` with fixed start
/// `(X_0, A_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    start: StatePair,
    /// `X_1..X_n`
    states: Vec<usize>,
    /// `A_1..A_{n-1}`
    actions: Vec<usize>,
    /// `R_0..R_{n-1}`
    rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(
        start: StatePair,
        states: Vec<usize>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let n = rewards.len();
        if n == 0 || states.len() != n || actions.len() + 1 != n {
            return Err(invalid(format!(
                "inconsistent trajectory lengths: {} states, {} actions, {} rewards",
                states.len(),
                actions.len(),
                n
            )));
        }
        Ok(Self {
            start,
            states,
            actions,
            rewards,
        })
    }

    pub fn start(&self) -> StatePair {
        self.start
    }

    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }

    /// `X_t` for `0 <= t <= n`.
    pub fn state(&self, t: usize) -> usize {
        if t == 0 {
            self.start.state
        } else {
            self.states[t - 1]
        }
    }

    /// `A_t` for `0 <= t < n`.
    pub fn action(&self, t: usize) -> usize {
        if t == 0 {
            self.start.action
        } else {
            self.actions[t - 1]
        }
    }

    pub fn reward(&self, t: usize) -> f64 {
        self.rewards[t]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn final_state(&self) -> usize {
        self.states[self.states.len() - 1]
    }

    /// Truncated discounted return `sum_{t<n} gamma^t R_t`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut total = 0.0;
        let mut discount = 1.0;
        for &r in &self.rewards {
            total += discount * r;
            discount *= gamma;
        }
        total
    }
}

impl std::fmt::Display for Trajectory {
    /// `x0 a0 r0 | x1 a1 r1 | ... | xn`
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for t in 0..self.horizon() {
            write!(f, "{} {} {} | ", self.state(t), self.action(t), self.reward(t))?;
        }
        write!(f, "{}", self.final_state())
    }
}

pub(crate) fn sample_categorical(probs: impl IntoIterator<Item = f64>, rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.into_iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Draws one outcome of `(state, action)`.
pub fn sample_outcome(mdp: &Mdp, state: usize, action: usize, rng: &mut SimRng) -> Outcome {
    let outcomes = mdp.outcomes(state, action);
    outcomes[sample_categorical(outcomes.iter().map(|o| o.prob), rng)]
}

/// Draws an action from `policy` at `state`.
pub fn sample_action(policy: &Policy, state: usize, rng: &mut SimRng) -> usize {
    sample_categorical(policy.row(state).iter().copied(), rng)
}

/// Samples `tau_{0:n}` given `(X_0, A_0) = start`, following `behaviour`
/// from `t = 1` on.
pub fn sample_trajectory(
    mdp: &Mdp,
    behaviour: &Policy,
    start: StatePair,
    n: usize,
    rng: &mut SimRng,
) -> Result<Trajectory> {
    mdp.check_pair(start)?;
    if n == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    let mut states = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n - 1);
    let mut rewards = Vec::with_capacity(n);
    let (mut x, mut a) = (start.state, start.action);
    for t in 0..n {
        let o = sample_outcome(mdp, x, a, rng);
        rewards.push(o.reward);
        states.push(o.next_state);
        x = o.next_state;
        if t + 1 < n {
            a = sample_action(behaviour, x, rng);
            actions.push(a);
        }
    }
    Ok(Trajectory {
        start,
        states,
        actions,
        rewards,
    })
}

/// `rho_{s:t} = prod_{i=s}^{t} pi(A_i|X_i) / mu(A_i|X_i)`; 1 when `s > t`.
pub fn importance_ratio(
    traj: &Trajectory,
    pi: &Policy,
    mu: &Policy,
    s: usize,
    t: usize,
) -> Result<f64> {
    if s > t {
        return Ok(1.0);
    }
    if s == 0 || t + 1 > traj.horizon() {
        return Err(invalid(format!(
            "ratio indices must satisfy 1 <= s and t <= n - 1, got s={s}, t={t}, n={}",
            traj.horizon()
        )));
    }
    let mut rho = 1.0;
    for i in s..=t {
        let (x, a) = (traj.state(i), traj.action(i));
        let m = mu.prob(x, a);
        if m <= 0.0 {
            return Err(CisError::SupportViolation { state: x, action: a });
        }
        rho *= pi.prob(x, a) / m;
    }
    Ok(rho)
}

/// `rho_{1:n-1}`, the full-trajectory ratio.
pub fn trajectory_ratio(traj: &Trajectory, pi: &Policy, mu: &Policy) -> Result<f64> {
    importance_ratio(traj, pi, mu, 1, traj.horizon() - 1)
}

/// `G + gamma^n V(X_n; pi)`.
pub fn bootstrapped_return<Q: ActionValues + ?Sized>(
    traj: &Trajectory,
    q: &Q,
    pi: &Policy,
    gamma: f64,
) -> f64 {
    let n = traj.horizon() as i32;
    traj.discounted_return(gamma) + gamma.powi(n) * state_value(q, pi, traj.final_state())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{build_chain, ChainSpec, LEFT, RIGHT};
    use crate::qfunction::TabularQ;
    use crate::rng::seeded;

    fn one_path() -> Mdp {
        // s0 --a0--> T with reward 1
        Mdp::new(
            0.9,
            1,
            vec![false, true],
            vec![1.0, 0.0],
            vec![vec![vec![Outcome::new(1, 1.0, 1.0)]], vec![]],
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_rows() {
        let err = Mdp::new(
            0.5,
            1,
            vec![false],
            vec![1.0],
            vec![vec![vec![Outcome::new(0, 1.0, 0.7)]]],
        );
        assert!(matches!(err, Err(CisError::InvalidInput(_))));
        let err = Mdp::new(1.0, 1, vec![true], vec![1.0], vec![vec![]]);
        assert!(err.is_err());
    }

    #[test]
    fn terminal_gets_stay() {
        let mdp = one_path();
        assert_eq!(mdp.actions_at(1), 1);
        assert_eq!(mdp.outcomes(1, STAY), &[Outcome::new(1, 0.0, 1.0)]);
    }

    #[test]
    fn deterministic_single_step() {
        let mdp = one_path();
        let mu = Policy::uniform(&mdp);
        let traj = sample_trajectory(&mdp, &mu, StatePair::new(0, 0), 1, &mut seeded(1)).unwrap();
        assert_eq!(traj.rewards(), &[1.0]);
        assert_eq!(traj.states(), &[1]);
    }

    #[test]
    fn sampling_pads_after_absorption() {
        let mdp = one_path();
        let mu = Policy::uniform(&mdp);
        let traj = sample_trajectory(&mdp, &mu, StatePair::new(0, 0), 4, &mut seeded(1)).unwrap();
        assert_eq!(traj.rewards(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(traj.states(), &[1, 1, 1, 1]);
        assert_eq!(traj.actions(), &[STAY, STAY, STAY]);
    }

    #[test]
    fn out_of_range_start_is_rejected() {
        let mdp = one_path();
        let mu = Policy::uniform(&mdp);
        let err = sample_trajectory(&mdp, &mu, StatePair::new(0, 3), 1, &mut seeded(1));
        assert!(matches!(err, Err(CisError::InvalidInput(_))));
        let err = sample_trajectory(&mdp, &mu, StatePair::new(5, 0), 1, &mut seeded(1));
        assert!(err.is_err());
    }

    #[test]
    fn noiseless_chain_walk() {
        let mdp = build_chain(&ChainSpec::default().with_noise(0.0)).unwrap();
        let mu = Policy::deterministic(&mdp, |_| RIGHT).unwrap();
        let traj = sample_trajectory(&mdp, &mu, StatePair::new(3, RIGHT), 2, &mut seeded(0)).unwrap();
        assert_eq!(traj.states(), &[4, 5]);
        assert_eq!(traj.rewards(), &[1.0, 1.0]);
    }

    #[test]
    fn noisy_chain_first_step_frequency() {
        let mdp = build_chain(&ChainSpec::default().with_noise(0.5)).unwrap();
        let mu = Policy::uniform(&mdp);
        let mut rng = seeded(11);
        let draws = 100_000;
        let hits = (0..draws)
            .filter(|_| {
                let t = sample_trajectory(&mdp, &mu, StatePair::new(3, RIGHT), 1, &mut rng).unwrap();
                t.state(1) == 4
            })
            .count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.75).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn support_condition_cases() {
        let mdp = build_chain(&ChainSpec::default()).unwrap();
        let mu = Policy::uniform(&mdp);
        let pi = Policy::deterministic(&mdp, |_| LEFT).unwrap();
        assert!(check_support_condition(&pi, &pi).unwrap());
        assert!(check_support_condition(&pi, &mu).unwrap());
        assert!(!check_support_condition(&mu, &pi).unwrap());

        let other = build_chain(&ChainSpec::default().with_extra_actions(1)).unwrap();
        let wide = Policy::uniform(&other);
        assert!(check_support_condition(&pi, &wide).is_err());
    }

    #[test]
    fn mixing() {
        let mdp = build_chain(&ChainSpec::default()).unwrap();
        let pi = Policy::new(
            &mdp,
            (0..mdp.n_states())
                .map(|x| if mdp.is_terminal(x) { vec![1.0] } else { vec![0.2, 0.8] })
                .collect(),
        )
        .unwrap();
        let mu = Policy::new(
            &mdp,
            (0..mdp.n_states())
                .map(|x| if mdp.is_terminal(x) { vec![1.0] } else { vec![0.6, 0.4] })
                .collect(),
        )
        .unwrap();
        assert_eq!(mix_policies(&pi, &mu, 1.0).unwrap(), pi);
        assert_eq!(mix_policies(&pi, &mu, 0.0).unwrap(), mu);
        let half = mix_policies(&pi, &mu, 0.5).unwrap();
        assert!((half.prob(2, RIGHT) - 0.6).abs() < 1e-15);
        assert!(mix_policies(&pi, &mu, 1.5).is_err());
        assert!(mix_policies(&pi, &mu, -0.1).is_err());
    }

    fn branch_pair() -> (Mdp, Policy, Policy) {
        // x0 --a--> x1 (reward 0); x1 has two actions to the terminal x2.
        let mdp = Mdp::new(
            0.5,
            2,
            vec![false, false, true],
            vec![1.0, 0.0, 0.0],
            vec![
                vec![vec![Outcome::new(1, 1.0, 1.0)], vec![Outcome::new(1, 2.0, 1.0)]],
                vec![vec![Outcome::new(2, 2.0, 1.0)], vec![Outcome::new(2, 2.0, 1.0)]],
                vec![],
            ],
        )
        .unwrap();
        let pi = Policy::new(&mdp, vec![vec![0.5, 0.5], vec![0.8, 0.2], vec![1.0]]).unwrap();
        let mu = Policy::new(&mdp, vec![vec![0.5, 0.5], vec![0.4, 0.6], vec![1.0]]).unwrap();
        (mdp, pi, mu)
    }

    #[test]
    fn ratio_examples() {
        let (_, pi, mu) = branch_pair();
        let traj = Trajectory::new(StatePair::new(0, 0), vec![1, 2], vec![0], vec![1.0, 2.0]).unwrap();
        assert_eq!(importance_ratio(&traj, &pi, &mu, 1, 0).unwrap(), 1.0);
        assert!((importance_ratio(&traj, &pi, &mu, 1, 1).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(importance_ratio(&traj, &pi, &pi, 1, 1).unwrap(), 1.0);
        assert!(importance_ratio(&traj, &pi, &mu, 0, 1).is_err());
    }

    #[test]
    fn ratio_support_violation() {
        let (mdp, pi, _) = branch_pair();
        let mu = Policy::new(&mdp, vec![vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0]]).unwrap();
        let traj = Trajectory::new(StatePair::new(0, 0), vec![1, 2], vec![0], vec![1.0, 2.0]).unwrap();
        assert_eq!(
            importance_ratio(&traj, &pi, &mu, 1, 1),
            Err(CisError::SupportViolation { state: 1, action: 0 })
        );
    }

    #[test]
    fn bootstrapped_return_examples() {
        let mdp = Mdp::new(
            0.5,
            1,
            vec![false, false],
            vec![1.0, 0.0],
            vec![
                vec![vec![Outcome::new(1, 1.0, 1.0)]],
                vec![vec![Outcome::new(1, 1.0, 1.0)]],
            ],
        )
        .unwrap();
        let pi = Policy::uniform(&mdp);
        let mut q = TabularQ::zeros(&mdp);
        q.set(1, 0, 2.0);
        let traj = Trajectory::new(StatePair::new(0, 0), vec![1, 1], vec![0], vec![1.0, 1.0]).unwrap();
        assert!((bootstrapped_return(&traj, &q, &pi, 0.5) - 2.0).abs() < 1e-15);
        let zero = TabularQ::zeros(&mdp);
        assert_eq!(bootstrapped_return(&traj, &zero, &pi, 0.5), traj.discounted_return(0.5));

        let single = one_path();
        let qs = TabularQ::zeros(&single);
        let t1 = Trajectory::new(StatePair::new(0, 0), vec![1], vec![], vec![3.0]).unwrap();
        assert_eq!(bootstrapped_return(&t1, &qs, &Policy::uniform(&single), 0.9), 3.0);
    }

    #[test]
    fn trajectory_length_checks() {
        assert!(Trajectory::new(StatePair::new(0, 0), vec![1], vec![0], vec![1.0]).is_err());
        assert!(Trajectory::new(StatePair::new(0, 0), vec![], vec![], vec![]).is_err());
    }
}
