//! The chain environment and random evaluation instances.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};

use crate::error::{invalid, Result};
use crate::mdp::{Mdp, Outcome, Policy, StatePair};
use crate::qfunction::TabularQ;
use crate::rng::SimRng;

/// Direction of action `a` is `a % 2`: even actions move left, odd right.
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Chain layout: state 0 and state `n_interior + 1` absorb, states
/// `1..=n_interior` form the line.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub n_interior: usize,
    pub noise: f64,
    pub extra_actions: usize,
    pub step_reward: f64,
    pub absorb_reward: f64,
    /// Defaults to the third interior state from the left.
    pub initial_state: Option<usize>,
    pub gamma: f64,
}

impl Default for ChainSpec {
    fn default() -> Self {
        Self {
            n_interior: 6,
            noise: 0.1,
            extra_actions: 0,
            step_reward: 1.0,
            absorb_reward: 10.0,
            initial_state: None,
            gamma: 0.99,
        }
    }
}

impl ChainSpec {
    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_extra_actions(mut self, extra: usize) -> Self {
        self.extra_actions = extra;
        self
    }

    pub fn with_length(mut self, n_interior: usize) -> Self {
        self.n_interior = n_interior;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn n_actions(&self) -> usize {
        2 * (1 + self.extra_actions)
    }

    pub fn start_state(&self) -> usize {
        self.initial_state.unwrap_or(3.min(self.n_interior))
    }
}

pub fn build_chain(spec: &ChainSpec) -> Result<Mdp> {
    if spec.n_interior < 2 {
        return Err(invalid("the chain needs at least two interior states"));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(invalid(format!("noise must lie in [0, 1], got {}", spec.noise)));
    }
    let k = spec.n_interior;
    let n_states = k + 2;
    let start = spec.start_state();
    if start == 0 || start > k {
        return Err(invalid(format!("initial state {start} is not an interior state")));
    }
    let reward_for = |next: usize| {
        if next == 0 || next == k + 1 {
            spec.absorb_reward
        } else {
            spec.step_reward
        }
    };
    let n_actions = spec.n_actions();
    let mut terminal = vec![false; n_states];
    terminal[0] = true;
    terminal[k + 1] = true;
    let mut initial = vec![0.0; n_states];
    initial[start] = 1.0;

    let transitions = (0..n_states)
        .map(|x| {
            if terminal[x] {
                return Vec::new();
            }
            (0..n_actions)
                .map(|a| {
                    let (left, right) = (x - 1, x + 1);
                    let intended = if a % 2 == RIGHT { right } else { left };
                    let other = if a % 2 == RIGHT { left } else { right };
                    let p_intended = (1.0 - spec.noise) + spec.noise / 2.0;
                    let p_other = spec.noise / 2.0;
                    let mut outcomes = vec![Outcome::new(intended, reward_for(intended), p_intended)];
                    if p_other > 0.0 {
                        outcomes.push(Outcome::new(other, reward_for(other), p_other));
                    }
                    outcomes
                })
                .collect()
        })
        .collect();
    Mdp::new(spec.gamma, n_actions, terminal, initial, transitions)
}

/// Uniform draw from the simplex at every non-terminal state, via
/// normalised exponentials.
pub fn random_dirichlet_policy(mdp: &Mdp, rng: &mut SimRng) -> Policy {
    let probs = (0..mdp.n_states())
        .map(|x| {
            let k = mdp.actions_at(x);
            if mdp.is_terminal(x) || k == 1 {
                return vec![1.0; k];
            }
            let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            let mut row: Vec<f64> = draws.iter().map(|d| d / total).collect();
            // absorb rounding so the row sums to one within the tolerance
            let drift = 1.0 - row.iter().sum::<f64>();
            row[k - 1] += drift;
            row
        })
        .collect();
    Policy::new(mdp, probs).expect("dirichlet rows are valid distributions")
}

/// How the scale parameter of the random Q-function is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QScale {
    Variance,
    StdDev,
}

impl QScale {
    pub fn name(self) -> &'static str {
        match self {
            QScale::Variance => "variance",
            QScale::StdDev => "std",
        }
    }
}

impl std::str::FromStr for QScale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "variance" => Ok(QScale::Variance),
            "std" => Ok(QScale::StdDev),
            other => Err(format!("unknown q-scale `{other}` (expected variance or std)")),
        }
    }
}

/// I.i.d. Gaussian entries on non-terminal pairs, zero on terminal states.
pub fn random_q_function(mdp: &Mdp, scale: f64, kind: QScale, rng: &mut SimRng) -> Result<TabularQ> {
    if !(scale > 0.0) {
        return Err(invalid(format!("Q scale must be positive, got {scale}")));
    }
    let sd = match kind {
        QScale::Variance => scale.sqrt(),
        QScale::StdDev => scale,
    };
    let normal = Normal::new(0.0, sd).map_err(|e| invalid(e.to_string()))?;
    let mut q = TabularQ::zeros(mdp);
    for StatePair { state, action } in mdp.nonterminal_pairs() {
        q.set(state, action, normal.sample(rng));
    }
    Ok(q)
}

/// Two-step instance whose only branching is the action at `t = 1`:
/// `x0 -> x1` with reward 0.5, then either action of `x1` reaches the
/// terminal `x2` with reward 1, so `G = 1` on both branches (`gamma = 0.5`).
/// Returns `(mdp, target, behaviour)` with behaviour `(0.5, 0.5)` and target
/// `(0.9, 0.1)` at `x1`.
pub fn branch_mdp() -> (Mdp, Policy, Policy) {
    let mdp = Mdp::new(
        0.5,
        2,
        vec![false, false, true],
        vec![1.0, 0.0, 0.0],
        vec![
            vec![vec![Outcome::new(1, 0.5, 1.0)], vec![Outcome::new(1, 0.5, 1.0)]],
            vec![vec![Outcome::new(2, 1.0, 1.0)], vec![Outcome::new(2, 1.0, 1.0)]],
            vec![],
        ],
    )
    .expect("branch MDP is valid");
    let mu = Policy::new(&mdp, vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![1.0]]).expect("valid policy");
    let pi = Policy::new(&mdp, vec![vec![0.5, 0.5], vec![0.9, 0.1], vec![1.0]]).expect("valid policy");
    (mdp, pi, mu)
}

/// Shape of a randomly generated finite MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMdpSpec {
    pub n_nonterminal: usize,
    pub n_terminal: usize,
    pub n_actions: usize,
    pub max_outcomes: usize,
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

impl Default for RandomMdpSpec {
    fn default() -> Self {
        Self {
            n_nonterminal: 3,
            n_terminal: 1,
            n_actions: 2,
            max_outcomes: 2,
            rewards: vec![0.0, 1.0, 2.0],
            gamma: 0.5,
        }
    }
}

/// A random MDP with rewards drawn from a small set, so that returns of
/// different trajectories collide. Non-terminal states come first.
pub fn random_mdp(spec: &RandomMdpSpec, rng: &mut SimRng) -> Mdp {
    let n = spec.n_nonterminal + spec.n_terminal;
    let mut terminal = vec![false; n];
    for flag in terminal.iter_mut().skip(spec.n_nonterminal) {
        *flag = true;
    }
    let mut initial = vec![0.0; n];
    initial[0] = 1.0;
    let transitions = (0..n)
        .map(|x| {
            if terminal[x] {
                return Vec::new();
            }
            (0..spec.n_actions)
                .map(|_| {
                    let k = rng.random_range(1..=spec.max_outcomes);
                    let mut outcomes: Vec<Outcome> = Vec::with_capacity(k);
                    let weights: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
                    let total: f64 = weights.iter().sum();
                    for w in weights {
                        let next = rng.random_range(0..n);
                        let reward = spec.rewards[rng.random_range(0..spec.rewards.len())];
                        match outcomes
                            .iter_mut()
                            .find(|o| o.next_state == next && o.reward == reward)
                        {
                            Some(o) => o.prob += w / total,
                            None => outcomes.push(Outcome::new(next, reward, w / total)),
                        }
                    }
                    let drift = 1.0 - outcomes.iter().map(|o| o.prob).sum::<f64>();
                    outcomes[0].prob += drift;
                    outcomes
                })
                .collect()
        })
        .collect();
    Mdp::new(spec.gamma, spec.n_actions, terminal, initial, transitions)
        .expect("random MDP construction is valid")
}
