//! Conditioning functionals of a trajectory and their grouping keys.

use crate::mdp::Trajectory;

/// Scale used to quantise real-valued key components (12 decimal digits).
const KEY_SCALE: f64 = 1e12;

/// Rounds a real to 12 decimal digits so float noise in sums of the same
/// rewards maps to a single key.
pub fn quantize(value: f64) -> i64 {
    (value * KEY_SCALE).round() as i64
}

/// Canonical, hashable value of a conditioner on one trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey(Vec<i64>);

impl GroupKey {
    pub fn from_tokens(tokens: Vec<i64>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[i64] {
        &self.0
    }
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, tok) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{tok}")?;
        }
        write!(f, "]")
    }
}

/// A functional `Phi` of a truncated trajectory.
///
/// Real components (rewards, returns) enter keys through [`quantize`];
/// states and actions enter as indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Conditioner {
    /// The whole trajectory; recovers plain importance sampling.
    FullTrajectory,
    /// A constant; the conditional weight is 1 (uncorrected returns).
    Constant,
    /// The truncated discounted return `G`.
    Return,
    /// The reward `R_t`.
    RewardAt(usize),
    /// `(X_t, A_t, R_t)`.
    StateActionRewardAt(usize),
    /// `(X_{0:t}, A_{0:t}, R_t)`; recovers the per-decision weight.
    PerDecisionPrefix(usize),
    /// `(R_0, ..., R_{n-1})`.
    RewardSequence,
    /// `X_t`; used to weight the bootstrap term.
    StateAt(usize),
}

impl Conditioner {
    pub fn key(&self, traj: &Trajectory, gamma: f64) -> GroupKey {
        let tokens = match *self {
            Conditioner::FullTrajectory => {
                let n = traj.horizon();
                let mut v = Vec::with_capacity(3 * n + 1);
                for t in 0..n {
                    v.push(traj.state(t) as i64);
                    v.push(traj.action(t) as i64);
                    v.push(quantize(traj.reward(t)));
                }
                v.push(traj.final_state() as i64);
                v
            }
            Conditioner::Constant => Vec::new(),
            Conditioner::Return => vec![quantize(traj.discounted_return(gamma))],
            Conditioner::RewardAt(t) => vec![quantize(traj.reward(t))],
            Conditioner::StateActionRewardAt(t) => vec![
                traj.state(t) as i64,
                traj.action(t) as i64,
                quantize(traj.reward(t)),
            ],
            Conditioner::PerDecisionPrefix(t) => {
                let mut v = Vec::with_capacity(2 * t + 3);
                for i in 0..=t {
                    v.push(traj.state(i) as i64);
                    v.push(traj.action(i) as i64);
                }
                v.push(quantize(traj.reward(t)));
                v
            }
            Conditioner::RewardSequence => traj.rewards().iter().map(|&r| quantize(r)).collect(),
            Conditioner::StateAt(t) => vec![traj.state(t) as i64],
        };
        GroupKey(tokens)
    }

    /// Whether the truncated return is a function of this conditioner.
    pub fn is_scf_for_return(&self) -> bool {
        matches!(
            self,
            Conditioner::Return | Conditioner::RewardSequence | Conditioner::FullTrajectory
        )
    }

    /// Whether the single reward `R_t` is a function of this conditioner.
    pub fn is_scf_for_reward(&self, t: usize) -> bool {
        match *self {
            Conditioner::RewardAt(s)
            | Conditioner::StateActionRewardAt(s)
            | Conditioner::PerDecisionPrefix(s) => s == t,
            Conditioner::FullTrajectory | Conditioner::RewardSequence => true,
            _ => false,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Conditioner::FullTrajectory => "full".into(),
            Conditioner::Constant => "constant".into(),
            Conditioner::Return => "return".into(),
            Conditioner::RewardAt(t) => format!("reward@{t}"),
            Conditioner::StateActionRewardAt(t) => format!("sar@{t}"),
            Conditioner::PerDecisionPrefix(t) => format!("prefix@{t}"),
            Conditioner::RewardSequence => "rewards".into(),
            Conditioner::StateAt(t) => format!("state@{t}"),
        }
    }
}

impl std::fmt::Display for Conditioner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl std::str::FromStr for Conditioner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let indexed = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| format!("bad time index in conditioner `{s}`"))
        };
        match s {
            "full" => Ok(Conditioner::FullTrajectory),
            "constant" => Ok(Conditioner::Constant),
            "return" => Ok(Conditioner::Return),
            "rewards" => Ok(Conditioner::RewardSequence),
            _ => match s.split_once('@') {
                Some(("reward", t)) => Ok(Conditioner::RewardAt(indexed(t)?)),
                Some(("sar", t)) => Ok(Conditioner::StateActionRewardAt(indexed(t)?)),
                Some(("prefix", t)) => Ok(Conditioner::PerDecisionPrefix(indexed(t)?)),
                Some(("state", t)) => Ok(Conditioner::StateAt(indexed(t)?)),
                _ => Err(format!("unknown conditioner `{s}`")),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::StatePair;

    fn traj() -> Trajectory {
        Trajectory::new(StatePair::new(3, 1), vec![4, 5, 4], vec![1, 0], vec![1.0, 1.0, 10.0]).unwrap()
    }

    #[test]
    fn keys() {
        let t = traj();
        assert_eq!(Conditioner::Constant.key(&t, 0.9).tokens(), &[] as &[i64]);
        assert_eq!(
            Conditioner::StateActionRewardAt(1).key(&t, 0.9).tokens(),
            &[4, 1, quantize(1.0)]
        );
        assert_eq!(Conditioner::StateAt(3).key(&t, 0.9).tokens(), &[4]);
        assert_eq!(
            Conditioner::PerDecisionPrefix(1).key(&t, 0.9).tokens(),
            &[3, 1, 4, 1, quantize(1.0)]
        );
        assert_eq!(Conditioner::FullTrajectory.key(&t, 0.9).tokens().len(), 10);
    }

    #[test]
    fn float_noise_merges() {
        // 0.1 + 0.2 != 0.3 in binary, but they share a key.
        assert_eq!(quantize(0.1 + 0.2), quantize(0.3));
        assert_ne!(quantize(1.0), quantize(1.0 + 1e-9));
    }

    #[test]
    fn scf_flags() {
        assert!(Conditioner::Return.is_scf_for_return());
        assert!(Conditioner::RewardSequence.is_scf_for_return());
        assert!(!Conditioner::Constant.is_scf_for_return());
        assert!(Conditioner::StateActionRewardAt(2).is_scf_for_reward(2));
        assert!(!Conditioner::StateActionRewardAt(2).is_scf_for_reward(1));
        assert!(!Conditioner::Constant.is_scf_for_reward(0));
    }

    #[test]
    fn names_round_trip() {
        for c in [
            Conditioner::FullTrajectory,
            Conditioner::Constant,
            Conditioner::Return,
            Conditioner::RewardAt(2),
            Conditioner::StateActionRewardAt(0),
            Conditioner::PerDecisionPrefix(4),
            Conditioner::RewardSequence,
            Conditioner::StateAt(3),
        ] {
            assert_eq!(c.name().parse::<Conditioner>().unwrap(), c);
        }
        assert!("sar@x".parse::<Conditioner>().is_err());
    }
}
