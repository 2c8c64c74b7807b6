//! Online conditional-weight regression.
//!
//! The regression of the trajectory ratio on a conditioner key is solved
//! exactly per observed key: with the plain squared loss the minimiser is
//! the group mean of the ratios, with the target-weighted loss it is the
//! `psi^2`-weighted group mean.

use std::collections::HashMap;
use std::io::Write;

use crate::conditioner::{Conditioner, GroupKey};
use crate::error::{invalid, CisError, Result};
use crate::mdp::{trajectory_ratio, Policy, StatePair, Trajectory};

/// Loss minimised per key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// `E[(f(Phi) - rho)^2]`
    #[default]
    Plain,
    /// `E[((f(Phi) - rho) Psi)^2]`
    PsiWeighted,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Plain => "plain",
            Objective::PsiWeighted => "psi-weighted",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(Objective::Plain),
            "psi-weighted" => Ok(Objective::PsiWeighted),
            other => Err(format!("unknown objective `{other}` (expected plain or psi-weighted)")),
        }
    }
}

/// What a query returns for a key that was never observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fallback {
    /// The caller's raw trajectory ratio (the single-sample minimiser).
    #[default]
    RawRatio,
    Disabled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Accumulator {
    count: u64,
    sum_rho: f64,
    sum_psi2: f64,
    sum_rho_psi2: f64,
}

impl Accumulator {
    fn minimiser(&self, objective: Objective) -> f64 {
        match objective {
            Objective::PsiWeighted if self.sum_psi2 > 0.0 => self.sum_rho_psi2 / self.sum_psi2,
            // all observed targets were zero: the weighted loss is flat, keep the plain mean
            _ => self.sum_rho / self.count as f64,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    objective: Objective,
    fallback: Fallback,
    entries: HashMap<(StatePair, Conditioner), HashMap<GroupKey, Accumulator>>,
}

impl WeightStore {
    pub fn new(objective: Objective, fallback: Fallback) -> Self {
        Self {
            objective,
            fallback,
            entries: HashMap::new(),
        }
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(HashMap::is_empty)
    }

    pub fn observe(
        &mut self,
        start: StatePair,
        phi: Conditioner,
        key: GroupKey,
        rho: f64,
        psi: f64,
    ) -> Result<()> {
        if !rho.is_finite() || rho < 0.0 || !psi.is_finite() {
            return Err(invalid(format!(
                "observations must be finite with a non-negative ratio, got rho={rho}, psi={psi}"
            )));
        }
        let acc = self
            .entries
            .entry((start, phi))
            .or_default()
            .entry(key)
            .or_default();
        let psi2 = psi * psi;
        acc.count += 1;
        acc.sum_rho += rho;
        acc.sum_psi2 += psi2;
        acc.sum_rho_psi2 += rho * psi2;
        Ok(())
    }

    /// Empirical minimiser for the key, or the fallback when unseen.
    pub fn query(
        &self,
        start: StatePair,
        phi: Conditioner,
        key: &GroupKey,
        raw_rho: f64,
    ) -> Result<f64> {
        match self.entries.get(&(start, phi)).and_then(|m| m.get(key)) {
            Some(acc) => Ok(acc.minimiser(self.objective)),
            None => match self.fallback {
                Fallback::RawRatio => Ok(raw_rho),
                Fallback::Disabled => Err(CisError::MissingWeight {
                    key: format!("{start} {phi} {key}"),
                }),
            },
        }
    }

    /// Number of observations recorded for a key.
    pub fn count(&self, start: StatePair, phi: Conditioner, key: &GroupKey) -> u64 {
        self.entries
            .get(&(start, phi))
            .and_then(|m| m.get(key))
            .map_or(0, |acc| acc.count)
    }

    /// Rows `x,a,conditioner,key,count,weight`, sorted for stable output.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "x,a,conditioner,key,count,weight")?;
        let mut rows: Vec<_> = self
            .entries
            .iter()
            .flat_map(|((start, phi), m)| m.iter().map(move |(key, acc)| ((start, phi, key), acc)))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        for ((start, phi, key), acc) in rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                start.state,
                start.action,
                phi,
                key,
                acc.count,
                acc.minimiser(self.objective)
            )?;
        }
        Ok(())
    }
}

/// Target `Psi` paired with a conditioner for the weighted objective:
/// the truncated return for return-level conditioners, `R_t` for the
/// per-reward ones, 1 otherwise.
pub fn target_for(phi: Conditioner, traj: &Trajectory, gamma: f64) -> f64 {
    match phi {
        Conditioner::Return | Conditioner::RewardSequence | Conditioner::FullTrajectory => {
            traj.discounted_return(gamma)
        }
        Conditioner::RewardAt(t)
        | Conditioner::StateActionRewardAt(t)
        | Conditioner::PerDecisionPrefix(t) => traj.reward(t),
        Conditioner::Constant | Conditioner::StateAt(_) => 1.0,
    }
}

/// Folds `observe` over a batch sharing one horizon.
pub fn fit_batch(
    trajectories: &[Trajectory],
    phi: Conditioner,
    pi: &Policy,
    mu: &Policy,
    gamma: f64,
    objective: Objective,
) -> Result<WeightStore> {
    let mut store = WeightStore::new(objective, Fallback::RawRatio);
    if let Some(first) = trajectories.first() {
        let n = first.horizon();
        if trajectories.iter().any(|t| t.horizon() != n) {
            return Err(invalid("all trajectories in a batch must share one horizon"));
        }
    }
    for traj in trajectories {
        let rho = trajectory_ratio(traj, pi, mu)?;
        store.observe(
            traj.start(),
            phi,
            phi.key(traj, gamma),
            rho,
            target_for(phi, traj, gamma),
        )?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioner::quantize;

    fn key(v: f64) -> GroupKey {
        GroupKey::from_tokens(vec![quantize(v)])
    }

    const S: StatePair = StatePair { state: 0, action: 0 };

    #[test]
    fn plain_mean() {
        let mut store = WeightStore::default();
        store.observe(S, Conditioner::Return, key(1.0), 1.6, 1.0).unwrap();
        assert_eq!(store.query(S, Conditioner::Return, &key(1.0), 9.0).unwrap(), 1.6);
        store.observe(S, Conditioner::Return, key(1.0), 0.4, 1.0).unwrap();
        assert!((store.query(S, Conditioner::Return, &key(1.0), 9.0).unwrap() - 1.0).abs() < 1e-15);
        for _ in 0..3 {
            store.observe(S, Conditioner::Return, key(2.0), 2.0, 0.0).unwrap();
        }
        assert_eq!(store.query(S, Conditioner::Return, &key(2.0), 0.0).unwrap(), 2.0);
    }

    #[test]
    fn psi_weighted_ignores_zero_targets() {
        let mut store = WeightStore::new(Objective::PsiWeighted, Fallback::RawRatio);
        store.observe(S, Conditioner::Return, key(1.0), 2.0, 1.0).unwrap();
        store.observe(S, Conditioner::Return, key(1.0), 0.0, 0.0).unwrap();
        assert_eq!(store.query(S, Conditioner::Return, &key(1.0), 5.0).unwrap(), 2.0);
    }

    #[test]
    fn fallbacks() {
        let store = WeightStore::default();
        assert_eq!(store.query(S, Conditioner::Return, &key(3.0), 1.3).unwrap(), 1.3);
        let strict = WeightStore::new(Objective::Plain, Fallback::Disabled);
        assert!(matches!(
            strict.query(S, Conditioner::Return, &key(3.0), 1.3),
            Err(CisError::MissingWeight { .. })
        ));
    }

    #[test]
    fn rejects_bad_observations() {
        let mut store = WeightStore::default();
        assert!(store.observe(S, Conditioner::Return, key(0.0), -1.0, 1.0).is_err());
        assert!(store.observe(S, Conditioner::Return, key(0.0), f64::NAN, 1.0).is_err());
        assert!(store.observe(S, Conditioner::Return, key(0.0), 1.0, f64::INFINITY).is_err());
        assert!(store.is_empty());
    }

    #[test]
    fn conditioners_and_starts_are_separate() {
        let mut store = WeightStore::default();
        store.observe(S, Conditioner::Return, key(1.0), 3.0, 1.0).unwrap();
        let other = StatePair::new(1, 0);
        assert_eq!(store.query(other, Conditioner::Return, &key(1.0), 0.5).unwrap(), 0.5);
        assert_eq!(store.query(S, Conditioner::RewardAt(0), &key(1.0), 0.5).unwrap(), 0.5);
    }

    #[test]
    fn dump() {
        let mut store = WeightStore::default();
        store.observe(S, Conditioner::Return, key(1.0), 3.0, 1.0).unwrap();
        let mut buf = Vec::new();
        store.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "0,0,return,[1000000000000],1,3");
    }
}
