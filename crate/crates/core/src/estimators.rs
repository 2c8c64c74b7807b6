//! Per-trajectory off-policy estimators of `((T^pi)^n Q)(x, a)`.
//!
//! Plain and per-decision importance sampling are computed directly from
//! action ratios. The conditional schemes replace ratios with conditional
//! expectations `E_mu[rho_{1:n-1} | Phi]` read from a [`WeightProvider`],
//! which is either an exact oracle or an online regression store.

use std::collections::HashMap;

use crate::conditioner::Conditioner;
use crate::error::{invalid, CisError, Result};
use crate::exact::{exact_conditional_weight, ConditionalWeightTable, EnumeratedDistribution};
use crate::mdp::{bootstrapped_return, trajectory_ratio, Policy, StatePair, Trajectory};
use crate::qfunction::{state_value, ActionValues};
use crate::regression::{target_for, WeightStore};

/// How an estimator weights the bootstrapped return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Ois,
    Pdis,
    /// Return term weighted by `E[rho | G]`, bootstrap by the raw ratio.
    Rcis,
    /// Reward `t` weighted by `E[rho | X_t, A_t, R_t]`, bootstrap by `E[rho | X_n]`.
    Scis,
    /// Reward `t` weighted by `E[rho | R_t]`, bootstrap by the raw ratio.
    RewardCis,
    /// Weight 1 everywhere.
    Uncorrected,
    /// Return term weighted by `E[rho | Phi]` for an arbitrary `Phi`.
    ReturnConditioned(Conditioner),
}

impl Scheme {
    pub fn needs_weights(&self) -> bool {
        matches!(
            self,
            Scheme::Rcis | Scheme::Scis | Scheme::RewardCis | Scheme::ReturnConditioned(_)
        )
    }

    /// Conditioners whose weights the scheme reads at horizon `n`.
    pub fn conditioners(&self, n: usize) -> Vec<Conditioner> {
        match *self {
            Scheme::Rcis => vec![Conditioner::Return],
            Scheme::Scis => (0..n)
                .map(Conditioner::StateActionRewardAt)
                .chain(std::iter::once(Conditioner::StateAt(n)))
                .collect(),
            Scheme::RewardCis => (0..n).map(Conditioner::RewardAt).collect(),
            Scheme::ReturnConditioned(c) => vec![c],
            Scheme::Ois | Scheme::Pdis | Scheme::Uncorrected => Vec::new(),
        }
    }

    fn base_name(&self) -> String {
        match self {
            Scheme::Ois => "ois".into(),
            Scheme::Pdis => "pdis".into(),
            Scheme::Rcis => "rcis".into(),
            Scheme::Scis => "scis".into(),
            Scheme::RewardCis => "reward_cis".into(),
            Scheme::Uncorrected => "uncorrected".into(),
            Scheme::ReturnConditioned(c) => format!("cis[{c}]"),
        }
    }
}

/// Where conditional weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightSource {
    Oracle,
    Online,
}

/// An estimator as named in configs and CSV output, e.g. `rcis:online`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EstimatorSpec {
    pub scheme: Scheme,
    pub source: WeightSource,
}

impl EstimatorSpec {
    pub fn new(scheme: Scheme, source: WeightSource) -> Self {
        Self { scheme, source }
    }

    pub fn oracle(scheme: Scheme) -> Self {
        Self::new(scheme, WeightSource::Oracle)
    }

    pub fn online(scheme: Scheme) -> Self {
        Self::new(scheme, WeightSource::Online)
    }
}

impl std::fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.scheme.base_name())?;
        if self.scheme.needs_weights() {
            match self.source {
                WeightSource::Oracle => f.write_str(":oracle")?,
                WeightSource::Online => f.write_str(":online")?,
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for EstimatorSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (name, source) = match s.rsplit_once(':') {
            Some((name, "oracle")) => (name, Some(WeightSource::Oracle)),
            Some((name, "online")) => (name, Some(WeightSource::Online)),
            Some(_) => return Err(format!("unknown weight source in estimator `{s}`")),
            None => (s, None),
        };
        let scheme = match name {
            "ois" => Scheme::Ois,
            "pdis" => Scheme::Pdis,
            "rcis" => Scheme::Rcis,
            "scis" => Scheme::Scis,
            "reward_cis" => Scheme::RewardCis,
            "uncorrected" => Scheme::Uncorrected,
            other => match other.strip_prefix("cis[").and_then(|r| r.strip_suffix(']')) {
                Some(inner) => Scheme::ReturnConditioned(inner.parse()?),
                None => return Err(format!("unknown estimator `{s}`")),
            },
        };
        if scheme.needs_weights() && source.is_none() {
            return Err(format!("estimator `{s}` needs a `:oracle` or `:online` suffix"));
        }
        Ok(EstimatorSpec::new(scheme, source.unwrap_or(WeightSource::Oracle)))
    }
}

/// Exact conditional weight tables for a set of start pairs.
#[derive(Debug, Clone, Default)]
pub struct OracleWeights {
    tables: HashMap<(StatePair, Conditioner), ConditionalWeightTable>,
}

impl OracleWeights {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds tables for every conditioner in `phis`, computed from `law`.
    pub fn insert_from(&mut self, law: &EnumeratedDistribution, phis: &[Conditioner]) {
        for &phi in phis {
            self.tables
                .insert((law.start, phi), exact_conditional_weight(law, phi));
        }
    }

    /// Tables for all conditioners used by `schemes` at the law's horizon.
    pub fn for_schemes(law: &EnumeratedDistribution, schemes: &[Scheme]) -> Self {
        let mut weights = Self::new();
        weights.extend_for_schemes(law, schemes);
        weights
    }

    pub fn extend_for_schemes(&mut self, law: &EnumeratedDistribution, schemes: &[Scheme]) {
        for scheme in schemes {
            self.insert_from(law, &scheme.conditioners(law.horizon));
        }
    }

    pub fn table(&self, start: StatePair, phi: Conditioner) -> Option<&ConditionalWeightTable> {
        self.tables.get(&(start, phi))
    }
}

/// Source of conditional weights consulted by the estimators.
#[derive(Debug, Clone, Copy)]
pub enum WeightProvider<'a> {
    Oracle(&'a OracleWeights),
    Online(&'a WeightStore),
}

impl WeightProvider<'_> {
    /// Conditional weight of the key `traj` realises under `phi`.
    pub fn weight(&self, phi: Conditioner, traj: &Trajectory, gamma: f64, raw_rho: f64) -> Result<f64> {
        let start = traj.start();
        let key = phi.key(traj, gamma);
        match self {
            WeightProvider::Oracle(oracle) => {
                let table = oracle.table(start, phi).ok_or_else(|| CisError::MissingWeight {
                    key: format!("{start} {phi} (no oracle table)"),
                })?;
                if table.horizon != traj.horizon() {
                    return Err(invalid(format!(
                        "oracle table for {start} has horizon {}, trajectory has {}",
                        table.horizon,
                        traj.horizon()
                    )));
                }
                table.get(&key).ok_or_else(|| CisError::MissingWeight {
                    key: format!("{start} {phi} {key}"),
                })
            }
            WeightProvider::Online(store) => store.query(start, phi, &key, raw_rho),
        }
    }
}

/// `rho_{1:n-1} (G + gamma^n V(X_n; pi))`.
pub fn ois_estimate<Q: ActionValues + ?Sized>(
    traj: &Trajectory,
    q: &Q,
    pi: &Policy,
    mu: &Policy,
    gamma: f64,
) -> Result<f64> {
    Ok(trajectory_ratio(traj, pi, mu)? * bootstrapped_return(traj, q, pi, gamma))
}

/// `sum_t rho_{1:t} gamma^t R_t + rho_{1:n-1} gamma^n V(X_n; pi)`.
pub fn pdis_estimate<Q: ActionValues + ?Sized>(
    traj: &Trajectory,
    q: &Q,
    pi: &Policy,
    mu: &Policy,
    gamma: f64,
) -> Result<f64> {
    let n = traj.horizon();
    let mut total = 0.0;
    let mut discount = 1.0;
    let mut rho = 1.0;
    for t in 0..n {
        if t >= 1 {
            let (x, a) = (traj.state(t), traj.action(t));
            let m = mu.prob(x, a);
            if m <= 0.0 {
                return Err(CisError::SupportViolation { state: x, action: a });
            }
            rho *= pi.prob(x, a) / m;
        }
        total += rho * discount * traj.reward(t);
        discount *= gamma;
    }
    Ok(total + rho * gamma.powi(n as i32) * state_value(q, pi, traj.final_state()))
}

/// Conditional-weight estimators and uncorrected returns.
pub fn conditional_estimate<Q: ActionValues + ?Sized>(
    traj: &Trajectory,
    q: &Q,
    pi: &Policy,
    mu: &Policy,
    gamma: f64,
    scheme: Scheme,
    weights: &WeightProvider<'_>,
) -> Result<f64> {
    let n = traj.horizon();
    let bootstrap = gamma.powi(n as i32) * state_value(q, pi, traj.final_state());
    match scheme {
        Scheme::Uncorrected => Ok(bootstrapped_return(traj, q, pi, gamma)),
        Scheme::Ois => ois_estimate(traj, q, pi, mu, gamma),
        Scheme::Pdis => pdis_estimate(traj, q, pi, mu, gamma),
        Scheme::Rcis | Scheme::ReturnConditioned(_) => {
            let phi = match scheme {
                Scheme::ReturnConditioned(c) => c,
                _ => Conditioner::Return,
            };
            let rho = trajectory_ratio(traj, pi, mu)?;
            let w = weights.weight(phi, traj, gamma, rho)?;
            Ok(w * traj.discounted_return(gamma) + rho * bootstrap)
        }
        Scheme::Scis | Scheme::RewardCis => {
            let rho = trajectory_ratio(traj, pi, mu)?;
            let mut total = 0.0;
            let mut discount = 1.0;
            for t in 0..n {
                let phi = if scheme == Scheme::Scis {
                    Conditioner::StateActionRewardAt(t)
                } else {
                    Conditioner::RewardAt(t)
                };
                let w = weights.weight(phi, traj, gamma, rho)?;
                total += w * discount * traj.reward(t);
                discount *= gamma;
            }
            let w_boot = if scheme == Scheme::Scis {
                weights.weight(Conditioner::StateAt(n), traj, gamma, rho)?
            } else {
                rho
            };
            Ok(total + w_boot * bootstrap)
        }
    }
}

/// Evaluates any scheme; `weights` is only consulted by conditional ones.
pub fn estimate<Q: ActionValues + ?Sized>(
    scheme: Scheme,
    traj: &Trajectory,
    q: &Q,
    pi: &Policy,
    mu: &Policy,
    gamma: f64,
    weights: Option<&WeightProvider<'_>>,
) -> Result<f64> {
    match (scheme.needs_weights(), weights) {
        (false, _) => match scheme {
            Scheme::Ois => ois_estimate(traj, q, pi, mu, gamma),
            Scheme::Pdis => pdis_estimate(traj, q, pi, mu, gamma),
            _ => Ok(bootstrapped_return(traj, q, pi, gamma)),
        },
        (true, Some(w)) => conditional_estimate(traj, q, pi, mu, gamma, scheme, w),
        (true, None) => Err(invalid(format!(
            "scheme {} needs a weight provider",
            scheme.base_name()
        ))),
    }
}

/// Adds one trajectory's ratio to the store under every conditioner the
/// scheme reads (the update half of update-then-query).
pub fn observe_trajectory(
    store: &mut WeightStore,
    scheme: Scheme,
    traj: &Trajectory,
    pi: &Policy,
    mu: &Policy,
    gamma: f64,
) -> Result<()> {
    let phis = scheme.conditioners(traj.horizon());
    if phis.is_empty() {
        return Ok(());
    }
    let rho = trajectory_ratio(traj, pi, mu)?;
    for phi in phis {
        store.observe(
            traj.start(),
            phi,
            phi.key(traj, gamma),
            rho,
            target_for(phi, traj, gamma),
        )?;
    }
    Ok(())
}
