//! Off-policy n-step TD evaluation driven by the per-trajectory estimators.
//!
//! Each episode is sampled under the behaviour policy from the initial
//! distribution. Every visited `(X_t, A_t)` gets an n-step window whose
//! estimate becomes the regression target for the representation. Windows
//! that run past absorption are padded with the terminal stay action
//! (reward 0, ratio 1), which leaves every estimator value unchanged.

use crate::error::{invalid, Result};
use crate::estimators::{estimate, observe_trajectory, EstimatorSpec, OracleWeights, WeightProvider, WeightSource};
use crate::mdp::{sample_action, sample_outcome, Mdp, Policy, StatePair, Trajectory, STAY};
use crate::mdp::sample_categorical;
use crate::qfunction::{ActionValues, QRepr, ReprKind, TabularQ};
use crate::regression::{Fallback, Objective, WeightStore};
use crate::rng::SimRng;

/// Which visited pairs receive an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateMode {
    /// Every visited `(X_t, A_t)`, in order.
    #[default]
    PerVisit,
    /// Only the episode's first pair.
    PerEpisode,
}

impl UpdateMode {
    pub fn name(self) -> &'static str {
        match self {
            UpdateMode::PerVisit => "per-visit",
            UpdateMode::PerEpisode => "per-episode",
        }
    }
}

impl std::str::FromStr for UpdateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per-visit" => Ok(UpdateMode::PerVisit),
            "per-episode" => Ok(UpdateMode::PerEpisode),
            other => Err(format!("unknown update mode `{other}` (expected per-visit or per-episode)")),
        }
    }
}

/// Order of the online store's write and read for one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightOrder {
    #[default]
    UpdateThenQuery,
    QueryThenUpdate,
}

impl WeightOrder {
    pub fn name(self) -> &'static str {
        match self {
            WeightOrder::UpdateThenQuery => "update-then-query",
            WeightOrder::QueryThenUpdate => "query-then-update",
        }
    }
}

impl std::str::FromStr for WeightOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "update-then-query" => Ok(WeightOrder::UpdateThenQuery),
            "query-then-update" => Ok(WeightOrder::QueryThenUpdate),
            other => Err(format!(
                "unknown weight order `{other}` (expected update-then-query or query-then-update)"
            )),
        }
    }
}

/// Weights of the non-terminal pairs in the MSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MseWeighting {
    #[default]
    Uniform,
    /// `nu(x) mu(a|x)`, renormalised over non-terminal pairs.
    Initial,
}

impl MseWeighting {
    pub fn name(self) -> &'static str {
        match self {
            MseWeighting::Uniform => "uniform",
            MseWeighting::Initial => "initial",
        }
    }
}

impl std::str::FromStr for MseWeighting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(MseWeighting::Uniform),
            "initial" => Ok(MseWeighting::Initial),
            other => Err(format!("unknown MSE weighting `{other}` (expected uniform or initial)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningSettings {
    pub n: usize,
    pub episodes: usize,
    pub alpha: f64,
    pub episode_cap: usize,
    pub update_mode: UpdateMode,
    pub weight_order: WeightOrder,
    pub mse_weighting: MseWeighting,
    pub objective: Objective,
}

impl Default for LearningSettings {
    fn default() -> Self {
        Self {
            n: 3,
            episodes: 2000,
            alpha: 0.1,
            episode_cap: 100,
            update_mode: UpdateMode::PerVisit,
            weight_order: WeightOrder::UpdateThenQuery,
            mse_weighting: MseWeighting::Uniform,
            objective: Objective::Plain,
        }
    }
}

/// One behaviour episode `X_0 A_0 R_0 X_1 ... X_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    states: Vec<usize>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    update_steps: usize,
}

impl Episode {
    /// Number of transitions sampled.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Number of leading steps that start an update window.
    pub fn update_steps(&self) -> usize {
        self.update_steps
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// The n-step window starting at `t`, padded past absorption.
    pub fn window(&self, t: usize, n: usize) -> Result<Trajectory> {
        let len = self.len();
        if t >= len {
            return Err(invalid(format!("window start {t} is past the episode end {len}")));
        }
        let last = self.states[len];
        let state_at = |i: usize| if i <= len { self.states[i] } else { last };
        let states = (t + 1..=t + n).map(state_at).collect();
        let actions = (t + 1..t + n)
            .map(|i| if i < len { self.actions[i] } else { STAY })
            .collect();
        let rewards = (t..t + n)
            .map(|i| if i < len { self.rewards[i] } else { 0.0 })
            .collect();
        Trajectory::new(StatePair::new(self.states[t], self.actions[t]), states, actions, rewards)
    }
}

/// Samples an episode under `mu` from the initial distribution.
///
/// Runs until absorption or `cap` steps; a capped episode is extended by
/// `n - 1` further steps so every window starting before the cap is full.
pub fn sample_episode(mdp: &Mdp, mu: &Policy, cap: usize, n: usize, rng: &mut SimRng) -> Episode {
    let mut x = sample_categorical(mdp.initial_dist().iter().copied(), rng);
    let limit = cap + n.saturating_sub(1);
    let mut states = vec![x];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    while !mdp.is_terminal(x) && rewards.len() < limit {
        let a = sample_action(mu, x, rng);
        let o = sample_outcome(mdp, x, a, rng);
        actions.push(a);
        rewards.push(o.reward);
        states.push(o.next_state);
        x = o.next_state;
    }
    let update_steps = rewards.len().min(cap);
    Episode {
        states,
        actions,
        rewards,
        update_steps,
    }
}

/// Final representation and MSE after each episode (index 0 is the
/// initial representation).
#[derive(Debug, Clone, PartialEq)]
pub struct LearningRun {
    pub repr: QRepr,
    pub mse: Vec<f64>,
}

/// Weighted MSE of a representation against `Q^pi`.
pub struct MseProbe {
    pairs: Vec<(StatePair, f64)>,
    q_pi: TabularQ,
}

impl MseProbe {
    pub fn new(mdp: &Mdp, mu: &Policy, q_pi: &TabularQ, weighting: MseWeighting) -> Result<Self> {
        let pairs = mdp.nonterminal_pairs();
        if pairs.is_empty() {
            return Err(invalid("the MDP has no non-terminal state-action pairs"));
        }
        let raw: Vec<f64> = match weighting {
            MseWeighting::Uniform => vec![1.0; pairs.len()],
            MseWeighting::Initial => pairs
                .iter()
                .map(|p| mdp.initial_dist()[p.state] * mu.prob(p.state, p.action))
                .collect(),
        };
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(invalid("MSE weighting puts no mass on non-terminal pairs"));
        }
        Ok(Self {
            pairs: pairs.into_iter().zip(raw.into_iter().map(|w| w / total)).collect(),
            q_pi: q_pi.clone(),
        })
    }

    pub fn mse<Q: ActionValues + ?Sized>(&self, q: &Q) -> f64 {
        self.pairs
            .iter()
            .map(|&(p, w)| {
                let d = q.value(p.state, p.action) - self.q_pi.value(p.state, p.action);
                w * d * d
            })
            .sum()
    }
}

/// Runs n-step off-policy TD with the given estimator as the target.
///
/// Oracle estimators read `oracle`, which must hold tables for every
/// non-terminal start pair at horizon `settings.n`; online ones build a
/// fresh store owned by the run.
#[allow(clippy::too_many_arguments)]
pub fn run_policy_evaluation(
    mdp: &Mdp,
    pi: &Policy,
    mu: &Policy,
    spec: EstimatorSpec,
    oracle: Option<&OracleWeights>,
    q_pi: &TabularQ,
    repr: ReprKind,
    settings: &LearningSettings,
    rng: &mut SimRng,
) -> Result<LearningRun> {
    if settings.n == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    if !(settings.alpha > 0.0) {
        return Err(invalid("learning rate must be positive"));
    }
    if settings.episode_cap == 0 {
        return Err(invalid("episode cap must be at least 1"));
    }
    let scheme = spec.scheme;
    let online = scheme.needs_weights() && spec.source == WeightSource::Online;
    let oracle = match (scheme.needs_weights() && !online, oracle) {
        (true, None) => return Err(invalid(format!("estimator {spec} needs oracle weights"))),
        (_, o) => o,
    };
    let gamma = mdp.gamma();
    let probe = MseProbe::new(mdp, mu, q_pi, settings.mse_weighting)?;
    let mut q = QRepr::zeros(repr, mdp)?;
    let mut store = WeightStore::new(settings.objective, Fallback::RawRatio);
    let mut mse = Vec::with_capacity(settings.episodes + 1);
    mse.push(probe.mse(&q));

    for _ in 0..settings.episodes {
        let episode = sample_episode(mdp, mu, settings.episode_cap, settings.n, rng);
        let steps = match settings.update_mode {
            UpdateMode::PerVisit => episode.update_steps(),
            UpdateMode::PerEpisode => episode.update_steps().min(1),
        };
        for t in 0..steps {
            let window = episode.window(t, settings.n)?;
            let target = if online {
                if settings.weight_order == WeightOrder::UpdateThenQuery {
                    observe_trajectory(&mut store, scheme, &window, pi, mu, gamma)?;
                }
                let provider = WeightProvider::Online(&store);
                let value = estimate(scheme, &window, &q, pi, mu, gamma, Some(&provider))?;
                if settings.weight_order == WeightOrder::QueryThenUpdate {
                    observe_trajectory(&mut store, scheme, &window, pi, mu, gamma)?;
                }
                value
            } else {
                let provider = oracle.map(WeightProvider::Oracle);
                estimate(scheme, &window, &q, pi, mu, gamma, provider.as_ref())?
            };
            let start = window.start();
            q.apply_update(start.state, start.action, target, settings.alpha);
        }
        mse.push(probe.mse(&q));
    }
    Ok(LearningRun { repr: q, mse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{build_chain, random_dirichlet_policy, ChainSpec};
    use crate::estimators::Scheme;
    use crate::exact::solve_q_pi;
    use crate::mdp::Outcome;
    use crate::rng::seeded;

    fn settings(n: usize, episodes: usize) -> LearningSettings {
        LearningSettings {
            n,
            episodes,
            ..LearningSettings::default()
        }
    }

    #[test]
    fn zero_episodes_gives_initial_mse() {
        let mdp = build_chain(&ChainSpec::default()).unwrap();
        let mut rng = seeded(3);
        let pi = random_dirichlet_policy(&mdp, &mut rng);
        let mu = random_dirichlet_policy(&mdp, &mut rng);
        let q_pi = solve_q_pi(&mdp, &pi, 1e-12).unwrap();
        let pairs = mdp.nonterminal_pairs();
        let expected: f64 = pairs
            .iter()
            .map(|p| q_pi.value(p.state, p.action).powi(2))
            .sum::<f64>()
            / pairs.len() as f64;
        for kind in [ReprKind::Tabular, ReprKind::TileCode] {
            let run = run_policy_evaluation(
                &mdp,
                &pi,
                &mu,
                EstimatorSpec::oracle(Scheme::Ois),
                None,
                &q_pi,
                kind,
                &settings(3, 0),
                &mut rng,
            )
            .unwrap();
            assert_eq!(run.mse.len(), 1);
            assert!((run.mse[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn self_loop_single_update() {
        let mdp = Mdp::new(0.5, 1, vec![false], vec![1.0], vec![vec![vec![Outcome::new(0, 1.0, 1.0)]]]).unwrap();
        let pi = Policy::uniform(&mdp);
        let q_pi = solve_q_pi(&mdp, &pi, 1e-12).unwrap();
        let s = LearningSettings {
            n: 1,
            episodes: 1,
            alpha: 1.0,
            episode_cap: 1,
            ..LearningSettings::default()
        };
        let run = run_policy_evaluation(
            &mdp,
            &pi,
            &pi,
            EstimatorSpec::oracle(Scheme::Ois),
            None,
            &q_pi,
            ReprKind::Tabular,
            &s,
            &mut seeded(0),
        )
        .unwrap();
        assert_eq!(run.repr.value(0, 0), 1.0);
    }

    #[test]
    fn padded_windows_carry_no_bootstrap() {
        let mdp = build_chain(&ChainSpec::default().with_noise(0.0)).unwrap();
        let right = Policy::deterministic(&mdp, |_| crate::environments::RIGHT).unwrap();
        let ep = sample_episode(&mdp, &right, 100, 3, &mut seeded(1));
        // start 3 of 6 interior states: 3 -> 4 -> 5 -> 6 -> absorbing 7
        assert_eq!(ep.states(), &[3, 4, 5, 6, 7]);
        assert_eq!(ep.update_steps(), 4);
        let last = ep.window(3, 3).unwrap();
        assert_eq!(last.rewards(), &[10.0, 0.0, 0.0]);
        assert_eq!(last.final_state(), 7);
        assert!(ep.window(4, 3).is_err());
    }

    #[test]
    fn capped_episodes_extend_for_full_windows() {
        let mdp = Mdp::new(0.5, 1, vec![false], vec![1.0], vec![vec![vec![Outcome::new(0, 1.0, 1.0)]]]).unwrap();
        let pi = Policy::uniform(&mdp);
        let ep = sample_episode(&mdp, &pi, 5, 3, &mut seeded(0));
        assert_eq!(ep.len(), 7);
        assert_eq!(ep.update_steps(), 5);
        assert_eq!(ep.window(4, 3).unwrap().rewards(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn uncorrected_matches_ois_on_policy() {
        let mdp = build_chain(&ChainSpec::default()).unwrap();
        let mut rng = seeded(11);
        let pi = random_dirichlet_policy(&mdp, &mut rng);
        let q_pi = solve_q_pi(&mdp, &pi, 1e-12).unwrap();
        let run = |scheme| {
            run_policy_evaluation(
                &mdp,
                &pi,
                &pi,
                EstimatorSpec::online(scheme),
                None,
                &q_pi,
                ReprKind::Tabular,
                &settings(3, 50),
                &mut seeded(5),
            )
            .unwrap()
        };
        let ois = run(Scheme::Ois);
        assert_eq!(ois, run(Scheme::Uncorrected));
        assert_eq!(ois, run(Scheme::Rcis));
    }

    #[test]
    fn on_policy_learning_reduces_error() {
        let mdp = build_chain(&ChainSpec::default()).unwrap();
        let mut improved = 0;
        for seed in 0..100 {
            let mut rng = seeded(seed);
            let pi = random_dirichlet_policy(&mdp, &mut rng);
            let q_pi = solve_q_pi(&mdp, &pi, 1e-12).unwrap();
            let run = run_policy_evaluation(
                &mdp,
                &pi,
                &pi,
                EstimatorSpec::oracle(Scheme::Ois),
                None,
                &q_pi,
                ReprKind::Tabular,
                &settings(3, 100),
                &mut rng,
            )
            .unwrap();
            if run.mse.last().unwrap() < &run.mse[0] {
                improved += 1;
            }
        }
        assert_eq!(improved, 100);
    }

    #[test]
    fn oracle_estimators_need_tables() {
        let mdp = build_chain(&ChainSpec::default()).unwrap();
        let pi = Policy::uniform(&mdp);
        let q_pi = solve_q_pi(&mdp, &pi, 1e-9).unwrap();
        let err = run_policy_evaluation(
            &mdp,
            &pi,
            &pi,
            EstimatorSpec::oracle(Scheme::Rcis),
            None,
            &q_pi,
            ReprKind::Tabular,
            &settings(3, 1),
            &mut seeded(0),
        );
        assert!(err.is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [UpdateMode::PerVisit, UpdateMode::PerEpisode] {
            assert_eq!(m.name().parse::<UpdateMode>().unwrap(), m);
        }
        for m in [WeightOrder::UpdateThenQuery, WeightOrder::QueryThenUpdate] {
            assert_eq!(m.name().parse::<WeightOrder>().unwrap(), m);
        }
        for m in [MseWeighting::Uniform, MseWeighting::Initial] {
            assert_eq!(m.name().parse::<MseWeighting>().unwrap(), m);
        }
    }
}
