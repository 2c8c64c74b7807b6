//! Experiment runner: operator estimation and policy evaluation on the
//! chain, aggregated over repetitions with bootstrap intervals.
//!
//! Repetition `r` uses seed `seed + r`. Stream 0 of that seed draws the
//! policies and the Q-function; stream `1 + i` samples trajectories for
//! start pair `i` (operator) and stream 1 samples the episodes of every
//! learner (policy evaluation). Every estimator therefore sees the same
//! data, and results do not depend on the worker count.

pub mod bootstrap;
pub mod config;

use std::io::Write;

use rayon::prelude::*;

pub use bootstrap::{bootstrap_ci, Resampler};
pub use config::{parameter_grid, ExperimentConfig, ExperimentKind, Setting, StartPairs};

use crate::environments::{build_chain, random_dirichlet_policy, random_q_function};
use crate::error::{CisError, Result};
use crate::estimators::{estimate, observe_trajectory, EstimatorSpec, OracleWeights, WeightProvider, WeightSource};
use crate::exact::{enumerate_trajectories, solve_q_pi, Measure};
use crate::learning::{run_policy_evaluation, WeightOrder};
use crate::mdp::{bootstrapped_return, mix_policies, sample_trajectory, Mdp, Policy, StatePair};
use crate::qfunction::TabularQ;
use crate::regression::{Fallback, WeightStore};
use crate::rng::{seeded, stream, SimRng};

/// Stream reserved for bootstrap resampling.
const BOOTSTRAP_STREAM: u64 = u64::MAX;

/// Tolerance of the value iteration that provides `Q^pi`.
const Q_PI_TOLERANCE: f64 = 1e-10;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "CIS_THREADS";

pub const CSV_HEADER: &str =
    "experiment,estimator,chain_length,noise,n,beta,extra_actions,alpha,gamma,step,mean_mse,ci_lo,ci_hi,repetitions,seed";

/// Aggregated value of one curve at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub setting: Setting,
    pub estimator: EstimatorSpec,
    pub rows: Vec<CurveRow>,
}

impl Curve {
    pub fn last(&self) -> &CurveRow {
        self.rows.last().expect("curves are never empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub experiment: ExperimentKind,
    pub alpha: f64,
    pub gamma: f64,
    pub repetitions: usize,
    pub seed: u64,
    pub config_hash: String,
    pub curves: Vec<Curve>,
}

impl RunResult {
    pub fn curve(&self, setting: &Setting, estimator: EstimatorSpec) -> Option<&Curve> {
        self.curves
            .iter()
            .find(|c| &c.setting == setting && c.estimator == estimator)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for curve in &self.curves {
            let s = &curve.setting;
            for row in &curve.rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    self.experiment.name(),
                    curve.estimator,
                    s.chain_length,
                    s.noise,
                    s.n,
                    s.beta,
                    s.extra_actions,
                    self.alpha,
                    self.gamma,
                    row.step,
                    row.mean,
                    row.ci_lo,
                    row.ci_hi,
                    self.repetitions,
                    self.seed
                )?;
            }
        }
        Ok(())
    }
}

/// Per-repetition output: one error curve per estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionOutput {
    pub curves: Vec<Vec<f64>>,
    /// Operator runs: mean over start pairs of the signed error of the
    /// final running mean. Empty for policy evaluation.
    pub final_errors: Vec<f64>,
}

/// Target, behaviour and Q-function of one repetition.
#[derive(Debug, Clone)]
pub struct Instance {
    pub mdp: Mdp,
    pub target: Policy,
    pub behaviour: Policy,
    pub q: TabularQ,
}

pub fn repetition_seed(cfg: &ExperimentConfig, rep: usize) -> u64 {
    cfg.seed.wrapping_add(rep as u64)
}

/// Draws `pi`, `mu` and `Q` on stream 0 and mixes the target
/// `beta pi + (1 - beta) mu`.
pub fn draw_instance(cfg: &ExperimentConfig, setting: &Setting, seed: u64) -> Result<Instance> {
    let mdp = build_chain(&setting.chain_spec(cfg.gamma))?;
    let mut rng = seeded(seed);
    let pi = random_dirichlet_policy(&mdp, &mut rng);
    let behaviour = random_dirichlet_policy(&mdp, &mut rng);
    let q = random_q_function(&mdp, config::Q_SCALE, cfg.q_scale, &mut rng)?;
    let target = mix_policies(&pi, &behaviour, setting.beta)?;
    Ok(Instance {
        mdp,
        target,
        behaviour,
        q,
    })
}

fn start_pairs(cfg: &ExperimentConfig, setting: &Setting, mdp: &Mdp) -> Vec<StatePair> {
    match cfg.start_pairs {
        StartPairs::All => mdp.nonterminal_pairs(),
        StartPairs::Initial => {
            let x0 = setting.chain_spec(cfg.gamma).start_state();
            (0..mdp.actions_at(x0)).map(|a| StatePair::new(x0, a)).collect()
        }
    }
}

fn is_online(spec: &EstimatorSpec) -> bool {
    spec.scheme.needs_weights() && spec.source == WeightSource::Online
}

/// Squared error of each estimator's running mean after every sample,
/// averaged over start pairs.
pub fn operator_repetition(cfg: &ExperimentConfig, setting: &Setting, rep: usize) -> Result<RepetitionOutput> {
    let seed = repetition_seed(cfg, rep);
    let Instance {
        mdp,
        target,
        behaviour,
        q,
    } = draw_instance(cfg, setting, seed)?;
    let gamma = mdp.gamma();
    let pairs = start_pairs(cfg, setting, &mdp);
    let schemes = cfg.oracle_schemes();
    let n_est = cfg.estimators.len();
    let mut curves = vec![vec![0.0; cfg.samples]; n_est];
    let mut final_errors = vec![0.0; n_est];

    for (i, &pair) in pairs.iter().enumerate() {
        let law = enumerate_trajectories(&mdp, &behaviour, &target, pair, setting.n).map_err(|e| match e {
            CisError::EnumerationTooLarge { .. } => CisError::Config(format!("{e}; reduce n or extra-actions")),
            other => other,
        })?;
        let exact = law.expectation(Measure::Target, |a| {
            Ok(bootstrapped_return(&a.trajectory, &q, &target, gamma))
        })?;
        let oracle = OracleWeights::for_schemes(&law, &schemes);
        let oracle = WeightProvider::Oracle(&oracle);
        let mut stores: Vec<WeightStore> = (0..n_est)
            .map(|_| WeightStore::new(cfg.objective, Fallback::RawRatio))
            .collect();
        let mut sums = vec![0.0; n_est];
        let mut rng: SimRng = stream(seed, 1 + i as u64);
        for m in 0..cfg.samples {
            let traj = sample_trajectory(&mdp, &behaviour, pair, setting.n, &mut rng)?;
            for (e, spec) in cfg.estimators.iter().enumerate() {
                let value = if is_online(spec) {
                    let store = &mut stores[e];
                    if cfg.weight_order == WeightOrder::UpdateThenQuery {
                        observe_trajectory(store, spec.scheme, &traj, &target, &behaviour, gamma)?;
                    }
                    let v = estimate(
                        spec.scheme,
                        &traj,
                        &q,
                        &target,
                        &behaviour,
                        gamma,
                        Some(&WeightProvider::Online(store)),
                    )?;
                    if cfg.weight_order == WeightOrder::QueryThenUpdate {
                        observe_trajectory(store, spec.scheme, &traj, &target, &behaviour, gamma)?;
                    }
                    v
                } else {
                    estimate(spec.scheme, &traj, &q, &target, &behaviour, gamma, Some(&oracle))?
                };
                sums[e] += value;
                let err = sums[e] / (m + 1) as f64 - exact;
                curves[e][m] += err * err;
            }
        }
        for e in 0..n_est {
            final_errors[e] += sums[e] / cfg.samples as f64 - exact;
        }
    }
    let k = pairs.len() as f64;
    for curve in &mut curves {
        curve.iter_mut().for_each(|v| *v /= k);
    }
    final_errors.iter_mut().for_each(|v| *v /= k);
    Ok(RepetitionOutput { curves, final_errors })
}

/// MSE after every episode (index 0 before learning) for each estimator.
pub fn policy_eval_repetition(cfg: &ExperimentConfig, setting: &Setting, rep: usize) -> Result<RepetitionOutput> {
    let seed = repetition_seed(cfg, rep);
    let Instance {
        mdp,
        target,
        behaviour,
        ..
    } = draw_instance(cfg, setting, seed)?;
    let q_pi = solve_q_pi(&mdp, &target, Q_PI_TOLERANCE)?;
    let schemes = cfg.oracle_schemes();
    let mut oracle = OracleWeights::new();
    if !schemes.is_empty() {
        for pair in mdp.nonterminal_pairs() {
            let law = enumerate_trajectories(&mdp, &behaviour, &target, pair, setting.n)?;
            oracle.extend_for_schemes(&law, &schemes);
        }
    }
    let settings = cfg.learning_settings(setting.n);
    let curves = cfg
        .estimators
        .iter()
        .map(|&spec| {
            let mut rng = stream(seed, 1);
            run_policy_evaluation(
                &mdp,
                &target,
                &behaviour,
                spec,
                Some(&oracle),
                &q_pi,
                cfg.repr,
                &settings,
                &mut rng,
            )
            .map(|run| run.mse)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RepetitionOutput {
        curves,
        final_errors: Vec::new(),
    })
}

/// Worker pool honouring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let threads: usize = value
            .trim()
            .parse()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| CisError::Config(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
        builder = builder.num_threads(threads);
    }
    builder
        .build()
        .map_err(|e| CisError::Config(format!("cannot start worker pool: {e}")))
}

/// Runs every repetition of one setting in the pool, in repetition order.
pub fn run_repetitions<F>(pool: &rayon::ThreadPool, repetitions: usize, f: F) -> Result<Vec<RepetitionOutput>>
where
    F: Fn(usize) -> Result<RepetitionOutput> + Sync,
{
    pool.install(|| (0..repetitions).into_par_iter().map(&f).collect())
}

fn aggregate(
    cfg: &ExperimentConfig,
    setting: Setting,
    reps: &[RepetitionOutput],
    first_step: usize,
    resampler: &Resampler,
) -> Result<Vec<Curve>> {
    let mut out = Vec::with_capacity(cfg.estimators.len());
    let mut column = vec![0.0; reps.len()];
    for (e, &estimator) in cfg.estimators.iter().enumerate() {
        let steps = reps[0].curves[e].len();
        let mut rows = Vec::with_capacity(steps);
        for s in 0..steps {
            for (slot, rep) in column.iter_mut().zip(reps) {
                *slot = rep.curves[e][s];
            }
            let (ci_lo, ci_hi) = resampler.interval(&column, cfg.bootstrap_level)?;
            rows.push(CurveRow {
                step: first_step + s,
                mean: bootstrap::mean(&column),
                ci_lo,
                ci_hi,
            });
        }
        out.push(Curve {
            setting,
            estimator,
            rows,
        });
    }
    Ok(out)
}

fn run(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<RunResult> {
    if cfg.experiment != kind {
        return Err(CisError::Config(format!(
            "config is for `{}`, not `{}`",
            cfg.experiment.name(),
            kind.name()
        )));
    }
    cfg.validate()?;
    let pool = thread_pool()?;
    let resampler = Resampler::new(
        cfg.repetitions,
        cfg.bootstrap_resamples,
        &mut stream(cfg.seed, BOOTSTRAP_STREAM),
    )?;
    let mut curves = Vec::new();
    for setting in cfg.settings() {
        let (reps, first_step) = match kind {
            ExperimentKind::Operator => (
                run_repetitions(&pool, cfg.repetitions, |r| operator_repetition(cfg, &setting, r))?,
                1,
            ),
            ExperimentKind::PolicyEval => (
                run_repetitions(&pool, cfg.repetitions, |r| policy_eval_repetition(cfg, &setting, r))?,
                0,
            ),
        };
        curves.extend(aggregate(cfg, setting, &reps, first_step, &resampler)?);
    }
    Ok(RunResult {
        experiment: kind,
        alpha: cfg.alpha,
        gamma: cfg.gamma,
        repetitions: cfg.repetitions,
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        curves,
    })
}

/// Running-mean MSE of `(T^pi)^n Q` estimates against the exact value,
/// as a function of the number of samples per start pair.
pub fn run_operator_estimation(cfg: &ExperimentConfig) -> Result<RunResult> {
    run(cfg, ExperimentKind::Operator)
}

/// MSE of the learned Q-function against `Q^pi` after every episode.
pub fn run_policy_evaluation_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    run(cfg, ExperimentKind::PolicyEval)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    run(cfg, cfg.experiment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::Scheme;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(kind);
        cfg.repetitions = 4;
        cfg.samples = 30;
        cfg.episodes = 20;
        cfg.bootstrap_resamples = 100;
        cfg
    }

    #[test]
    fn rows_bracket_the_mean() {
        for kind in [ExperimentKind::Operator, ExperimentKind::PolicyEval] {
            let result = run_experiment(&small(kind)).unwrap();
            for curve in &result.curves {
                for row in &curve.rows {
                    assert!(row.ci_lo <= row.mean && row.mean <= row.ci_hi);
                }
            }
        }
    }

    #[test]
    fn policy_eval_starts_from_common_mse() {
        let result = run_experiment(&small(ExperimentKind::PolicyEval)).unwrap();
        assert_eq!(result.curves[0].rows.len(), 21);
        let first = result.curves[0].rows[0];
        assert_eq!(first.step, 0);
        for curve in &result.curves {
            assert_eq!(curve.rows[0], first);
        }
    }

    #[test]
    fn noise_free_deterministic_policies_give_exact_estimates() {
        let mut cfg = small(ExperimentKind::Operator);
        cfg.noise = 0.0;
        let setting = cfg.base_setting();
        // deterministic target and behaviour: every sample is the exact value
        let mdp = build_chain(&setting.chain_spec(cfg.gamma)).unwrap();
        let right = Policy::deterministic(&mdp, |_| crate::environments::RIGHT).unwrap();
        let q = TabularQ::zeros(&mdp);
        let law = enumerate_trajectories(&mdp, &right, &right, StatePair::new(3, 1), 5).unwrap();
        assert_eq!(law.atoms.len(), 1);
        let mut rng = seeded(0);
        let traj = sample_trajectory(&mdp, &right, StatePair::new(3, 1), 5, &mut rng).unwrap();
        let exact = law
            .expectation(Measure::Target, |a| Ok(bootstrapped_return(&a.trajectory, &q, &right, cfg.gamma)))
            .unwrap();
        for scheme in [Scheme::Ois, Scheme::Pdis, Scheme::Rcis, Scheme::Scis] {
            let oracle = OracleWeights::for_schemes(&law, &[scheme]);
            let v = estimate(scheme, &traj, &q, &right, &right, cfg.gamma, Some(&WeightProvider::Oracle(&oracle)))
                .unwrap();
            assert_eq!(v, exact);
        }
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let cfg = small(ExperimentKind::Operator);
        assert!(run_policy_evaluation_experiment(&cfg).is_err());
    }

    #[test]
    fn csv_layout() {
        let result = run_experiment(&small(ExperimentKind::Operator)).unwrap();
        let mut buf = Vec::new();
        result.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 15);
        assert_eq!(&first[..7], &["operator", "ois", "6", "0.1", "5", "1", "0"]);
        assert_eq!(first[9], "1");
        assert_eq!(text.lines().count(), 1 + 4 * 30);
    }
}
