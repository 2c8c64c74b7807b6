//! Experiment configuration: defaults, validation and the flat text form.
//!
//! The text form is TOML with one `key = value` line per setting; keys
//! mirror the command-line flag names. Serialising the effective config
//! and reading it back yields an identical config.

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::environments::{ChainSpec, QScale};
use crate::error::{CisError, Result};
use crate::estimators::{EstimatorSpec, Scheme, WeightSource};
use crate::learning::{LearningSettings, MseWeighting, UpdateMode, WeightOrder};
use crate::qfunction::ReprKind;
use crate::regression::Objective;

/// Scale parameter of the random Q-function entries.
pub const Q_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Operator,
    PolicyEval,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Operator => "operator",
            ExperimentKind::PolicyEval => "policy-eval",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "operator" => Ok(ExperimentKind::Operator),
            "policy-eval" => Ok(ExperimentKind::PolicyEval),
            other => Err(format!("unknown experiment `{other}` (expected operator or policy-eval)")),
        }
    }
}

/// Start pairs whose operator value is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartPairs {
    /// Every non-terminal pair.
    All,
    /// Every action at the initial state.
    Initial,
}

impl StartPairs {
    pub fn name(self) -> &'static str {
        match self {
            StartPairs::All => "all",
            StartPairs::Initial => "initial",
        }
    }
}

impl std::str::FromStr for StartPairs {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(StartPairs::All),
            "initial" => Ok(StartPairs::Initial),
            other => Err(format!("unknown start-pairs `{other}` (expected all or initial)")),
        }
    }
}

/// One point of the parameter grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setting {
    pub chain_length: usize,
    pub noise: f64,
    pub n: usize,
    pub beta: f64,
    pub extra_actions: usize,
}

impl Setting {
    pub fn chain_spec(&self, gamma: f64) -> ChainSpec {
        ChainSpec::default()
            .with_length(self.chain_length)
            .with_noise(self.noise)
            .with_extra_actions(self.extra_actions)
            .with_gamma(gamma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub chain_length: usize,
    pub noise: f64,
    pub extra_actions: usize,
    pub n: usize,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub samples: usize,
    pub episodes: usize,
    pub repetitions: usize,
    pub estimators: Vec<EstimatorSpec>,
    pub repr: ReprKind,
    pub update_mode: UpdateMode,
    pub weight_order: WeightOrder,
    pub mse_weighting: MseWeighting,
    pub objective: Objective,
    pub q_scale: QScale,
    pub start_pairs: StartPairs,
    pub episode_cap: usize,
    pub bootstrap_level: f64,
    pub bootstrap_resamples: usize,
    pub grid: bool,
}

/// Keys accepted by [`ExperimentConfig::set`], in serialisation order.
pub const CONFIG_KEYS: &[&str] = &[
    "experiment",
    "seed",
    "chain-length",
    "noise",
    "extra-actions",
    "n",
    "beta",
    "gamma",
    "alpha",
    "samples",
    "episodes",
    "repetitions",
    "estimators",
    "repr",
    "update-mode",
    "weight-order",
    "mse-weighting",
    "objective",
    "q-scale",
    "start-pairs",
    "episode-cap",
    "bootstrap-level",
    "bootstrap-resamples",
    "grid",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| CisError::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentKind) -> Self {
        let (n, repetitions, estimators) = match experiment {
            ExperimentKind::Operator => (
                5,
                100,
                vec![
                    EstimatorSpec::oracle(Scheme::Ois),
                    EstimatorSpec::oracle(Scheme::Pdis),
                    EstimatorSpec::oracle(Scheme::Rcis),
                    EstimatorSpec::oracle(Scheme::Scis),
                ],
            ),
            ExperimentKind::PolicyEval => (
                3,
                500,
                vec![
                    EstimatorSpec::oracle(Scheme::Ois),
                    EstimatorSpec::oracle(Scheme::Pdis),
                    EstimatorSpec::oracle(Scheme::Rcis),
                    EstimatorSpec::online(Scheme::Rcis),
                    EstimatorSpec::oracle(Scheme::Scis),
                    EstimatorSpec::online(Scheme::Scis),
                ],
            ),
        };
        let chain = ChainSpec::default();
        let learning = LearningSettings::default();
        Self {
            experiment,
            seed: 0,
            chain_length: chain.n_interior,
            noise: chain.noise,
            extra_actions: chain.extra_actions,
            n,
            beta: 1.0,
            gamma: chain.gamma,
            alpha: learning.alpha,
            samples: 1000,
            episodes: learning.episodes,
            repetitions,
            estimators,
            repr: ReprKind::Tabular,
            update_mode: learning.update_mode,
            weight_order: learning.weight_order,
            mse_weighting: learning.mse_weighting,
            objective: learning.objective,
            q_scale: QScale::Variance,
            start_pairs: StartPairs::All,
            episode_cap: learning.episode_cap,
            bootstrap_level: 0.95,
            bootstrap_resamples: 1000,
            grid: false,
        }
    }

    /// Sets one key from its textual value. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "experiment" => {
                let kind: ExperimentKind = parse_value(key, value)?;
                if kind != self.experiment {
                    return Err(CisError::Config(format!(
                        "config is for `{}` but `{}` was requested",
                        kind.name(),
                        self.experiment.name()
                    )));
                }
            }
            "seed" => self.seed = parse_value(key, value)?,
            "chain-length" => self.chain_length = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "extra-actions" => self.extra_actions = parse_value(key, value)?,
            "n" => self.n = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "samples" => self.samples = parse_value(key, value)?,
            "episodes" => self.episodes = parse_value(key, value)?,
            "repetitions" => self.repetitions = parse_value(key, value)?,
            "estimators" => {
                self.estimators = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_>>()?
            }
            "repr" => self.repr = parse_value(key, value)?,
            "update-mode" => self.update_mode = parse_value(key, value)?,
            "weight-order" => self.weight_order = parse_value(key, value)?,
            "mse-weighting" => self.mse_weighting = parse_value(key, value)?,
            "objective" => self.objective = parse_value(key, value)?,
            "q-scale" => self.q_scale = parse_value(key, value)?,
            "start-pairs" => self.start_pairs = parse_value(key, value)?,
            "episode-cap" => self.episode_cap = parse_value(key, value)?,
            "bootstrap-level" => self.bootstrap_level = parse_value(key, value)?,
            "bootstrap-resamples" => self.bootstrap_resamples = parse_value(key, value)?,
            "grid" => self.grid = parse_value(key, value)?,
            other => return Err(CisError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every key of a flat TOML document.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let doc: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CisError::Config(format!("malformed config: {e}")))?;
        for (key, value) in &doc {
            let text = match value {
                Value::String(s) => s.clone(),
                Value::Integer(i) => i.to_string(),
                Value::Float(f) => f.to_string(),
                Value::Boolean(b) => b.to_string(),
                Value::Array(items) => items
                    .iter()
                    .map(|v| match v {
                        Value::String(s) => Ok(s.clone()),
                        _ => Err(CisError::Config(format!("`{key}` must list strings"))),
                    })
                    .collect::<Result<Vec<_>>>()?
                    .join(","),
                _ => return Err(CisError::Config(format!("`{key}` must be a scalar or a list"))),
            };
            self.set(key, &text)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CisError::Config(msg));
        if self.chain_length < 2 {
            return fail(format!("chain-length must be at least 2, got {}", self.chain_length));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return fail(format!("noise must lie in [0, 1], got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.bootstrap_level > 0.0 && self.bootstrap_level < 1.0) {
            return fail(format!("bootstrap-level must lie in (0, 1), got {}", self.bootstrap_level));
        }
        for (name, value) in [
            ("n", self.n),
            ("samples", self.samples),
            ("repetitions", self.repetitions),
            ("episode-cap", self.episode_cap),
            ("bootstrap-resamples", self.bootstrap_resamples),
        ] {
            if value == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.estimators.is_empty() {
            return fail("at least one estimator is required".into());
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(e) {
                return fail(format!("estimator `{e}` is listed twice"));
            }
        }
        Ok(())
    }

    /// The flat TOML form, one line per key in [`CONFIG_KEYS`] order.
    pub fn to_config_string(&self) -> String {
        let names: Vec<String> = self.estimators.iter().map(|e| format!("\"{e}\"")).collect();
        let lines = [
            format!("experiment = \"{}\"", self.experiment.name()),
            format!("seed = {}", self.seed),
            format!("chain-length = {}", self.chain_length),
            format!("noise = {:?}", self.noise),
            format!("extra-actions = {}", self.extra_actions),
            format!("n = {}", self.n),
            format!("beta = {:?}", self.beta),
            format!("gamma = {:?}", self.gamma),
            format!("alpha = {:?}", self.alpha),
            format!("samples = {}", self.samples),
            format!("episodes = {}", self.episodes),
            format!("repetitions = {}", self.repetitions),
            format!("estimators = [{}]", names.join(", ")),
            format!("repr = \"{}\"", self.repr.name()),
            format!("update-mode = \"{}\"", self.update_mode.name()),
            format!("weight-order = \"{}\"", self.weight_order.name()),
            format!("mse-weighting = \"{}\"", self.mse_weighting.name()),
            format!("objective = \"{}\"", self.objective.name()),
            format!("q-scale = \"{}\"", self.q_scale.name()),
            format!("start-pairs = \"{}\"", self.start_pairs.name()),
            format!("episode-cap = {}", self.episode_cap),
            format!("bootstrap-level = {:?}", self.bootstrap_level),
            format!("bootstrap-resamples = {}", self.bootstrap_resamples),
            format!("grid = {}", self.grid),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_config_string`].
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_config_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn base_setting(&self) -> Setting {
        Setting {
            chain_length: self.chain_length,
            noise: self.noise,
            n: self.n,
            beta: self.beta,
            extra_actions: self.extra_actions,
        }
    }

    /// Settings to run: the base point, or the one-axis-at-a-time grid.
    pub fn settings(&self) -> Vec<Setting> {
        if self.grid {
            parameter_grid(self.base_setting())
        } else {
            vec![self.base_setting()]
        }
    }

    pub fn learning_settings(&self, n: usize) -> LearningSettings {
        LearningSettings {
            n,
            episodes: self.episodes,
            alpha: self.alpha,
            episode_cap: self.episode_cap,
            update_mode: self.update_mode,
            weight_order: self.weight_order,
            mse_weighting: self.mse_weighting,
            objective: self.objective,
        }
    }

    /// Schemes that need oracle tables.
    pub fn oracle_schemes(&self) -> Vec<Scheme> {
        self.estimators
            .iter()
            .filter(|e| e.scheme.needs_weights() && e.source == WeightSource::Oracle)
            .map(|e| e.scheme)
            .collect()
    }
}

pub const GRID_NOISE: [f64; 3] = [0.0, 0.1, 0.5];
pub const GRID_N: [usize; 3] = [2, 4, 7];
pub const GRID_BETA: [f64; 3] = [0.1, 0.5, 1.0];
pub const GRID_EXTRA_ACTIONS: [usize; 3] = [0, 1, 3];

/// The base setting followed by every grid value that differs from it on
/// exactly one axis (noise, n, beta, extra actions).
pub fn parameter_grid(base: Setting) -> Vec<Setting> {
    let mut out = vec![base];
    let mut push = |s: Setting| {
        if !out.contains(&s) {
            out.push(s);
        }
    };
    for noise in GRID_NOISE {
        push(Setting { noise, ..base });
    }
    for n in GRID_N {
        push(Setting { n, ..base });
    }
    for beta in GRID_BETA {
        push(Setting { beta, ..base });
    }
    for extra_actions in GRID_EXTRA_ACTIONS {
        push(Setting { extra_actions, ..base });
    }
    out
}
