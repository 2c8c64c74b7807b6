//! Command-line front end of the `cis` binary.
//!
//! Exit status: 0 on success, 1 when `verify` finds a failing property,
//! 2 on usage, configuration or run errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::conditioner::Conditioner;
use crate::error::{CisError, Result};
use crate::exact::{enumerate_trajectories, exact_conditional_weight, EnumeratedDistribution};
use crate::harness::{draw_instance, run_experiment, ExperimentConfig, ExperimentKind};
use crate::mdp::mix_policies;
use crate::mdp_io::parse_mdp;
use crate::verify::{run_all, BATTERY_SEED};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cis", version, about = "Conditional importance sampling experiments on finite MDPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the n-step operator applied to a random Q-function.
    Operator(RunArgs),
    /// Off-policy n-step TD evaluation on the chain.
    PolicyEval(RunArgs),
    /// Run the exact property checks on the built-in battery.
    Verify(VerifyArgs),
    /// Write the exact trajectory law (or weight tables) as CSV.
    ExactDump(DumpArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also write the effective config to this file.
    #[arg(long, value_name = "PATH")]
    pub save_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Seed of the instance battery.
    #[arg(long, default_value_t = BATTERY_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Read the MDP from a TOML file instead of building the chain.
    #[arg(long, value_name = "PATH")]
    pub mdp: Option<PathBuf>,
    /// Write conditional weight tables instead of atoms.
    #[arg(long)]
    pub weights: bool,
}

/// Flags shared by every config-driven subcommand. Each value overrides
/// the config file, which overrides the defaults.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat TOML config file with keys named like the flags.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output CSV path (standard output when absent).
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chain_length: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub extra_actions: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Comma-separated estimator names, e.g. `ois,rcis:oracle,scis:online`.
    #[arg(long)]
    pub estimators: Option<String>,
    /// `tabular` or `tilecode`.
    #[arg(long)]
    pub repr: Option<String>,
    /// `per-visit` or `per-episode`.
    #[arg(long)]
    pub update_mode: Option<String>,
    /// `update-then-query` or `query-then-update`.
    #[arg(long)]
    pub weight_order: Option<String>,
    /// `uniform` or `initial`.
    #[arg(long)]
    pub mse_weighting: Option<String>,
    /// `plain` or `psi-weighted`.
    #[arg(long)]
    pub objective: Option<String>,
    /// `variance` or `std`: how 0.1 is read for the random Q entries.
    #[arg(long)]
    pub q_scale: Option<String>,
    /// `all` or `initial`.
    #[arg(long)]
    pub start_pairs: Option<String>,
    #[arg(long)]
    pub episode_cap: Option<usize>,
    #[arg(long)]
    pub bootstrap_level: Option<f64>,
    #[arg(long)]
    pub bootstrap_resamples: Option<usize>,
    /// Sweep the one-axis-at-a-time parameter grid around the base setting.
    #[arg(long)]
    pub grid: bool,
}

impl CommonArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |key: &'static str, value: Option<String>| {
            if let Some(v) = value {
                out.push((key, v));
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("chain-length", self.chain_length.map(|v| v.to_string()));
        put("noise", self.noise.map(|v| v.to_string()));
        put("n", self.n.map(|v| v.to_string()));
        put("beta", self.beta.map(|v| v.to_string()));
        put("extra-actions", self.extra_actions.map(|v| v.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("gamma", self.gamma.map(|v| v.to_string()));
        put("samples", self.samples.map(|v| v.to_string()));
        put("episodes", self.episodes.map(|v| v.to_string()));
        put("repetitions", self.repetitions.map(|v| v.to_string()));
        put("estimators", self.estimators.clone());
        put("repr", self.repr.clone());
        put("update-mode", self.update_mode.clone());
        put("weight-order", self.weight_order.clone());
        put("mse-weighting", self.mse_weighting.clone());
        put("objective", self.objective.clone());
        put("q-scale", self.q_scale.clone());
        put("start-pairs", self.start_pairs.clone());
        put("episode-cap", self.episode_cap.map(|v| v.to_string()));
        put("bootstrap-level", self.bootstrap_level.map(|v| v.to_string()));
        put("bootstrap-resamples", self.bootstrap_resamples.map(|v| v.to_string()));
        put("grid", self.grid.then(|| "true".to_string()));
        out
    }

    /// Defaults, then the config file, then the flags.
    fn effective_config(&self, kind: Option<ExperimentKind>) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(path) => Some(std::fs::read_to_string(path).map_err(|e| {
                CisError::Config(format!("cannot read config {}: {e}", path.display()))
            })?),
            None => None,
        };
        let kind = match kind {
            Some(k) => k,
            None => text
                .as_deref()
                .and_then(|t| t.parse::<toml::Table>().ok())
                .and_then(|t| t.get("experiment").and_then(|v| v.as_str()).map(str::to_owned))
                .map(|s| s.parse::<ExperimentKind>().map_err(CisError::Config))
                .transpose()?
                .unwrap_or(ExperimentKind::Operator),
        };
        let mut cfg = ExperimentConfig::defaults(kind);
        if let Some(text) = &text {
            cfg.apply_toml(text)?;
        }
        for (key, value) in self.overrides() {
            cfg.set(key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(out: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes)
            .map_err(|e| CisError::Io(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn run_harness(args: &RunArgs, kind: ExperimentKind) -> Result<()> {
    let cfg = args.common.effective_config(Some(kind))?;
    if let Some(path) = &args.save_config {
        std::fs::write(path, cfg.to_config_string())
            .map_err(|e| CisError::Io(format!("cannot write {}: {e}", path.display())))?;
    }
    eprintln!("config-hash {}", cfg.config_hash());
    let result = run_experiment(&cfg)?;
    let mut buf = Vec::new();
    result.write_csv(&mut buf)?;
    emit(&args.common.out, &buf)
}

fn write_atoms(out: &mut Vec<u8>, law: &EnumeratedDistribution, header: bool) -> Result<()> {
    let returns = exact_conditional_weight(law, Conditioner::Return);
    if header {
        writeln!(out, "x,a,trajectory,p_mu,p_pi,rho,return,rcis_weight")?;
    }
    for atom in &law.atoms {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            law.start.state,
            law.start.action,
            atom.trajectory,
            atom.p_mu,
            atom.p_pi,
            atom.likelihood_ratio(),
            atom.trajectory.discounted_return(law.gamma),
            returns.weight_of(&atom.trajectory, law.gamma).unwrap_or(f64::NAN)
        )?;
    }
    Ok(())
}

fn write_weights(out: &mut Vec<u8>, law: &EnumeratedDistribution, header: bool) -> Result<()> {
    if header {
        writeln!(out, "x,a,conditioner,key,weight")?;
    }
    let mut phis = vec![Conditioner::Return, Conditioner::RewardSequence];
    for t in 0..law.horizon {
        phis.push(Conditioner::RewardAt(t));
        phis.push(Conditioner::StateActionRewardAt(t));
    }
    phis.push(Conditioner::StateAt(law.horizon));
    for phi in phis {
        let table = exact_conditional_weight(law, phi);
        let mut rows: Vec<_> = table.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        for (key, w) in rows {
            writeln!(out, "{},{},{},{},{}", law.start.state, law.start.action, phi, key, w)?;
        }
    }
    Ok(())
}

fn exact_dump(args: &DumpArgs) -> Result<()> {
    let cfg = args.common.effective_config(None)?;
    let setting = cfg.base_setting();
    let mut instance = draw_instance(&cfg, &setting, cfg.seed)?;
    if let Some(path) = &args.mdp {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CisError::Config(format!("cannot read MDP {}: {e}", path.display())))?;
        let mdp = parse_mdp(&text)?;
        let mut rng = crate::rng::seeded(cfg.seed);
        let pi = crate::environments::random_dirichlet_policy(&mdp, &mut rng);
        instance.behaviour = crate::environments::random_dirichlet_policy(&mdp, &mut rng);
        instance.target = mix_policies(&pi, &instance.behaviour, setting.beta)?;
        instance.mdp = mdp;
    }
    let mut buf = Vec::new();
    for (i, pair) in instance.mdp.nonterminal_pairs().into_iter().enumerate() {
        let law = enumerate_trajectories(&instance.mdp, &instance.behaviour, &instance.target, pair, setting.n)?;
        if args.weights {
            write_weights(&mut buf, &law, i == 0)?;
        } else {
            write_atoms(&mut buf, &law, i == 0)?;
        }
    }
    emit(&args.common.out, &buf)
}

fn verify(args: &VerifyArgs) -> Result<bool> {
    let checks = run_all(args.seed)?;
    let mut stdout = std::io::stdout().lock();
    for check in &checks {
        writeln!(stdout, "{}", check.line())?;
    }
    Ok(checks.iter().all(|c| c.passed()))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Operator(a) => run_harness(a, ExperimentKind::Operator).map(|_| true),
        Command::PolicyEval(a) => run_harness(a, ExperimentKind::PolicyEval).map(|_| true),
        Command::ExactDump(a) => exact_dump(a).map(|_| true),
        Command::Verify(a) => verify(a),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_VERIFY_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
