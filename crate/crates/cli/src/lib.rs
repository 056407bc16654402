//! Command-line front end: JSON configuration, flag overrides, and the five
//! subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use perfrisk::bounds::precomputed_width;
use perfrisk::env::{analytic_gamma, estimate_gamma, load_scores_csv, CreditEnv, DEFAULT_BINS};
use perfrisk::harness::{emit_report, run_experiment, trajectory_rngs};
use perfrisk::prc::{run_planned, tightest_delta_alpha};
use perfrisk::{
    CreditEnvConfig, ExperimentConfig, RiskSpec, ThresholdWindow, WeightFn, WidthMethod,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NO_PLAN: i32 = 2;

/// Settings for `bounds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    /// Iteration budget splitting `delta`.
    pub t_tilde: usize,
    /// Risk levels to tabulate.
    pub alphas: Vec<f64>,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            t_tilde: 100,
            alphas: (1..=50).map(|i| i as f64 / 100.0).collect(),
        }
    }
}

/// Settings for `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GammaConfig {
    pub bins: usize,
    /// Positive-class scores simulated when no CSV is given.
    pub samples: usize,
    pub csv: Option<PathBuf>,
}

impl Default for GammaConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            samples: 100_000,
            csv: None,
        }
    }
}

/// The configuration file: an experiment configuration plus per-command sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub spec: RiskSpec,
    pub env: CreditEnvConfig,
    pub window: ThresholdWindow,
    pub method: WidthMethod,
    pub psi: Option<WeightFn>,
    pub trajectories: usize,
    pub n_validation: usize,
    pub master_seed: u64,
    pub grid_size: usize,
    pub bounds: BoundsConfig,
    pub gamma: GammaConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            spec: e.spec,
            env: e.env,
            window: e.window,
            method: e.method,
            psi: e.psi,
            trajectories: e.trajectories,
            n_validation: e.n_validation,
            master_seed: e.master_seed,
            grid_size: e.grid_size,
            bounds: BoundsConfig::default(),
            gamma: GammaConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            spec: self.spec,
            env: self.env,
            window: self.window,
            method: self.method,
            psi: self.psi.clone(),
            trajectories: self.trajectories,
            n_validation: self.n_validation,
            master_seed: self.master_seed,
            grid_size: self.grid_size,
        }
    }
}

/// Parses a configuration document, naming the offending key on failure.
pub fn parse_config(text: &str) -> anyhow::Result<CliConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("config error at `{path}`: {}", e.into_inner())
    })
}

pub fn load_config(path: &Path) -> anyhow::Result<CliConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "perfrisk",
    version,
    about = "Risk-controlled threshold calibration under performative shift"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the iteration budget and per-step progress.
    Solve(Overrides),
    /// Tabulate confidence widths across risk levels as `alpha,method,two_c`.
    Bounds(Overrides),
    /// Run one calibration trajectory.
    Calibrate(Overrides),
    /// Run and validate many trajectories.
    Experiment(Overrides),
    /// Estimate the sensitivity constant of the environment or of a score file.
    Gamma(GammaArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output stem for written artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker thread cap (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Threshold grid size.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub delta_alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Samples per iteration.
    #[arg(long)]
    pub n: Option<usize>,
    /// hoeffding, bernstein, hb, clt, dkw, or quantile_clt.
    #[arg(long)]
    pub method: Option<String>,
    /// CVaR level: sets the weight function and the quantile_clt level.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Positive base rate: sets the environment and the quantile_clt rate.
    #[arg(long)]
    pub p_rate: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct GammaArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// `score,label` file to estimate from instead of the simulated environment.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Histogram bins.
    #[arg(long)]
    pub bins: Option<usize>,
}

impl Overrides {
    /// File, then flags, over the defaults.
    pub fn resolve(&self) -> anyhow::Result<CliConfig> {
        let mut c = match &self.config {
            Some(path) => load_config(path)?,
            None => CliConfig::default(),
        };
        if let Some(v) = self.seed {
            c.master_seed = v;
        }
        if let Some(v) = self.grid {
            c.grid_size = v;
        }
        if let Some(v) = self.alpha {
            c.spec.alpha = v;
        }
        if let Some(v) = self.delta {
            c.spec.delta = v;
        }
        if let Some(v) = self.delta_alpha {
            c.spec.delta_alpha = v;
        }
        if let Some(v) = self.tau {
            c.spec.tau = v;
        }
        if let Some(v) = self.n {
            c.spec.n = v;
        }
        if let Some(v) = self.p_rate {
            c.env.p_pos = v;
            if let WidthMethod::QuantileClt { p_rate, .. } = &mut c.method {
                *p_rate = v;
            }
        }
        if let Some(v) = self.beta {
            c.psi = Some(WeightFn::Cvar(v));
            if let WidthMethod::QuantileClt { beta, .. } = &mut c.method {
                *beta = v;
            }
        }
        if let Some(name) = &self.method {
            c.method = match name.as_str() {
                "quantile_clt" => WidthMethod::QuantileClt {
                    beta: match (&c.psi, c.method) {
                        (_, WidthMethod::QuantileClt { beta, .. }) => beta,
                        (Some(WeightFn::Cvar(b)), _) => *b,
                        _ => {
                            bail!("--method quantile_clt needs --beta or a CVaR psi in the config")
                        }
                    },
                    p_rate: c.env.p_pos,
                },
                other => other.parse()?,
            };
        }
        c.spec.validate()?;
        c.window.validate()?;
        c.method.validate()?;
        Ok(c)
    }
}

/// What a command printed and how it should exit.
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub code: i32,
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct SolveOutput {
    plan: perfrisk::SolvePlan,
    tightest_delta_alpha: Option<f64>,
    method: WidthMethod,
    spec: RiskSpec,
}

pub fn cmd_solve(args: &Overrides) -> anyhow::Result<Outcome> {
    let c = args.resolve()?;
    let plan = c.experiment().plan()?;
    let Some(plan) = plan else {
        return Ok(Outcome {
            stdout: "no plan\n".into(),
            code: EXIT_NO_PLAN,
        });
    };
    let tightest = match c.psi {
        None => Some(tightest_delta_alpha(&c.spec, &c.window, c.method)?),
        Some(_) => None,
    };
    Ok(Outcome {
        stdout: json(&SolveOutput {
            plan,
            tightest_delta_alpha: tightest,
            method: c.method,
            spec: c.spec,
        }),
        code: EXIT_OK,
    })
}

pub const BOUNDS_METHODS: [WidthMethod; 4] = [
    WidthMethod::Hoeffding,
    WidthMethod::EmpiricalBernstein,
    WidthMethod::HoeffdingBentkus,
    WidthMethod::Clt,
];

pub fn cmd_bounds(args: &Overrides) -> anyhow::Result<Outcome> {
    let c = args.resolve()?;
    if c.bounds.t_tilde == 0 {
        bail!("bounds.t_tilde must be >= 1");
    }
    let delta_prime = c.spec.delta / c.bounds.t_tilde as f64;
    let mut out = String::from("alpha,method,two_c\n");
    for &alpha in &c.bounds.alphas {
        for method in BOUNDS_METHODS {
            let two_c = 2.0 * precomputed_width(method, c.spec.n, delta_prime, alpha)?;
            out.push_str(&format!("{alpha},{},{two_c}\n", method.name()));
        }
    }
    Ok(Outcome {
        stdout: out,
        code: EXIT_OK,
    })
}

pub fn cmd_calibrate(args: &Overrides) -> anyhow::Result<Outcome> {
    let c = args.resolve()?;
    let e = c.experiment();
    e.validate()?;
    let env = CreditEnv::new(e.env)?;
    let plan = e.plan()?;
    let (mut rng, _) = trajectory_rngs(e.master_seed, 0);
    let trajectory = run_planned(
        &env,
        &e.spec,
        &e.window,
        plan,
        e.psi.as_ref(),
        e.grid_size,
        &mut rng,
    )?;
    let text = json(&trajectory);
    if let Some(stem) = &args.out {
        let path = PathBuf::from(format!("{}.trajectory.json", stem.display()));
        std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(Outcome {
        stdout: text,
        code: if plan.is_some() {
            EXIT_OK
        } else {
            EXIT_NO_PLAN
        },
    })
}

pub fn cmd_experiment(args: &Overrides) -> anyhow::Result<Outcome> {
    let c = args.resolve()?;
    let report = run_experiment(&c.experiment(), args.threads)?;
    if let Some(stem) = &args.out {
        emit_report(&report, stem)?;
    }
    Ok(Outcome {
        stdout: json(&report),
        code: if report.plan.is_some() {
            EXIT_OK
        } else {
            EXIT_NO_PLAN
        },
    })
}

#[derive(Serialize)]
struct GammaOutput {
    source: String,
    analytic_gamma: Option<f64>,
    estimate: perfrisk::env::SensitivityEstimate,
}

pub fn cmd_gamma(args: &GammaArgs) -> anyhow::Result<Outcome> {
    let c = args.common.resolve()?;
    let bins = args.bins.unwrap_or(c.gamma.bins);
    let output = match args.csv.as_ref().or(c.gamma.csv.as_ref()) {
        Some(path) => {
            let (scores, labels) = load_scores_csv(path)?;
            let positives: Vec<f64> = scores
                .iter()
                .zip(&labels)
                .filter(|(_, &y)| y)
                .map(|(&s, _)| s)
                .collect();
            let p_rate = args
                .common
                .p_rate
                .unwrap_or(positives.len() as f64 / scores.len() as f64);
            GammaOutput {
                source: path.display().to_string(),
                analytic_gamma: None,
                estimate: estimate_gamma(&positives, p_rate, bins)?,
            }
        }
        None => {
            let env = CreditEnv::new(c.env)?;
            let (mut rng, _) = trajectory_rngs(c.master_seed, 0);
            let positives = env.sample_positive_scores(c.gamma.samples, &mut rng);
            GammaOutput {
                source: "simulated".into(),
                analytic_gamma: Some(analytic_gamma(&c.env)?),
                estimate: estimate_gamma(&positives, c.env.p_pos, bins)?,
            }
        }
    };
    Ok(Outcome {
        stdout: json(&output),
        code: EXIT_OK,
    })
}

pub fn execute(command: &Command) -> anyhow::Result<Outcome> {
    match command {
        Command::Solve(a) => cmd_solve(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Gamma(a) => cmd_gamma(a),
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(outcome) => {
            let _ = out.write_all(outcome.stdout.as_bytes());
            outcome.code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_USAGE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use perfrisk::prc::DEFAULT_GRID_SIZE;

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(r#"{"spec": {"alpha": 0.2, "alpah": 0.1}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("spec"), "{msg}");
        assert!(msg.contains("alpah"), "{msg}");
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c = parse_config(r#"{"spec": {"alpha": 0.2}, "grid_size": 1025}"#).unwrap();
        assert_eq!(c.spec.alpha, 0.2);
        assert_eq!(c.spec.n, RiskSpec::default().n);
        assert_eq!(c.grid_size, 1025);
        assert_eq!(c.gamma.bins, 20);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"spec": {"alpha": 0.2, "tau": 3.0}}"#).unwrap();
        let o = Overrides {
            config: Some(path),
            alpha: Some(0.25),
            ..Overrides::default()
        };
        let c = o.resolve().unwrap();
        assert_eq!(c.spec.alpha, 0.25);
        assert_eq!(c.spec.tau, 3.0);
    }

    #[test]
    fn quantile_clt_flag_needs_a_level() {
        let o = Overrides {
            method: Some("quantile_clt".into()),
            ..Overrides::default()
        };
        assert!(o.resolve().is_err());
        let o = Overrides {
            method: Some("quantile_clt".into()),
            beta: Some(0.9),
            p_rate: Some(0.064),
            ..Overrides::default()
        };
        assert_eq!(
            o.resolve().unwrap().method,
            WidthMethod::QuantileClt {
                beta: 0.9,
                p_rate: 0.064
            }
        );
    }

    #[test]
    fn default_grid_is_the_library_default() {
        assert_eq!(CliConfig::default().grid_size, DEFAULT_GRID_SIZE);
    }
}
