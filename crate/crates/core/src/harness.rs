//! Monte Carlo experiments: many independent calibration runs, each followed
//! by validation on fresh draws from the distributions its thresholds induce.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::WidthMethod;
use crate::env::{CreditEnv, CreditEnvConfig, Environment};
use crate::error::{invalid_param, Error, Result};
use crate::prc::{
    batch_risk, joint_solve, joint_solve_quantile, run_planned, SolvePlan, DEFAULT_GRID_SIZE,
};
use crate::quantile::WeightFn;
use crate::risk::{RiskSpec, StopReason, ThresholdWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub spec: RiskSpec,
    pub env: CreditEnvConfig,
    pub window: ThresholdWindow,
    pub method: WidthMethod,
    /// Quantile risk to control; `None` controls expected risk.
    pub psi: Option<WeightFn>,
    pub trajectories: usize,
    pub n_validation: usize,
    pub master_seed: u64,
    pub grid_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            spec: RiskSpec::default(),
            env: CreditEnvConfig::default(),
            window: ThresholdWindow::default(),
            method: WidthMethod::Clt,
            psi: None,
            trajectories: 100,
            n_validation: 20_000,
            master_seed: 0,
            grid_size: DEFAULT_GRID_SIZE,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.env.validate()?;
        self.window.validate()?;
        self.method.validate()?;
        if let Some(psi) = &self.psi {
            psi.validate()?;
        }
        if self.trajectories == 0 {
            return Err(invalid_param("at least one trajectory is required"));
        }
        if self.n_validation < 100 {
            return Err(invalid_param(format!(
                "n_validation = {} must be >= 100",
                self.n_validation
            )));
        }
        if self.grid_size < 2 {
            return Err(invalid_param("grid_size must be >= 2"));
        }
        Ok(())
    }

    /// The plan every trajectory shares.
    pub fn plan(&self) -> Result<Option<SolvePlan>> {
        match &self.psi {
            None => joint_solve(&self.spec, &self.window, self.method),
            Some(psi) => joint_solve_quantile(&self.spec, &self.window, psi, self.method),
        }
    }

    /// `3 sqrt(alpha (1 - alpha) / n_v)`.
    pub fn validation_slack(&self) -> f64 {
        let a = self.spec.alpha;
        3.0 * (a * (1.0 - a) / self.n_validation as f64).sqrt()
    }
}

/// Independent generators for trajectory `index`: calibration and validation.
pub fn trajectory_rngs(master_seed: u64, index: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut calibration = ChaCha8Rng::seed_from_u64(master_seed);
    calibration.set_stream(2 * index as u64);
    let mut validation = ChaCha8Rng::seed_from_u64(master_seed);
    validation.set_stream(2 * index as u64 + 1);
    (calibration, validation)
}

/// Risk at `lambda_eval` of a fresh batch of `n_v` draws from the
/// distribution induced by `lambda_distribution`.
pub fn validation_risk<E, R>(
    env: &E,
    lambda_distribution: f64,
    lambda_eval: f64,
    n_v: usize,
    rng: &mut R,
    psi: Option<&WeightFn>,
) -> Result<f64>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    if n_v == 0 {
        return Err(invalid_param("validation needs n_v >= 1"));
    }
    let batch = env.sample_batch(lambda_distribution, n_v, rng)?;
    batch_risk(&batch, lambda_eval, env.epsilon(), psi)
}

/// One trajectory as validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryOutcome {
    /// `lambda_0, ..., lambda_T`.
    pub lambdas: Vec<f64>,
    pub stop_reason: StopReason,
    /// `R~(lambda_t, lambda_t)` for every iterate.
    pub risk_self: Vec<f64>,
    /// `R~(lambda_t, lambda_{t+1})`; absent for the final iterate.
    pub risk_next: Vec<Option<f64>>,
}

impl TrajectoryOutcome {
    pub fn iterations(&self) -> usize {
        self.lambdas.len() - 1
    }

    pub fn final_lambda(&self) -> f64 {
        *self.lambdas.last().unwrap()
    }

    pub fn final_risk(&self) -> f64 {
        *self.risk_self.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Some iterate's validation risk exceeds `alpha + slack`.
    AnyIterationSafety,
    /// The final iterate's validation risk exceeds `alpha + slack`.
    FinalSafety,
    /// After at least one step, the final validation risk is below
    /// `alpha - delta_alpha - slack`.
    Tightness,
}

impl FailureKind {
    pub fn is_failure(self, t: &TrajectoryOutcome, spec: &RiskSpec, slack: f64) -> bool {
        match self {
            FailureKind::AnyIterationSafety => t.risk_self.iter().any(|&r| r > spec.alpha + slack),
            FailureKind::FinalSafety => t.final_risk() > spec.alpha + slack,
            FailureKind::Tightness => {
                t.iterations() >= 1 && t.final_risk() < spec.alpha - spec.delta_alpha - slack
            }
        }
    }
}

impl FromStr for FailureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any_iteration_safety" => Ok(FailureKind::AnyIterationSafety),
            "final_safety" => Ok(FailureKind::FinalSafety),
            "tightness" => Ok(FailureKind::Tightness),
            other => Err(invalid_param(format!("unknown failure kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub mean: f64,
    pub p05: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub trajectories: usize,
    pub slack: f64,
    pub any_iteration_safety_failures: usize,
    pub final_safety_failures: usize,
    pub tightness_failures: usize,
    /// Trajectories with at least one step.
    pub moved: usize,
    pub final_lambda: LambdaSummary,
}

impl Aggregates {
    pub fn count(&self, kind: FailureKind) -> usize {
        match kind {
            FailureKind::AnyIterationSafety => self.any_iteration_safety_failures,
            FailureKind::FinalSafety => self.final_safety_failures,
            FailureKind::Tightness => self.tightness_failures,
        }
    }
}

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Recounts every aggregate from the per-trajectory rows.
pub fn aggregate(config: &ExperimentConfig, outcomes: &[TrajectoryOutcome]) -> Aggregates {
    let slack = config.validation_slack();
    let count = |kind: FailureKind| {
        outcomes
            .iter()
            .filter(|t| kind.is_failure(t, &config.spec, slack))
            .count()
    };
    let mut finals: Vec<f64> = outcomes
        .iter()
        .map(TrajectoryOutcome::final_lambda)
        .collect();
    finals.sort_by(f64::total_cmp);
    let final_lambda = if finals.is_empty() {
        LambdaSummary {
            mean: f64::NAN,
            p05: f64::NAN,
            p25: f64::NAN,
            p50: f64::NAN,
            p75: f64::NAN,
            p95: f64::NAN,
        }
    } else {
        LambdaSummary {
            mean: finals.iter().sum::<f64>() / finals.len() as f64,
            p05: percentile(&finals, 0.05),
            p25: percentile(&finals, 0.25),
            p50: percentile(&finals, 0.5),
            p75: percentile(&finals, 0.75),
            p95: percentile(&finals, 0.95),
        }
    };
    Aggregates {
        trajectories: outcomes.len(),
        slack,
        any_iteration_safety_failures: count(FailureKind::AnyIterationSafety),
        final_safety_failures: count(FailureKind::FinalSafety),
        tightness_failures: count(FailureKind::Tightness),
        moved: outcomes.iter().filter(|t| t.iterations() >= 1).count(),
        final_lambda,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub plan: Option<SolvePlan>,
    pub aggregates: Aggregates,
    #[serde(skip)]
    pub trajectories: Vec<TrajectoryOutcome>,
}

fn run_one(
    config: &ExperimentConfig,
    env: &CreditEnv,
    plan: Option<SolvePlan>,
    index: usize,
) -> Result<TrajectoryOutcome> {
    let (mut cal_rng, mut val_rng) = trajectory_rngs(config.master_seed, index);
    let psi = config.psi.as_ref();
    let traj = run_planned(
        env,
        &config.spec,
        &config.window,
        plan,
        psi,
        config.grid_size,
        &mut cal_rng,
    )?;
    traj.check_invariants(&config.window)?;

    let lambdas = traj.iterates;
    let mut risk_self = Vec::with_capacity(lambdas.len());
    let mut risk_next = Vec::with_capacity(lambdas.len());
    for (t, &lambda) in lambdas.iter().enumerate() {
        let batch = env.sample_batch(lambda, config.n_validation, &mut val_rng)?;
        risk_self.push(batch_risk(&batch, lambda, env.epsilon(), psi)?);
        risk_next.push(match lambdas.get(t + 1) {
            Some(&next) => Some(batch_risk(&batch, next, env.epsilon(), psi)?),
            None => None,
        });
    }
    Ok(TrajectoryOutcome {
        lambdas,
        stop_reason: traj.stop_reason,
        risk_self,
        risk_next,
    })
}

/// Runs every trajectory, in parallel on at most `threads` workers
/// (`None` uses all available cores). Output does not depend on `threads`.
pub fn run_experiment(
    config: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<ExperimentReport> {
    config.validate()?;
    let env = CreditEnv::new(config.env)?;
    let plan = config.plan()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| invalid_param(format!("thread pool: {e}")))?;
    let results: Vec<Result<TrajectoryOutcome>> = pool.install(|| {
        (0..config.trajectories)
            .into_par_iter()
            .map(|i| run_one(config, &env, plan, i))
            .collect()
    });

    let completed = results.iter().filter(|r| r.is_ok()).count();
    let mut trajectories = Vec::with_capacity(results.len());
    for (index, result) in results.into_iter().enumerate() {
        match result {
            Ok(t) => trajectories.push(t),
            Err(source) => {
                return Err(Error::Trajectory {
                    index,
                    completed,
                    source: Box::new(source),
                })
            }
        }
    }
    Ok(ExperimentReport {
        aggregates: aggregate(config, &trajectories),
        config: config.clone(),
        plan,
        trajectories,
    })
}

/// Fraction of trajectories that fail in the given way.
pub fn failure_rate(report: &ExperimentReport, kind: FailureKind) -> Result<f64> {
    if report.trajectories.is_empty() {
        return Err(invalid_param("failure rate of an empty report"));
    }
    let slack = report.config.validation_slack();
    let failures = report
        .trajectories
        .iter()
        .filter(|t| kind.is_failure(t, &report.config.spec, slack))
        .count();
    Ok(failures as f64 / report.trajectories.len() as f64)
}

pub const ROWS_HEADER: [&str; 6] = [
    "trajectory",
    "iteration",
    "lambda_hat",
    "risk_self",
    "risk_next",
    "stop_reason",
];

/// `<stem>.rows.csv` and `<stem>.summary.json`.
pub fn report_paths(stem: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let stem = stem.as_ref().as_os_str().to_owned();
    let with = |suffix: &str| {
        let mut s = stem.clone();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".rows.csv"), with(".summary.json"))
}

/// One row per iterate of every trajectory.
pub fn write_rows<W: Write>(report: &ExperimentReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROWS_HEADER)?;
    for (i, t) in report.trajectories.iter().enumerate() {
        for (k, &lambda) in t.lambdas.iter().enumerate() {
            w.write_record([
                i.to_string(),
                k.to_string(),
                lambda.to_string(),
                t.risk_self[k].to_string(),
                t.risk_next[k].map_or_else(String::new, |r| r.to_string()),
                t.stop_reason.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the rows CSV and the summary JSON next to `stem`.
pub fn emit_report(report: &ExperimentReport, stem: impl AsRef<Path>) -> Result<()> {
    let (rows_path, summary_path) = report_paths(stem);

    let file = File::create(&rows_path).map_err(io_err(&rows_path))?;
    write_rows(report, BufWriter::new(file)).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: rows_path.clone(),
            source,
        },
        other => Error::Format {
            path: rows_path.clone(),
            message: format!("{other:?}"),
        },
    })?;

    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    std::fs::write(&summary_path, json).map_err(io_err(&summary_path))?;
    Ok(())
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads back a report written by [`emit_report`].
pub fn read_report(stem: impl AsRef<Path>) -> Result<ExperimentReport> {
    let (rows_path, summary_path) = report_paths(stem);
    let summary = std::fs::read_to_string(&summary_path).map_err(io_err(&summary_path))?;
    let mut report: ExperimentReport =
        serde_json::from_str(&summary).map_err(|e| format_err(&summary_path, e.to_string()))?;

    let file = File::open(&rows_path).map_err(io_err(&rows_path))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| format_err(&rows_path, e.to_string()))?;
    if header.iter().ne(ROWS_HEADER) {
        return Err(format_err(&rows_path, "unexpected header"));
    }
    let mut trajectories: Vec<TrajectoryOutcome> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| format_err(&rows_path, e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let parse_err = |what: &str| Error::Parse {
            line,
            message: format!("{}: bad {what}", rows_path.display()),
        };
        let index: usize = row[0].parse().map_err(|_| parse_err("trajectory"))?;
        let iteration: usize = row[1].parse().map_err(|_| parse_err("iteration"))?;
        let lambda: f64 = row[2].parse().map_err(|_| parse_err("lambda_hat"))?;
        let risk_self: f64 = row[3].parse().map_err(|_| parse_err("risk_self"))?;
        let risk_next: Option<f64> = match &row[4] {
            "" => None,
            s => Some(s.parse().map_err(|_| parse_err("risk_next"))?),
        };
        let stop_reason: StopReason = row[5].parse().map_err(|_| parse_err("stop_reason"))?;

        if index == trajectories.len() && iteration == 0 {
            trajectories.push(TrajectoryOutcome {
                lambdas: Vec::new(),
                stop_reason,
                risk_self: Vec::new(),
                risk_next: Vec::new(),
            });
        }
        let count = trajectories.len();
        let t = match trajectories.last_mut() {
            Some(t) if index + 1 == count && iteration == t.lambdas.len() => t,
            _ => return Err(parse_err("row order")),
        };
        t.lambdas.push(lambda);
        t.risk_self.push(risk_self);
        t.risk_next.push(risk_next);
    }
    report.trajectories = trajectories;
    Ok(report)
}
