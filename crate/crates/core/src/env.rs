//! Synthetic credit-scoring environment with a strategic score shift.
//!
//! Applicants carry a base score drawn from a class-conditional Beta law. An
//! applicant who can reach the approval region `score <= 1 - lambda` by
//! lowering the score by `s` does so; everyone else reports the base score.
//! The induced loss distribution moves by at most `p * C * |lambda_1 - lambda_2|`
//! in Wasserstein-1 distance, where `C` bounds the positive-class score
//! density, so `gamma = p * C` is the sensitivity the guard must cover.

use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::risk::{SampleBatch, SampleRecord, DEFAULT_EPSILON};

/// Default histogram resolution for the density estimate.
pub const DEFAULT_BINS: usize = 20;

/// A source of batches drawn from the distribution induced by a deployed threshold.
pub trait Environment: Send + Sync {
    fn sample_batch<R: Rng + ?Sized>(
        &self,
        lambda_deploy: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<SampleBatch>;

    /// Ramp half-width of the loss this environment is scored with.
    fn epsilon(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaShape {
    pub a: f64,
    pub b: f64,
}

impl BetaShape {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    /// Supremum of the density; finite only when both shapes are at least 1.
    pub fn max_density(&self) -> Result<f64> {
        let (a, b) = (self.a, self.b);
        if !(a >= 1.0 && b >= 1.0) {
            return Err(Error::UnboundedDensity { a, b });
        }
        if a == 1.0 && b == 1.0 {
            return Ok(1.0);
        }
        let mode = (a - 1.0) / (a + b - 2.0);
        let term = |k: f64, x: f64| if k == 0.0 { 0.0 } else { k * x.ln() };
        Ok((term(a - 1.0, mode) + term(b - 1.0, 1.0 - mode) - ln_beta(a, b)).exp())
    }
}

/// Cost attached to each positive record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    /// Every positive costs 1.
    #[default]
    Off,
    /// Each positive draws its cost from `U[0, 1]`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CreditEnvConfig {
    pub p_pos: f64,
    pub pos_score_dist: BetaShape,
    pub neg_score_dist: BetaShape,
    pub shift_s: f64,
    pub epsilon: f64,
    pub cost_model: CostModel,
}

impl CreditEnvConfig {
    /// Balanced population, unit costs.
    pub fn expected_risk() -> Self {
        Self {
            p_pos: 0.432,
            pos_score_dist: BetaShape::new(2.0, 2.0),
            neg_score_dist: BetaShape::new(2.0, 5.0),
            shift_s: 0.3,
            epsilon: DEFAULT_EPSILON,
            cost_model: CostModel::Off,
        }
    }

    /// Imbalanced population with uniform costs.
    pub fn quantile_risk() -> Self {
        Self {
            p_pos: 0.064,
            cost_model: CostModel::Uniform,
            ..Self::expected_risk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_pos >= 0.0 && self.p_pos < 1.0) {
            return Err(invalid_param(format!(
                "p_pos = {} must lie in [0, 1)",
                self.p_pos
            )));
        }
        if !(self.shift_s > 0.0 && self.shift_s < 1.0) {
            return Err(invalid_param(format!(
                "shift_s = {} must lie in (0, 1)",
                self.shift_s
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid_param(format!(
                "epsilon = {} must be positive",
                self.epsilon
            )));
        }
        for (name, shape) in [
            ("pos_score_dist", self.pos_score_dist),
            ("neg_score_dist", self.neg_score_dist),
        ] {
            if !(shape.a > 0.0 && shape.b > 0.0 && shape.a.is_finite() && shape.b.is_finite()) {
                return Err(invalid_param(format!(
                    "{name} shapes must be positive and finite"
                )));
            }
        }
        Ok(())
    }
}

impl Default for CreditEnvConfig {
    fn default() -> Self {
        Self::expected_risk()
    }
}

/// `max(0, f0 - s)` if that lands in the approval region `<= 1 - lambda`, else `f0`.
pub fn shift_score(f0: f64, lambda_deploy: f64, s: f64) -> f64 {
    if f0 - s <= 1.0 - lambda_deploy {
        (f0 - s).max(0.0)
    } else {
        f0
    }
}

/// A sampler for [`CreditEnvConfig`].
#[derive(Debug, Clone)]
pub struct CreditEnv {
    config: CreditEnvConfig,
    pos: Beta<f64>,
    neg: Beta<f64>,
}

impl CreditEnv {
    pub fn new(config: CreditEnvConfig) -> Result<Self> {
        config.validate()?;
        let beta = |s: BetaShape| {
            Beta::new(s.a, s.b).map_err(|e| invalid_param(format!("Beta({}, {}): {e}", s.a, s.b)))
        };
        Ok(Self {
            pos: beta(config.pos_score_dist)?,
            neg: beta(config.neg_score_dist)?,
            config,
        })
    }

    pub fn config(&self) -> &CreditEnvConfig {
        &self.config
    }

    /// Draws `n` base scores of positives, before any shift.
    pub fn sample_positive_scores<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.pos.sample(rng)).collect()
    }
}

impl Environment for CreditEnv {
    fn sample_batch<R: Rng + ?Sized>(
        &self,
        lambda_deploy: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<SampleBatch> {
        if n == 0 {
            return Err(invalid_param("batch size must be >= 1"));
        }
        let c = &self.config;
        let records = (0..n)
            .map(|_| {
                let label = rng.random::<f64>() < c.p_pos;
                let base = if label {
                    self.pos.sample(rng)
                } else {
                    self.neg.sample(rng)
                };
                let cost = match (label, c.cost_model) {
                    (true, CostModel::Uniform) => rng.random::<f64>(),
                    _ => 1.0,
                };
                SampleRecord {
                    score: shift_score(base, lambda_deploy, c.shift_s),
                    label,
                    cost,
                }
            })
            .collect();
        Ok(SampleBatch::new(records, lambda_deploy))
    }

    fn epsilon(&self) -> f64 {
        self.config.epsilon
    }
}

/// Histogram estimate of `gamma = p * C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEstimate {
    pub gamma_hat: f64,
    pub p_used: f64,
    /// Largest bin density.
    pub c_max: f64,
    pub bins: usize,
}

/// `p_rate` times the largest density of an equal-width histogram of
/// positive-class scores over `[0, 1]`.
pub fn estimate_gamma(samples: &[f64], p_rate: f64, bins: usize) -> Result<SensitivityEstimate> {
    if samples.is_empty() {
        return Err(invalid_input(
            "no positive-class scores to estimate a density from",
        ));
    }
    if bins == 0 {
        return Err(invalid_param("histogram needs at least one bin"));
    }
    if !(0.0..=1.0).contains(&p_rate) {
        return Err(invalid_param(format!(
            "p_rate = {p_rate} must lie in [0, 1]"
        )));
    }
    let mut counts = vec![0usize; bins];
    for &x in samples {
        if !(0.0..=1.0).contains(&x) {
            return Err(invalid_input(format!("score {x} outside [0, 1]")));
        }
        counts[((x * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let width = 1.0 / bins as f64;
    let c_max = *counts.iter().max().unwrap() as f64 / (samples.len() as f64 * width);
    Ok(SensitivityEstimate {
        gamma_hat: p_rate * c_max,
        p_used: p_rate,
        c_max,
        bins,
    })
}

/// `p_pos` times the exact supremum of the positive-class score density.
pub fn analytic_gamma(config: &CreditEnvConfig) -> Result<f64> {
    Ok(config.p_pos * config.pos_score_dist.max_density()?)
}

/// Reads a `score,label` file with a header row.
pub fn load_scores_csv(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<bool>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if headers.len() != 2 || &headers[0] != "score" || &headers[1] != "label" {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "expected header `score,label`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse { line, message };
        if row.len() != 2 {
            return Err(parse_err(format!("expected 2 fields, found {}", row.len())));
        }
        let score: f64 = row[0]
            .parse()
            .map_err(|_| parse_err(format!("score `{}` is not a number", &row[0])))?;
        let label: f64 = row[1]
            .parse()
            .map_err(|_| parse_err(format!("label `{}` is not a number", &row[1])))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Validation {
                line,
                message: format!("score {score} outside [0, 1]"),
            });
        }
        if label != 0.0 && label != 1.0 {
            return Err(Error::Validation {
                line,
                message: format!("label {label} is not 0 or 1"),
            });
        }
        scores.push(score);
        labels.push(label == 1.0);
    }
    if scores.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    Ok((scores, labels))
}
