//! Domain types and exact empirical-risk evaluation for threshold-indexed losses.
//!
//! The loss family is the smoothed type II error of an approval rule: a
//! positive (delinquent) record whose score falls inside the approval region
//! `score <= 1 - lambda` incurs its cost, with a linear ramp of width `2 * epsilon`
//! around the boundary. Every loss here is non-increasing in the threshold and
//! vanishes at the window's safe end.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::prc::SolvePlan;

/// Default ramp half-width.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// The admissible threshold interval `[lambda_min, lambda_safe]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdWindow {
    pub lambda_min: f64,
    pub lambda_safe: f64,
}

impl ThresholdWindow {
    pub fn new(lambda_min: f64, lambda_safe: f64) -> Result<Self> {
        let window = Self {
            lambda_min,
            lambda_safe,
        };
        window.validate()?;
        Ok(window)
    }

    /// Window `[0, 1 + epsilon]` for the credit-approval loss. Extending past 1
    /// by the ramp half-width makes the loss at the safe end exactly zero, even
    /// for records whose score was shifted all the way down to 0.
    pub fn credit(epsilon: f64) -> Self {
        Self {
            lambda_min: 0.0,
            lambda_safe: 1.0 + epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min.is_finite() && self.lambda_safe.is_finite()) {
            return Err(invalid_param("threshold window endpoints must be finite"));
        }
        if self.lambda_min >= self.lambda_safe {
            return Err(invalid_param(format!(
                "lambda_min ({}) must be below lambda_safe ({})",
                self.lambda_min, self.lambda_safe
            )));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.lambda_safe - self.lambda_min
    }

    pub fn contains(&self, lambda: f64) -> bool {
        lambda >= self.lambda_min && lambda <= self.lambda_safe
    }
}

impl Default for ThresholdWindow {
    fn default() -> Self {
        Self::credit(DEFAULT_EPSILON)
    }
}

/// User targets for one calibration run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskSpec {
    /// Target risk level.
    pub alpha: f64,
    /// Tightness slack: the final threshold should have risk at least `alpha - delta_alpha`.
    pub delta_alpha: f64,
    /// Failure budget shared by every iteration.
    pub delta: f64,
    /// Performativity guard, the slope penalty per unit of threshold movement.
    pub tau: f64,
    /// Samples drawn per deployment.
    pub n: usize,
}

impl RiskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid_param(format!(
                "alpha = {} must lie in (0, 1)",
                self.alpha
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid_param(format!(
                "delta = {} must lie in (0, 1)",
                self.delta
            )));
        }
        if !(self.delta_alpha > 0.0 && self.delta_alpha.is_finite()) {
            return Err(invalid_param(format!(
                "delta_alpha = {} must be positive",
                self.delta_alpha
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid_param(format!(
                "tau = {} must be positive",
                self.tau
            )));
        }
        if self.n < 2 {
            return Err(invalid_param(format!("n = {} must be at least 2", self.n)));
        }
        Ok(())
    }
}

impl Default for RiskSpec {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            delta_alpha: 0.082,
            delta: 0.1,
            tau: 1.0,
            n: 2000,
        }
    }
}

/// One draw from the deployed distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Model score after the strategic response to the deployed threshold.
    pub score: f64,
    pub label: bool,
    /// Realized cost of a positive; 1 when the cost model is off.
    pub cost: f64,
}

impl SampleRecord {
    pub fn new(score: f64, label: bool, cost: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(invalid_input(format!("score {score} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&cost) {
            return Err(invalid_input(format!("cost {cost} outside [0, 1]")));
        }
        Ok(Self { score, label, cost })
    }
}

/// Records drawn i.i.d. under a single deployed threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub records: Vec<SampleRecord>,
    pub lambda_deploy: f64,
}

impl SampleBatch {
    pub fn new(records: Vec<SampleRecord>, lambda_deploy: f64) -> Self {
        Self {
            records,
            lambda_deploy,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Losses of every record at `lambda_eval`, in record order.
    pub fn losses(&self, lambda_eval: f64, epsilon: f64) -> Result<Vec<f64>> {
        check_epsilon(epsilon)?;
        Ok(self
            .records
            .iter()
            .map(|r| ramp_loss(r, lambda_eval, epsilon))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Progress fell below the required minimum step.
    Converged,
    /// The iteration budget ran out; unreachable when a plan exists.
    BudgetExhausted,
    /// No feasible iteration budget existed; the safe threshold is returned.
    NoSolvePlan,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::BudgetExhausted => "budget_exhausted",
            StopReason::NoSolvePlan => "no_solve_plan",
        }
    }
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StopReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "converged" => Ok(StopReason::Converged),
            "budget_exhausted" => Ok(StopReason::BudgetExhausted),
            "no_solve_plan" => Ok(StopReason::NoSolvePlan),
            other => Err(invalid_input(format!("unknown stop reason `{other}`"))),
        }
    }
}

/// Diagnostics for one update `lambda_{t-1} -> lambda_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub lambda_deploy: f64,
    pub lambda_next: f64,
    /// Empirical (or quantile) risk of the batch at the chosen threshold.
    pub empirical_risk: f64,
    pub width: f64,
    /// `tau * (lambda_deploy - lambda_next)`.
    pub guard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `lambda_0 = lambda_safe, lambda_1, ..., lambda_T`.
    pub iterates: Vec<f64>,
    pub per_iteration: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub plan: Option<SolvePlan>,
}

impl Trajectory {
    pub fn no_plan(window: &ThresholdWindow) -> Self {
        Self {
            iterates: vec![window.lambda_safe],
            per_iteration: Vec::new(),
            stop_reason: StopReason::NoSolvePlan,
            plan: None,
        }
    }

    /// Number of iterations run, `T`.
    pub fn iterations(&self) -> usize {
        self.iterates.len() - 1
    }

    pub fn final_lambda(&self) -> f64 {
        *self
            .iterates
            .last()
            .expect("trajectory always holds lambda_0")
    }

    /// Post-hoc check of the structural invariants every run must satisfy.
    pub fn check_invariants(&self, window: &ThresholdWindow) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInput(msg));
        if self.iterates.first() != Some(&window.lambda_safe) {
            return fail("trajectory must start at lambda_safe".into());
        }
        if let Some(i) = self.iterates.iter().position(|&l| !window.contains(l)) {
            return fail(format!(
                "iterate {i} = {} leaves the window",
                self.iterates[i]
            ));
        }
        if let Some(i) = self.iterates.windows(2).position(|w| w[1] > w[0]) {
            return fail(format!("iterate {} increases", i + 1));
        }
        if self.per_iteration.len() != self.iterations() {
            return fail("per-iteration diagnostics do not match the iterate count".into());
        }
        match &self.plan {
            Some(plan) if self.iterations() > plan.t_tilde => fail(format!(
                "T = {} exceeds budget {}",
                self.iterations(),
                plan.t_tilde
            )),
            None if self.iterations() > 0 => fail("iterations without a solve plan".into()),
            _ => Ok(()),
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(invalid_param(format!(
            "epsilon = {epsilon} must be positive"
        )))
    }
}

/// Position of `score` on the ramp at `lambda_eval`, before clipping.
#[inline]
fn ramp_position(score: f64, lambda_eval: f64, epsilon: f64) -> f64 {
    ((1.0 + epsilon) - lambda_eval - score) / (2.0 * epsilon)
}

#[inline]
pub(crate) fn ramp_loss(record: &SampleRecord, lambda_eval: f64, epsilon: f64) -> f64 {
    if !record.label {
        return 0.0;
    }
    record.cost * ramp_position(record.score, lambda_eval, epsilon).clamp(0.0, 1.0)
}

/// Smoothed type II loss `label * cost * clip(((1 - lambda) + eps - score) / (2 eps), 0, 1)`.
pub fn loss_eval(record: &SampleRecord, lambda_eval: f64, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    Ok(ramp_loss(record, lambda_eval, epsilon))
}

/// Mean loss of the batch at `lambda_eval`.
pub fn empirical_risk(batch: &SampleBatch, lambda_eval: f64, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    if batch.is_empty() {
        return Err(invalid_input("empirical risk of an empty batch"));
    }
    let total: f64 = batch
        .records
        .iter()
        .map(|r| ramp_loss(r, lambda_eval, epsilon))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Empirical risk at every point of an ascending grid.
///
/// Positive records are sorted by score once; each grid point then splits them
/// into a fully-charged prefix (summed from prefix costs) and the records on
/// the ramp, found by binary search. A record sits on the ramp for thresholds
/// within `2 * epsilon` of its boundary, so when the grid spacing is at least
/// that wide each record is visited O(1) times and the total cost is
/// O((n + G) log n).
pub fn risk_curve(batch: &SampleBatch, grid: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    check_epsilon(epsilon)?;
    if batch.is_empty() {
        return Err(invalid_input("risk curve of an empty batch"));
    }
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(invalid_input("grid contains a non-finite threshold"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid_input("grid must be sorted ascending"));
    }

    let mut positives: Vec<(f64, f64)> = batch
        .records
        .iter()
        .filter(|r| r.label)
        .map(|r| (r.score, r.cost))
        .collect();
    positives.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut prefix_cost = Vec::with_capacity(positives.len() + 1);
    prefix_cost.push(0.0);
    let mut acc = 0.0;
    for &(_, cost) in &positives {
        acc += cost;
        prefix_cost.push(acc);
    }

    let n = batch.len() as f64;
    let curve = grid
        .iter()
        .map(|&lambda| {
            // Ramp position decreases with score, so both cut points are partition points.
            let full_end =
                positives.partition_point(|&(s, _)| ramp_position(s, lambda, epsilon) >= 1.0);
            let ramp_end =
                positives.partition_point(|&(s, _)| ramp_position(s, lambda, epsilon) > 0.0);
            let partial: f64 = positives[full_end..ramp_end]
                .iter()
                .map(|&(s, cost)| cost * ramp_position(s, lambda, epsilon))
                .sum();
            (prefix_cost[full_end] + partial) / n
        })
        .collect();
    Ok(curve)
}

/// `size` evenly spaced points from `lo` to `hi`, both endpoints included exactly.
pub fn ascending_grid(lo: f64, hi: f64, size: usize) -> Result<Vec<f64>> {
    if size < 2 {
        return Err(invalid_param(format!(
            "grid size {size} must be at least 2"
        )));
    }
    if !(lo <= hi) {
        return Err(invalid_param(format!(
            "grid bounds [{lo}, {hi}] are reversed"
        )));
    }
    let step = (hi - lo) / (size - 1) as f64;
    let mut grid: Vec<f64> = (0..size).map(|i| lo + step * i as f64).collect();
    grid[size - 1] = hi;
    Ok(grid)
}
