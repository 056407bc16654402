//! The iterative calibration loop.
//!
//! Starting from the safe threshold, each iteration samples from the
//! distribution induced by the current threshold and moves to the smallest
//! threshold whose objective
//!
//! ```text
//! V(l_prev, l) = R_hat(l_prev, l) + c + tau * (l_prev - l)
//! ```
//!
//! stays at or below `alpha`. The guard term charges for the drift the next
//! deployment can cause. The loop stops as soon as a step makes less than
//! `delta_lambda` progress; `(T_tilde, delta_lambda)` are fixed up front so
//! that stopping is guaranteed within the budget.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{precomputed_width, WidthMethod};
use crate::env::Environment;
use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::quantile::{dkw_epsilon, empirical_cdf, m_factor, quantile_risk, WeightFn};
use crate::risk::{
    ascending_grid, empirical_risk, risk_curve, IterationRecord, RiskSpec, SampleBatch, StopReason,
    ThresholdWindow, Trajectory,
};

/// Largest iteration budget the joint solve considers.
pub const T_TILDE_CAP: usize = 1_000_000;

/// Default number of grid points for the threshold update.
pub const DEFAULT_GRID_SIZE: usize = 4096;

/// Iteration budget and minimum per-step progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolvePlan {
    pub t_tilde: usize,
    pub delta_lambda: f64,
    /// `c(n, delta / t_tilde)`.
    pub width: f64,
}

/// Joint solve with the method's precomputed width.
pub fn joint_solve(
    spec: &RiskSpec,
    window: &ThresholdWindow,
    method: WidthMethod,
) -> Result<Option<SolvePlan>> {
    spec.validate()?;
    method.validate()?;
    joint_solve_with(spec, window, T_TILDE_CAP, |dp| {
        precomputed_width(method, spec.n, dp, spec.alpha)
    })
}

/// Scans `T_tilde = 1..=cap` and returns the first budget with
/// `delta_lambda >= window / T_tilde` and `delta_lambda > 0`, where
/// `delta_lambda = (delta_alpha - 2 width(delta / T_tilde)) / (2 tau)`.
///
/// `width` must be non-decreasing as its confidence argument shrinks; the scan
/// stops once `2 width >= delta_alpha`.
pub fn joint_solve_with(
    spec: &RiskSpec,
    window: &ThresholdWindow,
    cap: usize,
    mut width: impl FnMut(f64) -> Result<f64>,
) -> Result<Option<SolvePlan>> {
    spec.validate()?;
    window.validate()?;
    let length = window.length();
    for t_tilde in 1..=cap {
        let c = width(spec.delta / t_tilde as f64)?;
        if 2.0 * c >= spec.delta_alpha {
            return Ok(None);
        }
        let delta_lambda = (spec.delta_alpha - 2.0 * c) / (2.0 * spec.tau);
        if delta_lambda > 0.0 && delta_lambda >= length / t_tilde as f64 {
            return Ok(Some(SolvePlan {
                t_tilde,
                delta_lambda,
                width: c,
            }));
        }
    }
    Ok(None)
}

/// Smallest `delta_alpha` for which a plan exists:
/// `min over T_tilde of 2 tau L / T_tilde + 2 c(n, delta / T_tilde)`.
pub fn tightest_delta_alpha(
    spec: &RiskSpec,
    window: &ThresholdWindow,
    method: WidthMethod,
) -> Result<f64> {
    spec.validate()?;
    method.validate()?;
    window.validate()?;
    let length = window.length();
    let mut best = f64::INFINITY;
    for t_tilde in 1..=T_TILDE_CAP {
        let two_c =
            2.0 * precomputed_width(method, spec.n, spec.delta / t_tilde as f64, spec.alpha)?;
        if two_c >= best {
            break;
        }
        best = best.min(2.0 * spec.tau * length / t_tilde as f64 + two_c);
    }
    Ok(best)
}

/// `V = R_hat(lambda_deploy, lambda_eval) + width + tau (lambda_deploy - lambda_eval)`.
pub fn v_objective(
    batch: &SampleBatch,
    lambda_eval: f64,
    width: f64,
    tau: f64,
    epsilon: f64,
) -> Result<f64> {
    if lambda_eval > batch.lambda_deploy {
        return Err(Error::Domain(format!(
            "lambda_eval = {lambda_eval} exceeds the deployed threshold {}",
            batch.lambda_deploy
        )));
    }
    let risk = empirical_risk(batch, lambda_eval, epsilon)?;
    Ok(risk + width + tau * (batch.lambda_deploy - lambda_eval))
}

/// Which risk functional the loop controls.
#[derive(Debug, Clone, Copy)]
enum Mode<'a> {
    Expected,
    Quantile(&'a WeightFn),
}

fn batch_quantile_risk(
    batch: &SampleBatch,
    lambda: f64,
    epsilon: f64,
    psi: &WeightFn,
) -> Result<f64> {
    let losses = batch.losses(lambda, epsilon)?;
    quantile_risk(&empirical_cdf(&losses)?, psi)
}

/// Batch risk at `lambda`: the mean loss, or the quantile risk under `psi`.
pub fn batch_risk(
    batch: &SampleBatch,
    lambda: f64,
    epsilon: f64,
    psi: Option<&WeightFn>,
) -> Result<f64> {
    match psi {
        None => empirical_risk(batch, lambda, epsilon),
        Some(psi) => batch_quantile_risk(batch, lambda, epsilon, psi),
    }
}

/// Returns the chosen threshold and its batch risk.
fn update(
    batch: &SampleBatch,
    spec: &RiskSpec,
    plan: &SolvePlan,
    window: &ThresholdWindow,
    grid_size: usize,
    epsilon: f64,
    mode: Mode<'_>,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(invalid_input("threshold update on an empty batch"));
    }
    if grid_size < 2 {
        return Err(invalid_param(format!(
            "grid_size = {grid_size} must be >= 2"
        )));
    }
    let prev = batch.lambda_deploy;
    let risk_at = |lambda: f64| -> Result<f64> {
        match mode {
            Mode::Expected => empirical_risk(batch, lambda, epsilon),
            Mode::Quantile(psi) => batch_quantile_risk(batch, lambda, epsilon, psi),
        }
    };
    if prev <= window.lambda_min {
        return Ok((prev, risk_at(prev)?));
    }
    let grid = ascending_grid(window.lambda_min, prev, grid_size)?;
    let v = |lambda: f64, risk: f64| risk + plan.width + spec.tau * (prev - lambda);

    match mode {
        Mode::Expected => {
            let curve = risk_curve(batch, &grid, epsilon)?;
            let hit = grid
                .iter()
                .zip(&curve)
                .find(|&(&l, &r)| v(l, r) <= spec.alpha);
            match hit {
                Some((&l, &r)) => Ok((l, r)),
                None => Ok((prev, *curve.last().unwrap())),
            }
        }
        Mode::Quantile(_) => {
            // V is non-increasing on the grid; `hi` always indexes a point
            // already verified to satisfy V <= alpha (or one past the end).
            let (mut lo, mut hi) = (0, grid.len());
            let mut hi_risk = f64::NAN;
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                let r = risk_at(grid[mid])?;
                if v(grid[mid], r) <= spec.alpha {
                    hi = mid;
                    hi_risk = r;
                } else {
                    lo = mid + 1;
                }
            }
            if hi == grid.len() {
                Ok((prev, risk_at(prev)?))
            } else {
                Ok((grid[hi], hi_risk))
            }
        }
    }
}

/// Smallest point of a `grid_size`-point ascending grid over
/// `[lambda_min, lambda_deploy]` with `V <= alpha`, or `lambda_deploy` if none.
pub fn threshold_update(
    batch: &SampleBatch,
    spec: &RiskSpec,
    plan: &SolvePlan,
    window: &ThresholdWindow,
    grid_size: usize,
    epsilon: f64,
) -> Result<f64> {
    update(
        batch,
        spec,
        plan,
        window,
        grid_size,
        epsilon,
        Mode::Expected,
    )
    .map(|(l, _)| l)
}

/// [`threshold_update`] with the batch's quantile risk in place of its mean.
pub fn threshold_update_quantile(
    batch: &SampleBatch,
    spec: &RiskSpec,
    plan: &SolvePlan,
    window: &ThresholdWindow,
    psi: &WeightFn,
    grid_size: usize,
    epsilon: f64,
) -> Result<f64> {
    check_guaranteed(psi)?;
    update(
        batch,
        spec,
        plan,
        window,
        grid_size,
        epsilon,
        Mode::Quantile(psi),
    )
    .map(|(l, _)| l)
}

fn check_guaranteed(psi: &WeightFn) -> Result<()> {
    psi.validate()?;
    if psi.has_density() {
        Ok(())
    } else {
        Err(Error::GuaranteeMode(
            "VaR has no weight density and cannot be risk-controlled; use it for measurement only"
                .into(),
        ))
    }
}

/// Per-iteration width for quantile risk: the closed-form CVaR CLT width, or
/// the DKW half-width scaled by `sup psi`.
pub fn quantile_plan_width(
    method: WidthMethod,
    psi: &WeightFn,
    n: usize,
    delta_prime: f64,
    alpha: f64,
) -> Result<f64> {
    match method {
        WidthMethod::QuantileClt { beta, .. } => {
            let matches = match psi {
                WeightFn::Uniform => beta == 0.0,
                WeightFn::Cvar(b) => *b == beta,
                _ => false,
            };
            if !matches {
                return Err(invalid_param(format!(
                    "quantile_clt with beta = {beta} does not describe the weight function {psi:?}"
                )));
            }
            precomputed_width(method, n, delta_prime, alpha)
        }
        WidthMethod::DkwBand => Ok(dkw_epsilon(n, delta_prime)? * m_factor(psi, f64::INFINITY)?),
        other => Err(invalid_param(format!(
            "quantile risk needs the quantile_clt or dkw width, not {other}"
        ))),
    }
}

/// Joint solve for quantile risk.
pub fn joint_solve_quantile(
    spec: &RiskSpec,
    window: &ThresholdWindow,
    psi: &WeightFn,
    method: WidthMethod,
) -> Result<Option<SolvePlan>> {
    check_guaranteed(psi)?;
    method.validate()?;
    joint_solve_with(spec, window, T_TILDE_CAP, |dp| {
        quantile_plan_width(method, psi, spec.n, dp, spec.alpha)
    })
}

/// Runs the loop under a fixed plan. `psi = None` controls expected risk.
pub fn run_planned<E, R>(
    env: &E,
    spec: &RiskSpec,
    window: &ThresholdWindow,
    plan: Option<SolvePlan>,
    psi: Option<&WeightFn>,
    grid_size: usize,
    rng: &mut R,
) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    spec.validate()?;
    window.validate()?;
    let mode = match psi {
        Some(psi) => {
            check_guaranteed(psi)?;
            Mode::Quantile(psi)
        }
        None => Mode::Expected,
    };
    let Some(plan) = plan else {
        return Ok(Trajectory::no_plan(window));
    };
    let epsilon = env.epsilon();
    let mut iterates = vec![window.lambda_safe];
    let mut per_iteration = Vec::new();
    let mut prev = window.lambda_safe;
    for _ in 0..plan.t_tilde {
        let batch = env.sample_batch(prev, spec.n, rng)?;
        let (next, risk) = update(&batch, spec, &plan, window, grid_size, epsilon, mode)?;
        iterates.push(next);
        per_iteration.push(IterationRecord {
            lambda_deploy: prev,
            lambda_next: next,
            empirical_risk: risk,
            width: plan.width,
            guard: spec.tau * (prev - next),
        });
        if next >= prev - plan.delta_lambda {
            return Ok(Trajectory {
                iterates,
                per_iteration,
                stop_reason: StopReason::Converged,
                plan: Some(plan),
            });
        }
        prev = next;
    }
    debug_assert!(
        false,
        "budget exhausted despite delta_lambda >= window / T_tilde"
    );
    Ok(Trajectory {
        iterates,
        per_iteration,
        stop_reason: StopReason::BudgetExhausted,
        plan: Some(plan),
    })
}

/// Full calibration run for expected risk.
pub fn run_prc<E, R>(
    env: &E,
    spec: &RiskSpec,
    window: &ThresholdWindow,
    method: WidthMethod,
    grid_size: usize,
    rng: &mut R,
) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    let plan = joint_solve(spec, window, method)?;
    run_planned(env, spec, window, plan, None, grid_size, rng)
}

/// Full calibration run for the quantile risk defined by `psi`.
///
/// The guarantee needs `tau >= gamma * m_factor(psi, v)`; the loop cannot
/// check this.
pub fn run_prc_quantile<E, R>(
    env: &E,
    spec: &RiskSpec,
    window: &ThresholdWindow,
    psi: &WeightFn,
    method: WidthMethod,
    grid_size: usize,
    rng: &mut R,
) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    let plan = joint_solve_quantile(spec, window, psi, method)?;
    run_planned(env, spec, window, plan, Some(psi), grid_size, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::hoeffding_width;
    use crate::risk::{SampleRecord, DEFAULT_EPSILON};

    fn hoeffding_spec(delta_alpha: f64) -> RiskSpec {
        RiskSpec {
            alpha: 0.3,
            delta_alpha,
            delta: 0.1,
            tau: 1.0,
            n: 2000,
        }
    }

    fn unit_window() -> ThresholdWindow {
        ThresholdWindow::new(0.0, 1.0).unwrap()
    }

    #[test]
    fn hoeffding_fixture_plan() {
        let plan = joint_solve(&hoeffding_spec(0.2), &unit_window(), WidthMethod::Hoeffding)
            .unwrap()
            .unwrap();
        assert_eq!(plan.t_tilde, 17);
        assert!((plan.delta_lambda - 0.06182623408147224).abs() < 1e-12);
        assert!((plan.width - 0.038173765918527766).abs() < 1e-12);
        assert!((2.0 * plan.delta_lambda - (0.2 - 2.0 * plan.width)).abs() < 1e-9);

        // T_tilde = 16 misses by about 0.0005
        let c16 = hoeffding_width(2000, 0.1 / 16.0).unwrap();
        let shortfall = 1.0 / 16.0 - (0.2 - 2.0 * c16) / 2.0;
        assert!((shortfall - 0.00047473).abs() < 1e-7);
    }

    #[test]
    fn hoeffding_fixture_no_plan() {
        assert!(joint_solve(
            &hoeffding_spec(0.05),
            &unit_window(),
            WidthMethod::Hoeffding
        )
        .unwrap()
        .is_none());
    }

    #[test]
    fn generous_slack_gives_single_step() {
        let plan = joint_solve(
            &hoeffding_spec(50.0),
            &unit_window(),
            WidthMethod::Hoeffding,
        )
        .unwrap()
        .unwrap();
        assert_eq!(plan.t_tilde, 1);
    }

    #[test]
    fn tightest_delta_alpha_is_the_feasibility_edge() {
        let spec = hoeffding_spec(0.2);
        let w = unit_window();
        let edge = tightest_delta_alpha(&spec, &w, WidthMethod::Hoeffding).unwrap();
        let below = RiskSpec {
            delta_alpha: edge * (1.0 - 1e-9),
            ..spec
        };
        let above = RiskSpec {
            delta_alpha: edge * (1.0 + 1e-9),
            ..spec
        };
        assert!(joint_solve(&below, &w, WidthMethod::Hoeffding)
            .unwrap()
            .is_none());
        assert!(joint_solve(&above, &w, WidthMethod::Hoeffding)
            .unwrap()
            .is_some());
    }

    fn batch(scores: &[(f64, bool)], lambda_deploy: f64) -> SampleBatch {
        SampleBatch::new(
            scores
                .iter()
                .map(|&(s, y)| SampleRecord::new(s, y, 1.0).unwrap())
                .collect(),
            lambda_deploy,
        )
    }

    #[test]
    fn v_objective_examples() {
        let b = batch(&[(0.2, false), (0.9, false)], 0.6);
        let v = v_objective(&b, 0.5, 0.03, 1.0, DEFAULT_EPSILON).unwrap();
        assert!((v - 0.13).abs() < 1e-12);

        let b = batch(&[(0.2, true), (0.9, false)], 0.6);
        let r = empirical_risk(&b, 0.6, DEFAULT_EPSILON).unwrap();
        assert_eq!(
            v_objective(&b, 0.6, 0.03, 1.0, DEFAULT_EPSILON).unwrap(),
            r + 0.03
        );
        assert!(matches!(
            v_objective(&b, 0.7, 0.03, 1.0, DEFAULT_EPSILON),
            Err(Error::Domain(_))
        ));
    }

    fn plan(width: f64) -> SolvePlan {
        SolvePlan {
            t_tilde: 10,
            delta_lambda: 0.1,
            width,
        }
    }

    #[test]
    fn zero_loss_update_reaches_the_left_edge() {
        let w = unit_window();
        let b = batch(&[(0.5, false); 4], 1.0);
        let spec = RiskSpec {
            tau: 0.2,
            ..hoeffding_spec(0.2)
        };
        assert_eq!(
            threshold_update(&b, &spec, &plan(0.05), &w, 101, DEFAULT_EPSILON).unwrap(),
            0.0
        );
    }

    #[test]
    fn infeasible_update_stays_put() {
        let w = unit_window();
        let b = batch(&[(0.5, false); 4], 0.8);
        let spec = hoeffding_spec(0.2);
        assert_eq!(
            threshold_update(&b, &spec, &plan(0.5), &w, 101, DEFAULT_EPSILON).unwrap(),
            0.8
        );
        let empty = SampleBatch::new(Vec::new(), 0.8);
        assert!(threshold_update(&empty, &spec, &plan(0.0), &w, 101, DEFAULT_EPSILON).is_err());
    }

    #[test]
    fn quantile_update_agrees_with_expected_for_uniform_weight() {
        let w = unit_window();
        let scores: Vec<(f64, bool)> = (0..200)
            .map(|i| ((i * 53 % 200) as f64 / 200.0, i % 3 == 0))
            .collect();
        let b = batch(&scores, 1.0);
        let spec = hoeffding_spec(0.2);
        let p = plan(0.02);
        let expected = threshold_update(&b, &spec, &p, &w, 513, DEFAULT_EPSILON).unwrap();
        let quantile =
            threshold_update_quantile(&b, &spec, &p, &w, &WeightFn::Uniform, 513, DEFAULT_EPSILON)
                .unwrap();
        assert!((expected - quantile).abs() <= 1.0 / 512.0 + 1e-12);
    }

    #[test]
    fn var_is_rejected() {
        let b = batch(&[(0.5, true)], 1.0);
        let err = threshold_update_quantile(
            &b,
            &hoeffding_spec(0.2),
            &plan(0.0),
            &unit_window(),
            &WeightFn::Var(0.9),
            11,
            DEFAULT_EPSILON,
        );
        assert!(matches!(err, Err(Error::GuaranteeMode(_))));
    }

    #[test]
    fn quantile_width_choices() {
        let cvar = WeightFn::Cvar(0.9);
        let dkw = quantile_plan_width(WidthMethod::DkwBand, &cvar, 1000, 0.01, 0.25).unwrap();
        assert!((dkw - 10.0 * 0.05146997846583985).abs() < 1e-12);
        let clt = WidthMethod::QuantileClt {
            beta: 0.9,
            p_rate: 0.064,
        };
        assert!(quantile_plan_width(clt, &cvar, 1000, 0.01, 0.25).is_ok());
        assert!(quantile_plan_width(clt, &WeightFn::Cvar(0.8), 1000, 0.01, 0.25).is_err());
        assert!(quantile_plan_width(WidthMethod::Clt, &cvar, 1000, 0.01, 0.25).is_err());
    }
}
