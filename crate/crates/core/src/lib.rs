//! Risk-controlled threshold calibration when the deployed threshold shifts
//! the data it is later evaluated on.
//!
//! The [`prc`] loop walks a decision threshold down from a safe starting
//! point, one deployment at a time, while a confidence width and a
//! drift guard keep the risk of every deployed threshold below a target.
//! [`bounds`] supplies the widths, [`quantile`] extends the loop to
//! quantile risk measures such as CVaR, [`env`] simulates a strategically
//! responding population, and [`harness`] runs and validates many
//! calibrations at once.
//!
//! ```
//! use perfrisk::{joint_solve, RiskSpec, ThresholdWindow, WidthMethod};
//!
//! let spec = RiskSpec { alpha: 0.3, delta_alpha: 0.2, delta: 0.1, tau: 1.0, n: 2000 };
//! let window = ThresholdWindow::new(0.0, 1.0).unwrap();
//! let plan = joint_solve(&spec, &window, WidthMethod::Hoeffding).unwrap().unwrap();
//! assert_eq!(plan.t_tilde, 17);
//! ```

// negated comparisons double as NaN rejection
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod env;
pub mod error;
pub mod harness;
pub mod prc;
pub mod quantile;
pub mod risk;

pub use bounds::{precomputed_width, WidthMethod};
pub use env::{analytic_gamma, estimate_gamma, CreditEnv, CreditEnvConfig, Environment};
pub use error::{Error, Result};
pub use harness::{run_experiment, ExperimentConfig, ExperimentReport, FailureKind};
pub use prc::{joint_solve, run_prc, run_prc_quantile, SolvePlan};
pub use quantile::{StepCdf, WeightFn};
pub use risk::{RiskSpec, SampleBatch, SampleRecord, StopReason, ThresholdWindow, Trajectory};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/widths.md")]
    mod widths {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/quantile.md")]
    mod quantile {}
    #[doc = include_str!("../../../book/src/environment.md")]
    mod environment {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
