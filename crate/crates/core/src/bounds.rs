//! Confidence widths `c(n, delta')` for the risk of losses in `[0, 1]`.
//!
//! Each width is a half-width around the empirical risk that covers the true
//! risk with probability at least `1 - delta'`. The calibration loop needs one
//! constant width fixed before the first deployment, so the sample-dependent
//! constructions (empirical Bernstein, Hoeffding-Bentkus, CLT) are evaluated at
//! the worst-case Bernoulli mean reachable below the target risk level, see
//! [`precomputed_width`].

use std::f64::consts::E;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid_param, Error, Result};
use crate::quantile::dkw_epsilon;

/// Absolute tolerance of the Hoeffding-Bentkus width search.
pub const HB_TOLERANCE: f64 = 1e-6;

/// Which confidence-width construction is in force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthMethod {
    Hoeffding,
    EmpiricalBernstein,
    HoeffdingBentkus,
    Clt,
    /// Closed-form CLT width for beta-CVaR of a cost-weighted binary loss with
    /// base rate `p_rate`. Requires `beta <= 1 - p_rate`.
    QuantileClt {
        beta: f64,
        p_rate: f64,
    },
    /// Uniform CDF band of half-width `sqrt(ln(2/delta') / 2n)`; scaled by the
    /// sup of the weight function when used for quantile risk.
    DkwBand,
}

impl WidthMethod {
    pub fn validate(&self) -> Result<()> {
        if let WidthMethod::QuantileClt { beta, p_rate } = *self {
            check_quantile_regime(beta, p_rate)?;
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            WidthMethod::Hoeffding => "hoeffding",
            WidthMethod::EmpiricalBernstein => "bernstein",
            WidthMethod::HoeffdingBentkus => "hb",
            WidthMethod::Clt => "clt",
            WidthMethod::QuantileClt { .. } => "quantile_clt",
            WidthMethod::DkwBand => "dkw",
        }
    }
}

impl fmt::Display for WidthMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses the parameter-free methods. `quantile_clt` needs `beta` and
/// `p_rate` and must be built directly.
impl FromStr for WidthMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "hoeffding" => Ok(WidthMethod::Hoeffding),
            "bernstein" | "empirical_bernstein" => Ok(WidthMethod::EmpiricalBernstein),
            "hb" | "hoeffding_bentkus" => Ok(WidthMethod::HoeffdingBentkus),
            "clt" => Ok(WidthMethod::Clt),
            "dkw" | "dkw_band" => Ok(WidthMethod::DkwBand),
            "quantile_clt" => Err(invalid_param(
                "quantile_clt needs beta and p_rate; build WidthMethod::QuantileClt directly",
            )),
            other => Err(invalid_param(format!("unknown width method `{other}`"))),
        }
    }
}

fn check_delta_prime(delta_prime: f64) -> Result<()> {
    if delta_prime > 0.0 && delta_prime < 1.0 {
        Ok(())
    } else {
        Err(invalid_param(format!(
            "delta' = {delta_prime} must lie in (0, 1)"
        )))
    }
}

fn check_quantile_regime(beta: f64, p_rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(invalid_param(format!("beta = {beta} must lie in [0, 1)")));
    }
    if !(p_rate > 0.0 && p_rate < 1.0) {
        return Err(invalid_param(format!(
            "p_rate = {p_rate} must lie in (0, 1)"
        )));
    }
    if beta > 1.0 - p_rate {
        return Err(Error::Regime(format!(
            "beta = {beta} exceeds 1 - p_rate = {}; only the beta <= 1 - p regime is supported",
            1.0 - p_rate
        )));
    }
    Ok(())
}

/// Standard normal quantile `Phi^{-1}(p)`.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid_param(format!(
            "normal quantile needs p in (0, 1), got {p}"
        )));
    }
    Ok(-std::f64::consts::SQRT_2 * erfc_inv(2.0 * p))
}

/// `sqrt(ln(2/delta') / (2n))`.
pub fn hoeffding_width(n: usize, delta_prime: f64) -> Result<f64> {
    if n == 0 {
        return Err(invalid_param("n must be at least 1"));
    }
    check_delta_prime(delta_prime)?;
    Ok(((2.0 / delta_prime).ln() / (2.0 * n as f64)).sqrt())
}

/// Two-sided empirical Bernstein width at an assumed mean `r_hat`, using the
/// Bernoulli variance `r_hat (1 - r_hat)` as the sample variance.
pub fn bernstein_width_at(n: usize, delta_prime: f64, r_hat: f64) -> Result<f64> {
    if n < 2 {
        return Err(invalid_param(format!(
            "empirical Bernstein needs n >= 2, got {n}"
        )));
    }
    check_delta_prime(delta_prime)?;
    check_unit("r_hat", r_hat)?;
    let log_term = (4.0 / delta_prime).ln();
    let n = n as f64;
    let variance = r_hat * (1.0 - r_hat);
    Ok((2.0 * variance * log_term / n).sqrt() + 7.0 * log_term / (3.0 * (n - 1.0)))
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(invalid_param(format!("{name} = {x} must lie in [0, 1]")))
    }
}

/// Bernoulli relative entropy `a ln(a/b) + (1-a) ln((1-a)/(1-b))` with `0 ln 0 = 0`.
pub fn bernoulli_kl(a: f64, b: f64) -> f64 {
    fn term(x: f64, y: f64) -> f64 {
        if x == 0.0 {
            0.0
        } else {
            x * (x / y).ln()
        }
    }
    term(a, b) + term(1.0 - a, 1.0 - b)
}

/// `P(Bin(n, p) <= k)` by log-space summation of the exact probability masses.
pub fn binomial_cdf(n: u64, p: f64, k: u64) -> f64 {
    if k >= n {
        return 1.0;
    }
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let ln_p = p.ln();
    let ln_q = (-p).ln_1p();
    let ln_n_fact = ln_gamma(n as f64 + 1.0);
    let log_pmf = |i: u64| {
        ln_n_fact - ln_gamma(i as f64 + 1.0) - ln_gamma((n - i) as f64 + 1.0)
            + i as f64 * ln_p
            + (n - i) as f64 * ln_q
    };
    // the masses are unimodal, so the largest term on [0, k] is at min(k, mode)
    let mode = ((n + 1) as f64 * p).floor() as u64;
    let peak = log_pmf(k.min(mode));
    let sum: f64 = (0..=k).map(|i| (log_pmf(i) - peak).exp()).sum();
    (peak + sum.ln()).exp().min(1.0)
}

/// Hoeffding-Bentkus p-value for the null `R > beta_null` given `n` samples
/// with mean `r_hat`:
/// `min(exp(-n h1(min(r_hat, beta), beta)), e P(Bin(n, beta) <= ceil(n r_hat)))`.
pub fn hb_pvalue(n: usize, r_hat: f64, beta_null: f64) -> Result<f64> {
    if n == 0 {
        return Err(invalid_param("n must be at least 1"));
    }
    check_unit("r_hat", r_hat)?;
    if !(beta_null > 0.0 && beta_null < 1.0) {
        return Err(Error::DegenerateNull(beta_null));
    }
    let nf = n as f64;
    let hoeffding = (-nf * bernoulli_kl(r_hat.min(beta_null), beta_null)).exp();
    // n * r_hat is an integer count in practice; shave rounding noise before ceil
    let k = (nf * r_hat - 1e-9).ceil().max(0.0) as u64;
    let bentkus = E * binomial_cdf(n as u64, beta_null, k);
    Ok(hoeffding.min(bentkus).clamp(0.0, 1.0))
}

/// p-value for "true risk exceeds `level`"; 0 when the null is impossible,
/// 1 when it cannot be rejected at all.
fn one_sided_pvalue(n: usize, mean: f64, level: f64) -> f64 {
    if level >= 1.0 {
        0.0
    } else if level <= 0.0 {
        1.0
    } else {
        hb_pvalue(n, mean, level).expect("level is inside (0, 1)")
    }
}

fn hb_two_sided(n: usize, r_hat: f64, c: f64) -> f64 {
    let upper = one_sided_pvalue(n, r_hat, r_hat + c);
    let lower = one_sided_pvalue(n, 1.0 - r_hat, 1.0 - (r_hat - c));
    upper + lower
}

/// Narrowest `c >= 0` whose upper and lower Hoeffding-Bentkus p-values sum to
/// at most `delta'`. Bisection on `[0, 1]`, returning the upper endpoint.
pub fn hb_width_at(n: usize, delta_prime: f64, r_hat: f64) -> Result<f64> {
    if n == 0 {
        return Err(invalid_param("n must be at least 1"));
    }
    check_delta_prime(delta_prime)?;
    check_unit("r_hat", r_hat)?;
    let feasible = |c: f64| hb_two_sided(n, r_hat, c) <= delta_prime;
    if feasible(0.0) {
        return Ok(0.0);
    }
    if !feasible(1.0) {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > HB_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `Phi^{-1}(1 - delta'/2) * sigma_hat / sqrt(n)`.
pub fn clt_width_at(n: usize, delta_prime: f64, sigma_hat: f64) -> Result<f64> {
    if n < 2 {
        return Err(invalid_param(format!("CLT width needs n >= 2, got {n}")));
    }
    check_delta_prime(delta_prime)?;
    if !(sigma_hat >= 0.0 && sigma_hat.is_finite()) {
        return Err(invalid_param(format!(
            "sigma_hat = {sigma_hat} must be >= 0"
        )));
    }
    let z = normal_quantile(1.0 - delta_prime / 2.0)?;
    Ok(z * sigma_hat / (n as f64).sqrt())
}

/// CLT width for beta-CVaR when a fraction `p' <= p_rate` of the population
/// carries a `U[0, 1]` cost: the asymptotic variance `(4 - 3p') p' / 12 / (1-beta)^2`
/// is largest at `p' = p_rate`.
pub fn cvar_clt_width(n: usize, delta_prime: f64, beta: f64, p_rate: f64) -> Result<f64> {
    if n < 2 {
        return Err(invalid_param(format!("CLT width needs n >= 2, got {n}")));
    }
    check_delta_prime(delta_prime)?;
    check_quantile_regime(beta, p_rate)?;
    let z = normal_quantile(1.0 - delta_prime / 2.0)?;
    let variance = (4.0 - 3.0 * p_rate) * p_rate / (12.0 * n as f64);
    Ok(z * variance.sqrt() / (1.0 - beta))
}

/// The constant width used by every iteration of a calibration run.
///
/// Hoeffding and the DKW band do not depend on the risk level. The
/// sample-dependent methods are evaluated at `r* = min(alpha, 1/2)`: every
/// mean the loop can accept lies in `[0, alpha]`, and the Bernoulli variance
/// `r (1 - r)` is largest there at `r*`.
pub fn precomputed_width(
    method: WidthMethod,
    n: usize,
    delta_prime: f64,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid_param(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    let r_star = alpha.min(0.5);
    match method {
        WidthMethod::Hoeffding => hoeffding_width(n, delta_prime),
        WidthMethod::DkwBand => dkw_epsilon(n, delta_prime),
        WidthMethod::EmpiricalBernstein => bernstein_width_at(n, delta_prime, r_star),
        WidthMethod::HoeffdingBentkus => hb_width_at(n, delta_prime, r_star),
        WidthMethod::Clt => clt_width_at(n, delta_prime, (r_star * (1.0 - r_star)).sqrt()),
        WidthMethod::QuantileClt { beta, p_rate } => cvar_clt_width(n, delta_prime, beta, p_rate),
    }
}
