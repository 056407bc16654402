//! Empirical loss CDFs, distribution-free CDF bands, and quantile-based risk
//! measures `R_psi(F) = int_0^1 psi(p) F^{-1}(p) dp`.
//!
//! A [`StepCdf`] has a piecewise-constant generalized inverse, so every
//! `R_psi` with a piecewise-constant weight is computed exactly as a finite sum
//! over the CDF's jumps; no quadrature is involved.
//!
//! Bands follow the Dvoretzky-Kiefer-Wolfowitz envelope. Because losses live in
//! `[0, 1]`, the upper CDF puts its extra mass at loss 0 and the lower CDF
//! leaves its missing mass at loss 1, so both ends of the band are again
//! distributions on `[0, 1]`. An upper CDF bound yields a lower risk bound and
//! vice versa.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Result};

/// A right-continuous step CDF with jumps at `support`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCdf {
    support: Vec<f64>,
    cum_prob: Vec<f64>,
}

impl StepCdf {
    pub fn new(support: Vec<f64>, cum_prob: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != cum_prob.len() {
            return Err(invalid_input(
                "support and cumulative probabilities must be non-empty and equal length",
            ));
        }
        if support.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid_input("support must be strictly increasing"));
        }
        if cum_prob.windows(2).any(|w| !(w[0] < w[1])) || !(cum_prob[0] > 0.0) {
            return Err(invalid_input(
                "cumulative probabilities must be strictly increasing in (0, 1]",
            ));
        }
        if *cum_prob.last().unwrap() != 1.0 {
            return Err(invalid_input("final cumulative probability must be 1"));
        }
        Ok(Self { support, cum_prob })
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn cum_prob(&self) -> &[f64] {
        &self.cum_prob
    }

    /// `F(w)`.
    pub fn eval(&self, w: f64) -> f64 {
        let idx = self.support.partition_point(|&x| x <= w);
        if idx == 0 {
            0.0
        } else {
            self.cum_prob[idx - 1]
        }
    }

    /// Iterates `(value, lower cumulative, upper cumulative)` over the jumps;
    /// `F^{-1}` equals `value` on `(lower, upper]`.
    fn pieces(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let mut prev = 0.0;
        self.support
            .iter()
            .zip(&self.cum_prob)
            .map(move |(&x, &c)| {
                let piece = (x, prev, c);
                prev = c;
                piece
            })
    }

    /// Pointwise domination `self(w) <= other(w)` at every jump of either CDF.
    pub fn dominated_by(&self, other: &StepCdf) -> bool {
        self.support
            .iter()
            .chain(other.support.iter())
            .all(|&w| self.eval(w) <= other.eval(w))
    }
}

/// Step CDF of the sample; ties merge into one jump.
pub fn empirical_cdf(losses: &[f64]) -> Result<StepCdf> {
    if losses.is_empty() {
        return Err(invalid_input("empirical CDF of an empty sample"));
    }
    if let Some(bad) = losses.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(invalid_input(format!("loss {bad} outside [0, 1]")));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut support = Vec::new();
    let mut cum_prob = Vec::new();
    for (i, &x) in sorted.iter().enumerate() {
        if support.last() == Some(&x) {
            *cum_prob.last_mut().unwrap() = (i + 1) as f64 / n;
        } else {
            support.push(x);
            cum_prob.push((i + 1) as f64 / n);
        }
    }
    Ok(StepCdf { support, cum_prob })
}

/// Generalized inverse `F^{-1}(p) = inf { x : F(x) >= p }` for `p` in `(0, 1]`.
pub fn inverse_cdf(cdf: &StepCdf, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid_param(format!("p = {p} must lie in (0, 1]")));
    }
    let idx = cdf.cum_prob.partition_point(|&c| c < p);
    Ok(cdf.support[idx.min(cdf.support.len() - 1)])
}

/// DKW half-width `sqrt(ln(2/delta') / (2n))`.
pub fn dkw_epsilon(n: usize, delta_prime: f64) -> Result<f64> {
    if n == 0 {
        return Err(invalid_param("band needs n >= 1"));
    }
    if !(delta_prime > 0.0 && delta_prime <= 1.0) {
        return Err(invalid_param(format!(
            "delta' = {delta_prime} must lie in (0, 1]"
        )));
    }
    Ok(((2.0 / delta_prime).ln() / (2.0 * n as f64)).sqrt())
}

/// Lower and upper CDF envelopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfBand {
    pub lower: StepCdf,
    pub upper: StepCdf,
    pub level: f64,
    pub epsilon: f64,
}

impl CdfBand {
    /// Zero-width band around `cdf`.
    pub fn degenerate(cdf: &StepCdf) -> Self {
        Self {
            lower: cdf.clone(),
            upper: cdf.clone(),
            level: 1.0,
            epsilon: 0.0,
        }
    }
}

/// DKW band `F_hat -/+ epsilon`, clipped to `[0, 1]`, around a CDF built from `n` points.
pub fn dkw_band(cdf: &StepCdf, n: usize, delta_prime: f64) -> Result<CdfBand> {
    let epsilon = dkw_epsilon(n, delta_prime)?;

    // lower envelope: drop mass epsilon from the bottom, park it at loss 1
    let mut lo_support = Vec::new();
    let mut lo_cum = Vec::new();
    for (&x, &c) in cdf.support.iter().zip(&cdf.cum_prob) {
        let v = c - epsilon;
        if x < 1.0 && v > 0.0 && lo_cum.last().is_none_or(|&last| v > last) {
            lo_support.push(x);
            lo_cum.push(v);
        }
    }
    lo_support.push(1.0);
    lo_cum.push(1.0);

    // upper envelope: extra mass epsilon at loss 0
    let mut up_support = vec![0.0];
    let mut up_cum = vec![(cdf.eval(0.0) + epsilon).min(1.0)];
    for (&x, &c) in cdf.support.iter().zip(&cdf.cum_prob) {
        let last = *up_cum.last().unwrap();
        if last >= 1.0 {
            break;
        }
        let v = (c + epsilon).min(1.0);
        if x > 0.0 && v > last {
            up_support.push(x);
            up_cum.push(v);
        }
    }

    Ok(CdfBand {
        lower: StepCdf::new(lo_support, lo_cum)?,
        upper: StepCdf::new(up_support, up_cum)?,
        level: delta_prime,
        epsilon,
    })
}

/// The weight `psi` defining a quantile-based risk measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    /// `psi = 1`: expected risk.
    Uniform,
    /// `psi = 1/(1-beta)` on `[beta, 1]`: mean of the worst `1 - beta` tail.
    Cvar(f64),
    /// Point evaluation `F^{-1}(beta)`. Has no density; measurement only.
    Var(f64),
    /// `psi = weights[j]` on `[breakpoints[j], breakpoints[j+1])`.
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl WeightFn {
    pub fn validate(&self) -> Result<()> {
        match self {
            WeightFn::Uniform => Ok(()),
            WeightFn::Cvar(beta) => {
                if (0.0..1.0).contains(beta) {
                    Ok(())
                } else {
                    Err(invalid_param(format!(
                        "CVaR level {beta} must lie in [0, 1)"
                    )))
                }
            }
            WeightFn::Var(beta) => {
                if *beta > 0.0 && *beta < 1.0 {
                    Ok(())
                } else {
                    Err(invalid_param(format!(
                        "VaR level {beta} must lie in (0, 1)"
                    )))
                }
            }
            WeightFn::PiecewiseConstant {
                breakpoints,
                weights,
            } => {
                if breakpoints.len() != weights.len() + 1 || weights.is_empty() {
                    return Err(invalid_param("need one more breakpoint than weights"));
                }
                if breakpoints[0] != 0.0 || *breakpoints.last().unwrap() != 1.0 {
                    return Err(invalid_param("breakpoints must run from 0 to 1"));
                }
                if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(invalid_param("breakpoints must be strictly increasing"));
                }
                if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                    return Err(invalid_param("weights must be finite and non-negative"));
                }
                let total = self.integral(0.0, 1.0);
                if (total - 1.0).abs() > 1e-9 {
                    return Err(invalid_param(format!(
                        "weights integrate to {total}, not 1"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn has_density(&self) -> bool {
        !matches!(self, WeightFn::Var(_))
    }

    /// `int_a^b psi(p) dp` for the density variants.
    fn integral(&self, a: f64, b: f64) -> f64 {
        let overlap = |lo: f64, hi: f64| (b.min(hi) - a.max(lo)).max(0.0);
        match self {
            WeightFn::Uniform => overlap(0.0, 1.0),
            WeightFn::Cvar(beta) => overlap(*beta, 1.0) / (1.0 - beta),
            WeightFn::Var(_) => unreachable!("VaR has no density"),
            WeightFn::PiecewiseConstant {
                breakpoints,
                weights,
            } => breakpoints
                .windows(2)
                .zip(weights)
                .map(|(w, &weight)| weight * overlap(w[0], w[1]))
                .sum(),
        }
    }

    /// `psi(p)`, for the density variants.
    pub fn density(&self, p: f64) -> Option<f64> {
        match self {
            WeightFn::Uniform => Some(1.0),
            WeightFn::Cvar(beta) => Some(if p >= *beta { 1.0 / (1.0 - beta) } else { 0.0 }),
            WeightFn::Var(_) => None,
            WeightFn::PiecewiseConstant {
                breakpoints,
                weights,
            } => {
                let j = breakpoints
                    .partition_point(|&b| b <= p)
                    .clamp(1, weights.len());
                Some(weights[j - 1])
            }
        }
    }
}

/// `R_psi(F)`, exact for step CDFs.
pub fn quantile_risk(cdf: &StepCdf, psi: &WeightFn) -> Result<f64> {
    psi.validate()?;
    if let WeightFn::Var(beta) = psi {
        return inverse_cdf(cdf, *beta);
    }
    Ok(cdf
        .pieces()
        .map(|(x, lo, hi)| x * psi.integral(lo, hi))
        .sum())
}

/// Risk bounds induced by a CDF band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskInterval {
    pub lower: f64,
    pub upper: f64,
    /// Set for VaR, whose interval carries no risk-control guarantee.
    pub measurement_only: bool,
}

/// `[R_psi(upper CDF), R_psi(lower CDF)]`: a larger CDF has a smaller inverse.
pub fn risk_interval_from_band(band: &CdfBand, psi: &WeightFn) -> Result<RiskInterval> {
    Ok(RiskInterval {
        lower: quantile_risk(&band.upper, psi)?,
        upper: quantile_risk(&band.lower, psi)?,
        measurement_only: !psi.has_density(),
    })
}

/// Largest one-sided deviation of the DKW-band risk bounds from the point estimate.
pub fn quantile_width_at(
    n: usize,
    delta_prime: f64,
    psi: &WeightFn,
    losses: &[f64],
) -> Result<f64> {
    let cdf = empirical_cdf(losses)?;
    let band = dkw_band(&cdf, n, delta_prime)?;
    let point = quantile_risk(&cdf, psi)?;
    let interval = risk_interval_from_band(&band, psi)?;
    Ok((interval.upper - point).max(point - interval.lower))
}

/// `(int_0^1 |psi(p)|^v dp)^{1/v}`, with `v = f64::INFINITY` giving `sup psi`.
pub fn m_factor(psi: &WeightFn, v: f64) -> Result<f64> {
    psi.validate()?;
    if !(v >= 1.0) {
        return Err(invalid_param(format!(
            "Hoelder exponent v = {v} must be >= 1"
        )));
    }
    match psi {
        WeightFn::Uniform => Ok(1.0),
        WeightFn::Cvar(beta) => {
            let tail = 1.0 - beta;
            Ok(if v.is_infinite() {
                1.0 / tail
            } else {
                tail.powf(1.0 / v - 1.0)
            })
        }
        WeightFn::Var(_) => Err(invalid_param(
            "VaR has no density; its sensitivity factor is undefined",
        )),
        WeightFn::PiecewiseConstant {
            breakpoints,
            weights,
        } => {
            let live = breakpoints.windows(2).zip(weights);
            if v.is_infinite() {
                Ok(live.map(|(_, &w)| w).fold(0.0, f64::max))
            } else {
                let s: f64 = live.map(|(b, &w)| w.powf(v) * (b[1] - b[0])).sum();
                Ok(s.powf(1.0 / v))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn empirical_cdf_counts() {
        let f = empirical_cdf(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(f.support(), &[0.0, 1.0]);
        assert!(close(f.eval(0.0), 2.0 / 3.0, 1e-15));
        assert_eq!(f.eval(1.0), 1.0);
        assert_eq!(f.eval(-0.1), 0.0);

        let c = empirical_cdf(&[0.3; 5]).unwrap();
        assert_eq!(c.support(), &[0.3]);
        assert_eq!(c.cum_prob(), &[1.0]);

        assert!(empirical_cdf(&[]).is_err());
        assert!(empirical_cdf(&[1.5]).is_err());
    }

    #[test]
    fn inverse_cdf_definition() {
        let f = StepCdf::new(vec![0.2, 0.8], vec![0.5, 1.0]).unwrap();
        assert_eq!(inverse_cdf(&f, 0.5).unwrap(), 0.2);
        assert_eq!(inverse_cdf(&f, 0.75).unwrap(), 0.8);
        assert_eq!(inverse_cdf(&f, 1.0).unwrap(), 0.8);
        assert!(inverse_cdf(&f, 0.0).is_err());
        assert!(inverse_cdf(&f, 1.1).is_err());
    }

    #[test]
    fn dkw_examples() {
        assert!(close(
            dkw_epsilon(200, 0.05).unwrap(),
            0.09603227913199208,
            1e-12
        ));
        assert!(close(
            dkw_epsilon(200, 1.0).unwrap(),
            (2f64.ln() / 400.0).sqrt(),
            1e-15
        ));
    }

    #[test]
    fn band_brackets_the_empirical_cdf() {
        let losses: Vec<f64> = (0..50).map(|i| ((i * 37) % 50) as f64 / 49.0).collect();
        let f = empirical_cdf(&losses).unwrap();
        let band = dkw_band(&f, 50, 0.1).unwrap();
        for i in 0..=200 {
            let w = i as f64 / 200.0;
            assert!(band.lower.eval(w) <= f.eval(w) && f.eval(w) <= band.upper.eval(w));
        }
        assert!(band.lower.dominated_by(&band.upper));
    }

    #[test]
    fn quantile_risk_examples() {
        let mut losses = vec![0.0; 9];
        losses.push(0.5);
        losses.push(1.0);
        let mean = 1.5 / 11.0;
        let f = empirical_cdf(&losses).unwrap();
        assert!(close(
            quantile_risk(&f, &WeightFn::Uniform).unwrap(),
            mean,
            1e-15
        ));

        let mut ten = vec![0.0; 8];
        ten.extend([0.5, 1.0]);
        let f = empirical_cdf(&ten).unwrap();
        assert!(close(
            quantile_risk(&f, &WeightFn::Cvar(0.9)).unwrap(),
            1.0,
            1e-12
        ));

        let f = empirical_cdf(&[0.0, 1.0]).unwrap();
        assert!(close(
            quantile_risk(&f, &WeightFn::Cvar(0.5)).unwrap(),
            1.0,
            1e-12
        ));
        assert_eq!(quantile_risk(&f, &WeightFn::Var(0.5)).unwrap(), 0.0);
        assert_eq!(quantile_risk(&f, &WeightFn::Var(0.6)).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_band_collapses() {
        let f = empirical_cdf(&[0.1, 0.4, 0.4, 0.9]).unwrap();
        let band = CdfBand::degenerate(&f);
        let point = quantile_risk(&f, &WeightFn::Cvar(0.5)).unwrap();
        let iv = risk_interval_from_band(&band, &WeightFn::Cvar(0.5)).unwrap();
        assert_eq!((iv.lower, iv.upper), (point, point));
    }

    #[test]
    fn interval_narrows_as_confidence_drops() {
        let losses: Vec<f64> = (0..100).map(|i| (i as f64 / 99.0).powi(2)).collect();
        let f = empirical_cdf(&losses).unwrap();
        let mut last = f64::INFINITY;
        for dp in [0.001, 0.01, 0.1, 0.5] {
            let iv = risk_interval_from_band(&dkw_band(&f, 100, dp).unwrap(), &WeightFn::Uniform)
                .unwrap();
            let width = iv.upper - iv.lower;
            assert!(width < last);
            last = width;
        }
    }

    #[test]
    fn uniform_interval_matches_midpoint_quadrature() {
        let losses: Vec<f64> = (0..100).map(|i| ((i * 61) % 100) as f64 / 100.0).collect();
        let f = empirical_cdf(&losses).unwrap();
        let band = dkw_band(&f, 100, 0.05).unwrap();
        let iv = risk_interval_from_band(&band, &WeightFn::Uniform).unwrap();
        let grid = 10_000;
        let integrate = |cdf: &StepCdf| -> f64 {
            (0..grid)
                .map(|i| inverse_cdf(cdf, (i as f64 + 0.5) / grid as f64).unwrap())
                .sum::<f64>()
                / grid as f64
        };
        // a step inverse has at most ~200 jumps; each costs at most 1/grid in midpoint error
        assert!(close(iv.lower, integrate(&band.upper), 0.02));
        assert!(close(iv.upper, integrate(&band.lower), 0.02));
        let point = quantile_risk(&f, &WeightFn::Uniform).unwrap();
        assert!(iv.upper - point <= band.epsilon + 1e-12);
        assert!(point - iv.lower <= band.epsilon + 1e-12);
    }

    #[test]
    fn quantile_width_examples() {
        // losses symmetric about 1/2 with a band away from the clip points
        let losses: Vec<f64> = (0..=100).map(|i| 0.25 + 0.5 * i as f64 / 100.0).collect();
        let up = quantile_width_at(101, 0.5, &WeightFn::Uniform, &losses).unwrap();
        let f = empirical_cdf(&losses).unwrap();
        let band = dkw_band(&f, 101, 0.5).unwrap();
        let point = quantile_risk(&f, &WeightFn::Uniform).unwrap();
        let iv = risk_interval_from_band(&band, &WeightFn::Uniform).unwrap();
        assert!(close(iv.upper - point, point - iv.lower, 1e-12));
        assert!(close(up, iv.upper - point, 1e-15));

        let cvar = quantile_width_at(101, 0.5, &WeightFn::Cvar(0.9), &losses).unwrap();
        assert!(cvar >= up);
    }

    #[test]
    fn var_interval_is_flagged() {
        let f = empirical_cdf(&[0.1, 0.5]).unwrap();
        let band = dkw_band(&f, 2, 0.5).unwrap();
        assert!(
            risk_interval_from_band(&band, &WeightFn::Var(0.5))
                .unwrap()
                .measurement_only
        );
        assert!(
            !risk_interval_from_band(&band, &WeightFn::Uniform)
                .unwrap()
                .measurement_only
        );
    }

    #[test]
    fn m_factor_examples() {
        assert_eq!(m_factor(&WeightFn::Uniform, 1.0).unwrap(), 1.0);
        assert_eq!(m_factor(&WeightFn::Uniform, f64::INFINITY).unwrap(), 1.0);
        assert!(close(
            m_factor(&WeightFn::Cvar(0.9), f64::INFINITY).unwrap(),
            10.0,
            1e-12
        ));
        assert!(close(
            m_factor(&WeightFn::Cvar(0.5), 1.0).unwrap(),
            1.0,
            1e-15
        ));
        assert!(close(
            m_factor(&WeightFn::Cvar(0.75), 2.0).unwrap(),
            2.0,
            1e-12
        ));
        assert!(m_factor(&WeightFn::Var(0.9), 1.0).is_err());

        let pc = WeightFn::PiecewiseConstant {
            breakpoints: vec![0.0, 0.5, 1.0],
            weights: vec![0.5, 1.5],
        };
        assert!(close(m_factor(&pc, f64::INFINITY).unwrap(), 1.5, 1e-15));
        assert!(close(
            m_factor(&pc, 2.0).unwrap(),
            (0.5f64 * 0.25 + 0.5 * 2.25).sqrt(),
            1e-15
        ));
    }

    #[test]
    fn weight_validation() {
        let bad = WeightFn::PiecewiseConstant {
            breakpoints: vec![0.0, 0.5, 1.0],
            weights: vec![1.0, 1.5],
        };
        assert!(bad.validate().is_err());
        assert!(WeightFn::Cvar(1.0).validate().is_err());
        assert!(WeightFn::Var(0.0).validate().is_err());
        assert!(close(
            WeightFn::Cvar(0.9).density(0.95).unwrap(),
            10.0,
            1e-12
        ));
        assert_eq!(WeightFn::Cvar(0.9).density(0.5), Some(0.0));
    }
}
