//! Normal-theory inference and false-discovery-rate control.
//!
//! Effect estimates come with conservative variance estimates, so intervals
//! and p-values use the normal reference distribution. When many contrasts
//! (or subgroups) are tested at once, the step-up procedures here control the
//! false discovery rate: [`bh_adjust`] under independence or positive
//! dependence, [`by_adjust`] under arbitrary dependence.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("p-values must lie in [0, 1]; entry {index} is {value}")]
    InvalidPValue { index: usize, value: f64 },
    #[error("alpha must lie strictly inside (0, 1), got {alpha}")]
    InvalidAlpha { alpha: f64 },
    #[error("variance ratio denominator must be positive and finite, got {value}")]
    NonPositiveDenominator { value: f64 },
    #[error("variance ratio numerator must be non-negative and finite, got {value}")]
    InvalidNumerator { value: f64 },
}

/// A point estimate with its normal-approximation interval and p-value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InferenceResult {
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
    pub alpha: f64,
}

/// Two-sided normal test and confidence interval.
///
/// With `se = sqrt(var)`: the interval is `estimate ± z_{1-alpha/2} * se` and
/// the p-value is `2 * (1 - Phi(|estimate| / se))`. A zero standard error
/// collapses the interval to a point; the p-value is then 0 for a nonzero
/// estimate and 1 otherwise. The normal CDF and quantile come from an
/// erf-based implementation accurate to well below 1e-7 (asserted in tests).
pub fn z_inference(estimate: f64, var: f64, alpha: f64) -> Result<InferenceResult, InferenceError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(InferenceError::InvalidAlpha { alpha });
    }
    assert!(estimate.is_finite(), "estimate must be finite");
    assert!(
        var.is_finite() && var >= 0.0,
        "variance must be finite and non-negative"
    );
    let se = var.sqrt();
    let normal = Normal::standard();
    if se == 0.0 {
        return Ok(InferenceResult {
            estimate,
            se,
            ci_lower: estimate,
            ci_upper: estimate,
            p_value: if estimate == 0.0 { 1.0 } else { 0.0 },
            alpha,
        });
    }
    let z = normal.inverse_cdf(1.0 - alpha / 2.0);
    let p_value = 2.0 * (1.0 - normal.cdf((estimate / se).abs()));
    Ok(InferenceResult {
        estimate,
        se,
        ci_lower: estimate - z * se,
        ci_upper: estimate + z * se,
        p_value: p_value.min(1.0),
        alpha,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FdrMethod {
    #[serde(rename = "bh")]
    BenjaminiHochberg,
    #[serde(rename = "by")]
    BenjaminiYekutieli,
}

/// Adjusted p-values and the step-up rejection set, in input order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdrResult {
    pub method: FdrMethod,
    pub alpha: f64,
    pub adjusted: Vec<f64>,
    pub rejected: Vec<bool>,
    pub n_rejected: usize,
}

/// Benjamini-Hochberg step-up adjustment at level `alpha`.
///
/// Sorting ascending, the adjusted value of the rank-i p-value is
/// `min_{j >= i} min(1, (m / j) * p_(j))`; a hypothesis is rejected exactly
/// when its adjusted value is at most `alpha`, which coincides with the
/// classical step-up rule. Ties and duplicates are handled stably: equal
/// inputs receive equal adjusted values, and output order matches input
/// order.
pub fn bh_adjust(p_values: &[f64], alpha: f64) -> Result<FdrResult, InferenceError> {
    step_up(p_values, alpha, FdrMethod::BenjaminiHochberg, 1.0)
}

/// Benjamini-Yekutieli step-up adjustment at level `alpha`.
///
/// Identical to [`bh_adjust`] with the threshold deflated by
/// `c(m) = sum_{j=1..m} 1/j`, which buys validity under arbitrary dependence.
pub fn by_adjust(p_values: &[f64], alpha: f64) -> Result<FdrResult, InferenceError> {
    let m = p_values.len();
    let c_m: f64 = (1..=m).map(|j| 1.0 / j as f64).sum();
    step_up(p_values, alpha, FdrMethod::BenjaminiYekutieli, c_m.max(1.0))
}

fn step_up(
    p_values: &[f64],
    alpha: f64,
    method: FdrMethod,
    scale: f64,
) -> Result<FdrResult, InferenceError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(InferenceError::InvalidAlpha { alpha });
    }
    for (index, &value) in p_values.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(InferenceError::InvalidPValue { index, value });
        }
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));

    let mut adjusted = vec![0.0; m];
    let mut running_min = 1.0f64;
    for (rank_from_top, &idx) in order.iter().enumerate().rev() {
        let rank = rank_from_top + 1; // 1-based ascending rank
        let candidate = (scale * m as f64 / rank as f64) * p_values[idx];
        running_min = running_min.min(candidate).min(1.0);
        adjusted[idx] = running_min;
    }
    let rejected: Vec<bool> = adjusted.iter().map(|&a| a <= alpha).collect();
    let n_rejected = rejected.iter().filter(|&&r| r).count();
    Ok(FdrResult {
        method,
        alpha,
        adjusted,
        rejected,
        n_rejected,
    })
}

/// Precision gain of `method` over `baseline`: `var_baseline / var_method`.
///
/// Values above 1 mean `method` is more precise. The denominator must be
/// strictly positive; a degenerate (zero) method variance has no meaningful
/// ratio and is reported as an error.
pub fn variance_ratio(var_baseline: f64, var_method: f64) -> Result<f64, InferenceError> {
    if !var_baseline.is_finite() || var_baseline < 0.0 {
        return Err(InferenceError::InvalidNumerator {
            value: var_baseline,
        });
    }
    if !var_method.is_finite() || var_method <= 0.0 {
        return Err(InferenceError::NonPositiveDenominator { value: var_method });
    }
    Ok(var_baseline / var_method)
}
