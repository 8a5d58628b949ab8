//! Core dataset types and eligibility validation.
//!
//! A [`ContrastDataset`] holds one two-arm comparison: every unit carries a
//! realized outcome, its treatment indicator, covariates, and optionally a
//! remnant prediction of its untreated outcome. Construction enforces the
//! structural invariants (finite outcomes, uniform covariate width, known
//! assignment probability in (0, 1), unique unit ids), so downstream code can
//! rely on them. [`validate_contrast`] applies the statistical eligibility
//! gates used before analysis: outcome variance in both arms, minimum arm
//! size, and an exact binomial check that the realized arm split is
//! consistent with the declared assignment probability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{all_equal, log_sum_exp};

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("dataset `{contrast_id}` has no units")]
    EmptyDataset { contrast_id: String },
    #[error("assignment probability must be finite and strictly inside (0, 1), got {p}")]
    InvalidAssignmentProbability { p: f64 },
    #[error("unit `{unit}`: outcome must be finite, got {value}")]
    NonFiniteOutcome { unit: String, value: f64 },
    #[error("unit `{unit}`: covariate {index} must be finite")]
    NonFiniteCovariate { unit: String, index: usize },
    #[error("unit `{unit}`: remnant prediction must be finite")]
    NonFiniteRemnantPrediction { unit: String },
    #[error("unit `{unit}` has {got} covariates, expected {expected}")]
    CovariateWidthMismatch {
        unit: String,
        got: usize,
        expected: usize,
    },
    #[error("duplicate unit id `{unit}`")]
    DuplicateUnitId { unit: String },
    #[error("unit ids must be non-empty")]
    EmptyUnitId,
}

/// One experimental unit: realized outcome, arm, and baseline information.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitRecord {
    pub id: String,
    pub treated: bool,
    pub y: f64,
    pub x: Vec<f64>,
    pub yhat_r: Option<f64>,
    pub group: Option<String>,
}

/// A validated two-arm experiment with Bernoulli(`p`) assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastDataset {
    contrast_id: String,
    units: Vec<UnitRecord>,
    p: f64,
    k: usize,
}

impl ContrastDataset {
    pub fn new(
        contrast_id: impl Into<String>,
        units: Vec<UnitRecord>,
        p: f64,
    ) -> Result<Self, DomainError> {
        let contrast_id = contrast_id.into();
        if units.is_empty() {
            return Err(DomainError::EmptyDataset { contrast_id });
        }
        if !p.is_finite() || p <= 0.0 || p >= 1.0 {
            return Err(DomainError::InvalidAssignmentProbability { p });
        }
        let k = units[0].x.len();
        let mut seen = std::collections::HashSet::with_capacity(units.len());
        for u in &units {
            if u.id.is_empty() {
                return Err(DomainError::EmptyUnitId);
            }
            if !seen.insert(u.id.as_str()) {
                return Err(DomainError::DuplicateUnitId { unit: u.id.clone() });
            }
            if !u.y.is_finite() {
                return Err(DomainError::NonFiniteOutcome {
                    unit: u.id.clone(),
                    value: u.y,
                });
            }
            if u.x.len() != k {
                return Err(DomainError::CovariateWidthMismatch {
                    unit: u.id.clone(),
                    got: u.x.len(),
                    expected: k,
                });
            }
            if let Some(index) = u.x.iter().position(|v| !v.is_finite()) {
                return Err(DomainError::NonFiniteCovariate {
                    unit: u.id.clone(),
                    index,
                });
            }
            if let Some(r) = u.yhat_r {
                if !r.is_finite() {
                    return Err(DomainError::NonFiniteRemnantPrediction { unit: u.id.clone() });
                }
            }
        }
        Ok(Self {
            contrast_id,
            units,
            p,
            k,
        })
    }

    pub fn contrast_id(&self) -> &str {
        &self.contrast_id
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Number of covariates per unit.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn n_treated(&self) -> usize {
        self.units.iter().filter(|u| u.treated).count()
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    /// True when every unit carries a remnant prediction.
    pub fn has_remnant_predictions(&self) -> bool {
        self.units.iter().all(|u| u.yhat_r.is_some())
    }

    /// Remnant predictions for all units, if complete.
    pub fn remnant_predictions(&self) -> Option<Vec<f64>> {
        self.units.iter().map(|u| u.yhat_r).collect()
    }

    /// Outcomes of one arm, in unit order.
    pub fn arm_outcomes(&self, treated: bool) -> Vec<f64> {
        self.units
            .iter()
            .filter(|u| u.treated == treated)
            .map(|u| u.y)
            .collect()
    }

    /// Restriction to the units selected by `keep` (same contrast id and `p`).
    pub fn restrict_to(
        &self,
        keep: impl Fn(&UnitRecord) -> bool,
    ) -> Result<ContrastDataset, DomainError> {
        ContrastDataset::new(
            self.contrast_id.clone(),
            self.units.iter().filter(|u| keep(u)).cloned().collect(),
            self.p,
        )
    }
}

/// Machine-readable reasons a contrast is excluded from analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExclusionReason {
    /// An arm is empty or has identical outcomes for every unit.
    ZeroOutcomeVariance,
    /// The smaller arm is below the minimum arm size.
    ArmTooSmall,
    /// The realized split is implausible under the declared probability.
    RandomizationProbSuspect,
}

/// Outcome of the eligibility gates for one contrast.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationVerdict {
    pub contrast_id: String,
    pub eligible: bool,
    pub reasons: Vec<ExclusionReason>,
    /// Exact central two-sided binomial p-value for the realized arm split.
    pub binom_p: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub min_per_arm: usize,
}

/// Default minimum arm size for `k` covariates: `5 * (k + 2) + 1`.
///
/// The regression adjustments fit an intercept, a slope on the remnant
/// prediction, and up to `k` covariate effects per arm; this floor keeps at
/// least five observations per fitted quantity, strictly.
pub fn min_per_arm_default(k: usize) -> usize {
    5 * (k + 2) + 1
}

/// Exact central two-sided binomial test.
///
/// Returns `min(1, 2 * min(P(X <= n1), P(X >= n1)))` for
/// `X ~ Binomial(n, p0)`. Tail masses are accumulated in log space so large
/// `n` stays stable. Requires `n1 <= n`, `n >= 1`, and `p0` in (0, 1).
pub fn binomial_test(n1: usize, n: usize, p0: f64) -> f64 {
    assert!(n >= 1 && n1 <= n, "need 1 <= n and n1 <= n");
    assert!(p0 > 0.0 && p0 < 1.0, "p0 must lie strictly inside (0, 1)");
    let lower = log_binomial_cdf(n1, n, p0);
    // P(X >= n1 | p) equals P(X' <= n - n1 | 1 - p); evaluating it that way
    // reuses the same ascending summation, which makes the test exactly
    // symmetric in n1 <-> n - n1 when p0 = 1/2.
    let upper = log_binomial_cdf(n - n1, n, 1.0 - p0);
    let smaller = lower.min(upper);
    (2.0 * smaller.exp()).min(1.0)
}

/// log P(X <= n1) for X ~ Binomial(n, p).
fn log_binomial_cdf(n1: usize, n: usize, p: f64) -> f64 {
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let ln_fact_n = statrs::function::gamma::ln_gamma(n as f64 + 1.0);
    let terms: Vec<f64> = (0..=n1)
        .map(|k| {
            let ln_choose = ln_fact_n
                - statrs::function::gamma::ln_gamma(k as f64 + 1.0)
                - statrs::function::gamma::ln_gamma((n - k) as f64 + 1.0);
            ln_choose + k as f64 * lp + (n - k) as f64 * lq
        })
        .collect();
    log_sum_exp(&terms).min(0.0)
}

/// Applies the eligibility gates to a structurally valid dataset.
///
/// `min_per_arm` defaults to [`min_per_arm_default`] for the dataset's
/// covariate count. `binom_alpha` is the exclusion threshold on the binomial
/// p-value (0.1 in the standard pipeline). All gates are evaluated; the
/// verdict lists every reason that fires.
pub fn validate_contrast(
    ds: &ContrastDataset,
    min_per_arm: Option<usize>,
    binom_alpha: f64,
) -> ValidationVerdict {
    assert!(
        binom_alpha.is_finite() && (0.0..=1.0).contains(&binom_alpha),
        "binom_alpha must lie in [0, 1]"
    );
    let min_per_arm = min_per_arm.unwrap_or_else(|| min_per_arm_default(ds.k()));
    let n_treated = ds.n_treated();
    let n_control = ds.n_control();
    let mut reasons = Vec::new();

    let treated = ds.arm_outcomes(true);
    let control = ds.arm_outcomes(false);
    if treated.is_empty() || control.is_empty() || all_equal(&treated) || all_equal(&control) {
        reasons.push(ExclusionReason::ZeroOutcomeVariance);
    }
    if n_treated.min(n_control) < min_per_arm {
        reasons.push(ExclusionReason::ArmTooSmall);
    }
    let binom_p = binomial_test(n_treated, ds.n(), ds.p());
    if binom_p < binom_alpha {
        reasons.push(ExclusionReason::RandomizationProbSuspect);
    }

    ValidationVerdict {
        contrast_id: ds.contrast_id().to_string(),
        eligible: reasons.is_empty(),
        reasons,
        binom_p,
        n_treated,
        n_control,
        min_per_arm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn unit(id: &str, treated: bool, y: f64) -> UnitRecord {
        UnitRecord {
            id: id.into(),
            treated,
            y,
            x: vec![],
            yhat_r: None,
            group: None,
        }
    }

    fn dataset(
        n_treated: usize,
        n_control: usize,
        f: impl Fn(usize, bool) -> f64,
    ) -> ContrastDataset {
        let mut units = Vec::new();
        for i in 0..n_treated {
            units.push(unit(&format!("t{i}"), true, f(i, true)));
        }
        for i in 0..n_control {
            units.push(unit(&format!("c{i}"), false, f(i, false)));
        }
        ContrastDataset::new("c", units, 0.5).unwrap()
    }

    #[test]
    fn construction_rejects_structural_defects() {
        assert_eq!(
            ContrastDataset::new("c", vec![], 0.5),
            Err(DomainError::EmptyDataset {
                contrast_id: "c".into()
            })
        );
        let err = ContrastDataset::new("c", vec![unit("a", true, 1.0)], 1.0).unwrap_err();
        assert_eq!(err, DomainError::InvalidAssignmentProbability { p: 1.0 });
        let err = ContrastDataset::new("c", vec![unit("a", true, f64::NAN)], 0.5).unwrap_err();
        assert!(matches!(err, DomainError::NonFiniteOutcome { .. }));
        let err = ContrastDataset::new("c", vec![unit("a", true, 1.0), unit("a", false, 2.0)], 0.5)
            .unwrap_err();
        assert_eq!(err, DomainError::DuplicateUnitId { unit: "a".into() });
        let mut bad = unit("a", true, 1.0);
        bad.x = vec![1.0];
        let err = ContrastDataset::new("c", vec![bad, unit("b", false, 2.0)], 0.5).unwrap_err();
        assert!(matches!(err, DomainError::CovariateWidthMismatch { .. }));
    }

    #[test]
    fn min_per_arm_default_matches_rule() {
        assert_eq!(min_per_arm_default(9), 56);
        assert_eq!(min_per_arm_default(0), 11);
    }

    /// Direct-summation oracle, valid for small n.
    fn binomial_test_oracle(n1: usize, n: usize, p0: f64) -> f64 {
        let pmf = |k: usize| {
            let mut c = 1.0f64;
            for j in 0..k {
                c = c * (n - j) as f64 / (j + 1) as f64;
            }
            c * p0.powi(k as i32) * (1.0 - p0).powi((n - k) as i32)
        };
        let lower: f64 = (0..=n1).map(pmf).sum();
        let upper: f64 = (n1..=n).map(pmf).sum();
        (2.0 * lower.min(upper)).min(1.0)
    }

    #[test]
    fn binomial_test_frozen_values() {
        assert_eq!(binomial_test(50, 100, 0.5), 1.0);
        assert_eq!(binomial_test(0, 1, 0.5), 1.0);
        // All thirty of thirty treated: doubled upper tail is 2 * 0.5^30.
        let p = binomial_test(30, 30, 0.5);
        let exact = 2.0 * 0.5f64.powi(30);
        assert!((p - exact).abs() <= 1e-12 * exact, "got {p}, want {exact}");
        assert!((p - 1.86e-9).abs() < 1e-11);
    }

    #[test]
    fn binomial_test_matches_direct_summation() {
        let mut cases = Vec::new();
        for n in [1usize, 2, 3, 7, 20, 41, 60] {
            for n1 in 0..=n {
                for p0 in [0.1, 0.3, 0.5, 0.77] {
                    cases.push((n1, n, p0));
                }
            }
        }
        for (n1, n, p0) in cases {
            let got = binomial_test(n1, n, p0);
            let want = binomial_test_oracle(n1, n, p0);
            assert!(
                (got - want).abs() <= 1e-12 * want.max(1e-300),
                "({n1}, {n}, {p0}): got {got}, want {want}"
            );
        }
    }

    #[test]
    fn binomial_test_is_symmetric_at_half() {
        for n in 1..=40 {
            for n1 in 0..=n {
                assert_eq!(
                    binomial_test(n1, n, 0.5),
                    binomial_test(n - n1, n, 0.5),
                    "asymmetry at ({n1}, {n})"
                );
            }
        }
    }

    #[test]
    fn validation_flags_zero_outcome_variance() {
        // Variation in one arm only still trips the gate.
        let ds = dataset(12, 12, |i, treated| if treated { i as f64 } else { 3.0 });
        let v = validate_contrast(&ds, None, 0.1);
        assert_eq!(v.reasons, vec![ExclusionReason::ZeroOutcomeVariance]);
        assert!(!v.eligible);

        // An empty arm cannot arise post-construction with both labels, but a
        // one-sided dataset can.
        let ds = dataset(12, 12, |i, _| i as f64);
        assert!(validate_contrast(&ds, None, 0.1).eligible);
    }

    #[test]
    fn validation_flags_small_arms() {
        let mut units = Vec::new();
        for i in 0..55 {
            let mut u = unit(&format!("t{i}"), true, i as f64);
            u.x = vec![0.0; 9];
            units.push(u);
        }
        for i in 0..200 {
            let mut u = unit(&format!("c{i}"), false, (i % 17) as f64);
            u.x = vec![0.0; 9];
            units.push(u);
        }
        let ds = ContrastDataset::new("c", units, 0.5).unwrap();
        let v = validate_contrast(&ds, None, 0.1);
        assert_eq!(v.min_per_arm, 56);
        assert!(v.reasons.contains(&ExclusionReason::ArmTooSmall));
    }

    #[test]
    fn validation_flags_suspect_randomization() {
        let ds = dataset(70, 30, |i, _| (i % 13) as f64);
        let v = validate_contrast(&ds, Some(5), 0.1);
        assert_eq!(v.reasons, vec![ExclusionReason::RandomizationProbSuspect]);
        assert!(v.binom_p < 1e-3);

        // The same split is fine when the declared probability matches it.
        let ds2 = ContrastDataset::new(
            "c2",
            dataset(70, 30, |i, _| (i % 13) as f64).units().to_vec(),
            0.7,
        )
        .unwrap();
        assert!(validate_contrast(&ds2, Some(5), 0.1).eligible);
    }

    #[test]
    fn eligible_dataset_has_no_reasons() {
        let ds = dataset(30, 30, |i, treated| {
            i as f64 + if treated { 0.5 } else { 0.0 }
        });
        let v = validate_contrast(&ds, None, 0.1);
        assert!(v.eligible);
        assert!(v.reasons.is_empty());
        assert_eq!((v.n_treated, v.n_control), (30, 30));
        assert_eq!(v.binom_p, 1.0);
    }
}
