//! Tercile subgroups, per-subgroup estimation with small-arm exclusion, and
//! post-stratification of subgroup effects to a target population.
//!
//! Subgroups are defined from one covariate by its pooled lower and upper
//! terciles: `Low` is `x < q_lo`, `High` is `x > q_hi`, and the middle third
//! (including values equal to either boundary) belongs to neither. A subgroup
//! is skipped — with the reason recorded — when either of its treatment arms
//! is too small or its outcomes have zero variance.
//!
//! `post_stratify` combines per-group effect estimates with fixed population
//! shares πₖ: the point estimate is Σₖ πₖ·τ̂ₖ and the variance Σₖ πₖ²·v̂ₖ,
//! treating disjoint groups as independent under Bernoulli assignment. Each
//! v̂ₖ is conservative, so the combination inherits conservativeness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ContrastDataset, ExclusionReason};
use crate::estimators::{estimate_all, AnalysisConfig, EffectEstimate, EstimatorRun};
use crate::stats::all_equal;

/// Default minimum per-arm count inside a subgroup.
pub const DEFAULT_MIN_SUBGROUP_ARM: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum SubgroupError {
    #[error("tercile computation needs at least 3 finite values, got {n}")]
    TooFewValues { n: usize },
    #[error("covariate index {index} out of range for {k} covariates")]
    CovariateOutOfRange { index: usize, k: usize },
    #[error("tercile bounds must satisfy q_lo <= q_hi, got ({q_lo}, {q_hi})")]
    InvertedBounds { q_lo: f64, q_hi: f64 },
    #[error("no subgroup weights provided")]
    EmptyWeights,
    #[error("weight for group `{label}` is {pi}, outside [0, 1]")]
    WeightOutOfRange { label: String, pi: f64 },
    #[error("duplicate group label `{label}`")]
    DuplicateLabel { label: String },
    #[error("weights sum to {sum}, not 1")]
    WeightsDoNotSumToOne { sum: f64 },
    #[error("no estimate supplied for weighted group `{label}`")]
    MissingEstimate { label: String },
    #[error("estimates mix different estimators: {first} and {other}")]
    MixedEstimators { first: String, other: String },
}

/// Which side of the tercile split a unit falls on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubgroupLabel {
    Low,
    High,
}

impl SubgroupLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            SubgroupLabel::Low => "low",
            SubgroupLabel::High => "high",
        }
    }
}

impl std::fmt::Display for SubgroupLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A tercile split of one covariate: `Low` ⇔ `x < q_lo`, `High` ⇔ `x > q_hi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupScheme {
    pub covariate: usize,
    pub q_lo: f64,
    pub q_hi: f64,
}

impl SubgroupScheme {
    pub fn new(covariate: usize, q_lo: f64, q_hi: f64) -> Result<Self, SubgroupError> {
        // Negated on purpose: a NaN bound must fail this gate too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(q_lo <= q_hi) {
            return Err(SubgroupError::InvertedBounds { q_lo, q_hi });
        }
        Ok(Self {
            covariate,
            q_lo,
            q_hi,
        })
    }

    /// Membership of a covariate vector; `None` for the excluded middle.
    pub fn label(&self, x: &[f64]) -> Option<SubgroupLabel> {
        let v = x[self.covariate];
        if v < self.q_lo {
            Some(SubgroupLabel::Low)
        } else if v > self.q_hi {
            Some(SubgroupLabel::High)
        } else {
            None
        }
    }
}

/// Lower (type-1, inverse-CDF) empirical quantiles at 1/3 and 2/3 of the
/// pooled values. Indices are computed in integer arithmetic, so the result
/// is exact and permutation-invariant.
pub fn pooled_terciles(values: &[f64]) -> Result<(f64, f64), SubgroupError> {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = finite.len();
    if n < 3 {
        return Err(SubgroupError::TooFewValues { n });
    }
    finite.sort_by(f64::total_cmp);
    // Type-1 quantile at probability j/3 is the ceil(n·j/3)-th order statistic.
    let q = |j: usize| finite[(n * j).div_ceil(3) - 1];
    Ok((q(1), q(2)))
}

/// Fixed population shares πₖ by group label: non-negative, distinct labels,
/// summing to 1 within 1e-12.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PopulationWeights {
    entries: Vec<(String, f64)>,
}

impl PopulationWeights {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self, SubgroupError> {
        if entries.is_empty() {
            return Err(SubgroupError::EmptyWeights);
        }
        let mut seen = std::collections::HashSet::new();
        let mut sum = 0.0;
        for (label, pi) in &entries {
            if !pi.is_finite() || *pi < 0.0 || *pi > 1.0 {
                return Err(SubgroupError::WeightOutOfRange {
                    label: label.clone(),
                    pi: *pi,
                });
            }
            if !seen.insert(label.as_str()) {
                return Err(SubgroupError::DuplicateLabel {
                    label: label.clone(),
                });
            }
            sum += pi;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SubgroupError::WeightsDoNotSumToOne { sum });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(label, pi)| (label.as_str(), *pi))
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, pi)| *pi)
    }
}

/// One subgroup's outcome: either estimator runs on the restriction, or a
/// recorded exclusion with no runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StratumEstimate {
    pub label: SubgroupLabel,
    pub n: usize,
    pub n1: usize,
    pub n0: usize,
    pub skipped: Option<ExclusionReason>,
    pub runs: Vec<EstimatorRun>,
}

/// Both subgroup strata for one scheme.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubgroupEstimates {
    pub scheme: SubgroupScheme,
    pub low: StratumEstimate,
    pub high: StratumEstimate,
}

fn estimate_stratum(
    ds: &ContrastDataset,
    scheme: &SubgroupScheme,
    label: SubgroupLabel,
    config: &AnalysisConfig,
    min_arm: usize,
) -> StratumEstimate {
    let member = |u: &crate::domain::UnitRecord| scheme.label(&u.x) == Some(label);
    let members: Vec<&crate::domain::UnitRecord> =
        ds.units().iter().filter(|u| member(u)).collect();
    let n = members.len();
    let n1 = members.iter().filter(|u| u.treated).count();
    let n0 = n - n1;
    let skipped = if n1 < min_arm || n0 < min_arm {
        Some(ExclusionReason::ArmTooSmall)
    } else {
        let y: Vec<f64> = members.iter().map(|u| u.y).collect();
        all_equal(&y).then_some(ExclusionReason::ZeroOutcomeVariance)
    };
    let runs = if skipped.is_some() {
        Vec::new()
    } else {
        let restricted = ds
            .restrict_to(member)
            .expect("a non-empty restriction of a valid dataset is valid");
        estimate_all(&restricted, config)
    };
    StratumEstimate {
        label,
        n,
        n1,
        n0,
        skipped,
        runs,
    }
}

/// Runs every configured estimator on the `Low` and `High` restrictions of
/// the contrast. A stratum with a treatment arm smaller than `min_arm`, or
/// with zero outcome variance, is skipped with the reason recorded; skips
/// never abort the analysis.
pub fn estimate_subgroups(
    ds: &ContrastDataset,
    scheme: &SubgroupScheme,
    config: &AnalysisConfig,
    min_arm: usize,
) -> Result<SubgroupEstimates, SubgroupError> {
    if scheme.covariate >= ds.k() {
        return Err(SubgroupError::CovariateOutOfRange {
            index: scheme.covariate,
            k: ds.k(),
        });
    }
    Ok(SubgroupEstimates {
        scheme: scheme.clone(),
        low: estimate_stratum(ds, scheme, SubgroupLabel::Low, config, min_arm),
        high: estimate_stratum(ds, scheme, SubgroupLabel::High, config, min_arm),
    })
}

/// Combines per-group estimates into a population effect with fixed shares:
/// `tau_hat = Σₖ πₖ·τ̂ₖ`, `var_hat = Σₖ πₖ²·v̂ₖ`.
///
/// Every weighted label must have an estimate, and all estimates must come
/// from the same estimator. Assignment probability is carried over from the
/// group estimates (they share one design).
pub fn post_stratify(
    estimates: &std::collections::BTreeMap<String, EffectEstimate>,
    weights: &PopulationWeights,
) -> Result<EffectEstimate, SubgroupError> {
    let mut tau_hat = 0.0;
    let mut var_hat = 0.0;
    let (mut n, mut n1, mut n0) = (0, 0, 0);
    let mut first: Option<&EffectEstimate> = None;
    for (label, pi) in weights.iter() {
        let est = estimates
            .get(label)
            .ok_or_else(|| SubgroupError::MissingEstimate {
                label: label.to_string(),
            })?;
        if let Some(f) = first {
            if f.estimator_id != est.estimator_id {
                return Err(SubgroupError::MixedEstimators {
                    first: f.estimator_id.to_string(),
                    other: est.estimator_id.to_string(),
                });
            }
        } else {
            first = Some(est);
        }
        tau_hat += pi * est.tau_hat;
        var_hat += pi * pi * est.var_hat;
        n += est.n;
        n1 += est.n1;
        n0 += est.n0;
    }
    let first = first.expect("weights are non-empty by construction");
    Ok(EffectEstimate {
        estimator_id: first.estimator_id,
        tau_hat,
        var_hat,
        n,
        n1,
        n0,
        p: first.p,
    })
}

/// External bias induced by unrepresentative subgroup shares in a two-group
/// population: `(p1 − pi1)·(tau1 − tau2)`, where `p1` is the sample share and
/// `pi1` the population share of group 1.
pub fn decompose_bias(p1: f64, pi1: f64, tau1: f64, tau2: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&p1) && (0.0..=1.0).contains(&pi1),
        "shares must lie in [0, 1]"
    );
    (p1 - pi1) * (tau1 - tau2)
}
