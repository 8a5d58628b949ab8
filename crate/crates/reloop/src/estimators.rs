//! Effect estimators for one two-arm contrast.
//!
//! `diff_in_means`, `rebar`, and `ancova_ols` are the classical baselines;
//! `loop_point` is the inverse-probability estimator built on leave-one-out
//! imputations, with `loop_variance` as its conservative variance. The
//! taxonomy names the compositions: `TTest` is the difference in means,
//! `LoopX` the loop estimator over a covariate-only forest, `ReLoop` over
//! per-arm OLS on the remnant prediction, and `ReLoopPlus` over the
//! OLS/forest ensemble. Loop estimates from the zero and fixed-remnant
//! imputers carry the `TTest` and `Rebar` tags of the estimators they reduce
//! to at balanced arms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ContrastDataset;
use crate::imputers::{
    impute_ensemble, impute_loo_forest, impute_loo_ols, FeatureSet, ForestParams, ImputerError,
    ImputerId, LooImputation,
};
use crate::stats::{all_equal, sample_variance};

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("{arm} arm is empty")]
    EmptyArm { arm: &'static str },
    #[error("{arm} arm has {size} unit(s); variance estimation needs 2")]
    ArmTooSmallForVariance { arm: &'static str, size: usize },
    #[error("estimator requires a remnant prediction for every unit")]
    MissingRemnantPredictions,
    #[error("estimator requires at least {required} units, got {n}")]
    TooFewUnits { n: usize, required: usize },
    #[error("regression design is rank deficient")]
    RankDeficient,
    #[error("imputation covers {imputation} units but the dataset has {dataset}")]
    LengthMismatch { imputation: usize, dataset: usize },
    #[error(transparent)]
    Imputer(#[from] ImputerError),
}

/// Estimator taxonomy tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorId {
    #[serde(rename = "t-test")]
    TTest,
    #[serde(rename = "rebar")]
    Rebar,
    #[serde(rename = "ancova-ols")]
    AncovaOls,
    #[serde(rename = "loop-x")]
    LoopX,
    #[serde(rename = "reloop")]
    ReLoop,
    #[serde(rename = "reloop-plus")]
    ReLoopPlus,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 6] = [
        EstimatorId::TTest,
        EstimatorId::Rebar,
        EstimatorId::AncovaOls,
        EstimatorId::LoopX,
        EstimatorId::ReLoop,
        EstimatorId::ReLoopPlus,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorId::TTest => "t-test",
            EstimatorId::Rebar => "rebar",
            EstimatorId::AncovaOls => "ancova-ols",
            EstimatorId::LoopX => "loop-x",
            EstimatorId::ReLoop => "reloop",
            EstimatorId::ReLoopPlus => "reloop-plus",
        }
    }
}

impl std::fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| format!("unknown estimator {s:?}"))
    }
}

/// A point estimate of the average treatment effect with its estimated
/// sampling variance and sample metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimator_id: EstimatorId,
    pub tau_hat: f64,
    pub var_hat: f64,
    pub n: usize,
    pub n1: usize,
    pub n0: usize,
    pub p: f64,
}

fn arm_sizes(ds: &ContrastDataset) -> Result<(usize, usize), EstimatorError> {
    let (n1, n0) = (ds.n_treated(), ds.n_control());
    if n1 == 0 {
        return Err(EstimatorError::EmptyArm { arm: "treated" });
    }
    if n0 == 0 {
        return Err(EstimatorError::EmptyArm { arm: "control" });
    }
    if n0 < 2 {
        return Err(EstimatorError::ArmTooSmallForVariance {
            arm: "control",
            size: n0,
        });
    }
    if n1 < 2 {
        return Err(EstimatorError::ArmTooSmallForVariance {
            arm: "treated",
            size: n1,
        });
    }
    Ok((n1, n0))
}

fn welch(
    ds: &ContrastDataset,
    id: EstimatorId,
    value: impl Fn(&crate::domain::UnitRecord) -> f64,
) -> Result<EffectEstimate, EstimatorError> {
    let (n1, n0) = arm_sizes(ds)?;
    let treated: Vec<f64> = ds
        .units()
        .iter()
        .filter(|u| u.treated)
        .map(&value)
        .collect();
    let control: Vec<f64> = ds
        .units()
        .iter()
        .filter(|u| !u.treated)
        .map(&value)
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let tau_hat = mean(&treated) - mean(&control);
    let var_hat = sample_variance(&treated).unwrap() / n1 as f64
        + sample_variance(&control).unwrap() / n0 as f64;
    Ok(EffectEstimate {
        estimator_id: id,
        tau_hat,
        var_hat,
        n: ds.n(),
        n1,
        n0,
        p: ds.p(),
    })
}

/// Difference in arm means with the Welch variance
/// `S²(Y|Z=1)/n₁ + S²(Y|Z=0)/n₀`. Needs two units per arm.
pub fn diff_in_means(ds: &ContrastDataset) -> Result<EffectEstimate, EstimatorError> {
    welch(ds, EstimatorId::TTest, |u| u.y)
}

/// Difference in arm means of the residuals `Y − ŷʳ`.
pub fn rebar(ds: &ContrastDataset) -> Result<EffectEstimate, EstimatorError> {
    if !ds.has_remnant_predictions() {
        return Err(EstimatorError::MissingRemnantPredictions);
    }
    welch(ds, EstimatorId::Rebar, |u| u.y - u.yhat_r.unwrap())
}

/// Coefficient on Z and its HC2 sandwich variance from OLS of `y` on the
/// given design columns. `target` indexes the coefficient of interest.
fn hc2_coefficient(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    target: usize,
) -> Result<(f64, f64), EstimatorError> {
    let xtx = design.transpose() * design;
    let m = xtx.try_inverse().ok_or(EstimatorError::RankDeficient)?;
    let beta = &m * (design.transpose() * y);
    let fitted = design * &beta;
    let q = design.ncols();
    let n = design.nrows();
    let mut meat = DMatrix::zeros(q, q);
    for i in 0..n {
        let xi = design.row(i).transpose();
        let h = (xi.transpose() * &m * &xi)[(0, 0)];
        if 1.0 - h <= 1e-10 {
            return Err(EstimatorError::RankDeficient);
        }
        let e = y[i] - fitted[i];
        meat += &xi * xi.transpose() * (e * e / (1.0 - h));
    }
    let cov = &m * meat * &m;
    Ok((beta[target], cov[(target, target)].max(0.0)))
}

/// OLS of Y on (1, ŷʳ, Z): the coefficient on Z with an HC2
/// heteroskedasticity-robust variance. A zero-variance ŷʳ column is dropped,
/// reducing to difference-in-means semantics.
pub fn ancova_ols(ds: &ContrastDataset) -> Result<EffectEstimate, EstimatorError> {
    let r = ds
        .remnant_predictions()
        .ok_or(EstimatorError::MissingRemnantPredictions)?;
    let n = ds.n();
    if n < 4 {
        return Err(EstimatorError::TooFewUnits { n, required: 4 });
    }
    let z: Vec<f64> = ds.units().iter().map(|u| f64::from(u.treated)).collect();
    let y = DVector::from_iterator(n, ds.units().iter().map(|u| u.y));
    let constant_r = all_equal(&r);
    let q = if constant_r { 2 } else { 3 };
    let design = DMatrix::from_fn(n, q, |i, j| match j {
        0 => 1.0,
        1 if !constant_r => r[i],
        _ => z[i],
    });
    let (tau_hat, var_hat) = hc2_coefficient(&design, &y, q - 1)?;
    Ok(EffectEstimate {
        estimator_id: EstimatorId::AncovaOls,
        tau_hat,
        var_hat,
        n,
        n1: ds.n_treated(),
        n0: ds.n_control(),
        p: ds.p(),
    })
}

fn taxonomy_tag(imputer: ImputerId) -> EstimatorId {
    match imputer {
        ImputerId::Zero => EstimatorId::TTest,
        ImputerId::FixedRemnant => EstimatorId::Rebar,
        ImputerId::LooOls => EstimatorId::ReLoop,
        ImputerId::LooForest => EstimatorId::LoopX,
        ImputerId::Ensemble => EstimatorId::ReLoopPlus,
    }
}

/// The leave-one-out inverse-probability estimator
/// `Σ_{Z=1}(Y−m̂)/(np) − Σ_{Z=0}(Y−m̂)/(n(1−p))`.
///
/// Sums over an empty arm are zero, so the estimator is defined for every
/// assignment vector — a requirement of exhaustive enumeration. The variance
/// comes from [`loop_variance`].
pub fn loop_point(
    ds: &ContrastDataset,
    imp: &LooImputation,
) -> Result<EffectEstimate, EstimatorError> {
    let n = ds.n();
    if imp.n() != n {
        return Err(EstimatorError::LengthMismatch {
            imputation: imp.n(),
            dataset: n,
        });
    }
    let p = ds.p();
    let mut treated_sum = 0.0;
    let mut control_sum = 0.0;
    for (i, u) in ds.units().iter().enumerate() {
        if u.treated {
            treated_sum += u.y - imp.mhat[i];
        } else {
            control_sum += u.y - imp.mhat[i];
        }
    }
    let tau_hat = treated_sum / (n as f64 * p) - control_sum / (n as f64 * (1.0 - p));
    Ok(EffectEstimate {
        estimator_id: taxonomy_tag(imp.imputer_id),
        tau_hat,
        var_hat: loop_variance(imp, n, p),
        n,
        n1: ds.n_treated(),
        n0: ds.n_control(),
        p,
    })
}

/// Conservative variance of the loop estimator:
/// `(1/n)·[(p/(1−p))·Ê²₀ + ((1−p)/p)·Ê²₁ + 2·√(Ê²₀Ê²₁)]`.
///
/// Its expectation over the assignment distribution is at least the true
/// sampling variance, so intervals built on it cover conservatively.
pub fn loop_variance(imp: &LooImputation, n: usize, p: f64) -> f64 {
    assert!(
        n > 0 && p > 0.0 && p < 1.0,
        "loop_variance needs n ≥ 1 and p in (0,1)"
    );
    assert!(
        imp.e0_sq >= 0.0 && imp.e1_sq >= 0.0,
        "squared errors cannot be negative"
    );
    (p / (1.0 - p) * imp.e0_sq + (1.0 - p) / p * imp.e1_sq + 2.0 * (imp.e0_sq * imp.e1_sq).sqrt())
        / n as f64
}

/// Which estimators to run and how to seed the forest-based ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub estimators: Vec<EstimatorId>,
    pub forest: ForestParams,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            estimators: EstimatorId::ALL.to_vec(),
            forest: ForestParams::default(),
        }
    }
}

/// Why an estimator produced no estimate for a contrast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    MissingRemnantPredictions,
    ArmTooSmall {
        arm: String,
        size: usize,
        required: usize,
    },
    TooFewUnits {
        n: usize,
        required: usize,
    },
    Degenerate {
        detail: String,
    },
}

impl From<EstimatorError> for SkipReason {
    fn from(err: EstimatorError) -> Self {
        match err {
            EstimatorError::EmptyArm { arm } => SkipReason::ArmTooSmall {
                arm: arm.into(),
                size: 0,
                required: 1,
            },
            EstimatorError::ArmTooSmallForVariance { arm, size } => SkipReason::ArmTooSmall {
                arm: arm.into(),
                size,
                required: 2,
            },
            EstimatorError::MissingRemnantPredictions
            | EstimatorError::Imputer(ImputerError::MissingRemnantPredictions) => {
                SkipReason::MissingRemnantPredictions
            }
            EstimatorError::TooFewUnits { n, required } => SkipReason::TooFewUnits { n, required },
            EstimatorError::Imputer(ImputerError::ArmTooSmall {
                arm,
                size,
                required,
            }) => SkipReason::ArmTooSmall {
                arm: arm.into(),
                size,
                required,
            },
            other => SkipReason::Degenerate {
                detail: other.to_string(),
            },
        }
    }
}

/// One estimator's outcome for one contrast: an estimate or a skip reason,
/// never both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRun {
    pub id: EstimatorId,
    pub estimate: Option<EffectEstimate>,
    pub skipped: Option<SkipReason>,
}

impl EstimatorRun {
    fn from_result(id: EstimatorId, result: Result<EffectEstimate, EstimatorError>) -> Self {
        match result {
            Ok(estimate) => Self {
                id,
                estimate: Some(estimate),
                skipped: None,
            },
            Err(err) => Self {
                id,
                estimate: None,
                skipped: Some(err.into()),
            },
        }
    }
}

/// Runs every requested estimator on the contrast. Estimators whose
/// preconditions fail are recorded as skipped; the batch never aborts.
pub fn estimate_all(ds: &ContrastDataset, config: &AnalysisConfig) -> Vec<EstimatorRun> {
    let mut seen = std::collections::HashSet::new();
    let mut runs = Vec::new();
    for &id in &config.estimators {
        if !seen.insert(id) {
            continue;
        }
        let result = match id {
            EstimatorId::TTest => diff_in_means(ds),
            EstimatorId::Rebar => rebar(ds),
            EstimatorId::AncovaOls => ancova_ols(ds),
            EstimatorId::LoopX => impute_loo_forest(ds, FeatureSet::Covariates, &config.forest)
                .map_err(EstimatorError::from)
                .and_then(|imp| loop_point(ds, &imp)),
            EstimatorId::ReLoop => impute_loo_ols(ds)
                .map_err(EstimatorError::from)
                .and_then(|imp| loop_point(ds, &imp)),
            EstimatorId::ReLoopPlus => impute_ensemble(ds, &config.forest)
                .map_err(EstimatorError::from)
                .and_then(|imp| loop_point(ds, &imp)),
        };
        runs.push(EstimatorRun::from_result(id, result));
    }
    runs
}
