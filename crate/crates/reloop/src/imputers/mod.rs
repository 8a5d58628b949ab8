//! Leave-one-out counterfactual imputation.
//!
//! Every imputer produces, for each unit i, predictions `yhat0[i]` and
//! `yhat1[i]` of the unit's two potential outcomes, combined into
//! `mhat[i] = p·yhat0[i] + (1−p)·yhat1[i]`. The load-bearing contract is
//! independence: the predictions for unit i are a function of the other
//! units' data only — never of unit i's own outcome or assignment. That is
//! what makes the downstream inverse-probability estimator exactly unbiased,
//! no matter how poor the predictions are.
//!
//! Every imputer is a total function of the dataset: degenerate fits fall
//! back to a leave-i-out arm mean, then a leave-i-out grand mean, then 0.
//! Totality matters because the exact-expectation oracle evaluates imputers
//! under every one of the 2ⁿ assignment vectors, including those that empty
//! an arm. The public entry points additionally enforce the documented
//! minimum arm sizes and signal misuse with errors; the crate-internal
//! `*_total` variants skip those gates for enumeration.

mod ensemble;
mod forest;
mod ols;

pub use ensemble::impute_ensemble;
pub use forest::{impute_loo_forest, ForestParams};
pub use ols::impute_loo_ols;

pub(crate) use ensemble::ensemble_total;
pub(crate) use forest::{loo_forest_total, FittedForest};
pub(crate) use ols::{loo_ols_total, OlsMachinery};

use crate::domain::ContrastDataset;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImputerError {
    #[error("imputer requires a remnant prediction for every unit")]
    MissingRemnantPredictions,
    #[error("{arm} arm has {size} units but this imputer requires {required}")]
    ArmTooSmall {
        arm: &'static str,
        size: usize,
        required: usize,
    },
    #[error("imputer spec invalid: {reason}")]
    InvalidSpec { reason: String },
}

/// Which imputation rule produced a set of predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputerId {
    Zero,
    FixedRemnant,
    LooOls,
    LooForest,
    Ensemble,
}

/// Inputs a model-based imputer regresses on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    Covariates,
    Remnant,
    CovariatesAndRemnant,
}

/// A declarative imputer choice, serializable for configs and reports.
///
/// `forest` must be present exactly when `kind` is `LooForest` or `Ensemble`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputerSpec {
    pub kind: ImputerId,
    pub features: FeatureSet,
    pub forest: Option<ForestParams>,
}

impl ImputerSpec {
    pub fn zero() -> Self {
        Self {
            kind: ImputerId::Zero,
            features: FeatureSet::Covariates,
            forest: None,
        }
    }

    pub fn fixed_remnant() -> Self {
        Self {
            kind: ImputerId::FixedRemnant,
            features: FeatureSet::Remnant,
            forest: None,
        }
    }

    pub fn loo_ols() -> Self {
        Self {
            kind: ImputerId::LooOls,
            features: FeatureSet::Remnant,
            forest: None,
        }
    }

    pub fn loo_forest(features: FeatureSet, params: ForestParams) -> Self {
        Self {
            kind: ImputerId::LooForest,
            features,
            forest: Some(params),
        }
    }

    pub fn ensemble(params: ForestParams) -> Self {
        Self {
            kind: ImputerId::Ensemble,
            features: FeatureSet::CovariatesAndRemnant,
            forest: Some(params),
        }
    }

    fn check(&self) -> Result<(), ImputerError> {
        let needs_forest = matches!(self.kind, ImputerId::LooForest | ImputerId::Ensemble);
        if needs_forest != self.forest.is_some() {
            return Err(ImputerError::InvalidSpec {
                reason: format!(
                    "forest params {} for {:?}",
                    if needs_forest {
                        "required"
                    } else {
                        "not accepted"
                    },
                    self.kind
                ),
            });
        }
        if self.kind == ImputerId::LooOls && self.features != FeatureSet::Remnant {
            return Err(ImputerError::InvalidSpec {
                reason: "leave-one-out OLS regresses on the remnant prediction only".into(),
            });
        }
        Ok(())
    }

    /// Runs the configured imputer through its public (gated) entry point.
    pub fn run(&self, ds: &ContrastDataset) -> Result<LooImputation, ImputerError> {
        self.check()?;
        match self.kind {
            ImputerId::Zero => Ok(impute_zero(ds)),
            ImputerId::FixedRemnant => impute_fixed_remnant(ds),
            ImputerId::LooOls => impute_loo_ols(ds),
            ImputerId::LooForest => {
                impute_loo_forest(ds, self.features, self.forest.as_ref().unwrap())
            }
            ImputerId::Ensemble => impute_ensemble(ds, self.forest.as_ref().unwrap()),
        }
    }

    /// Runs the imputer without arm-size gates (total over all assignments).
    pub(crate) fn run_total(&self, ds: &ContrastDataset) -> Result<LooImputation, ImputerError> {
        self.check()?;
        match self.kind {
            ImputerId::Zero => Ok(impute_zero(ds)),
            ImputerId::FixedRemnant => impute_fixed_remnant(ds),
            ImputerId::LooOls => loo_ols_total(ds),
            ImputerId::LooForest => {
                loo_forest_total(ds, self.features, self.forest.as_ref().unwrap())
            }
            ImputerId::Ensemble => ensemble_total(ds, self.forest.as_ref().unwrap()),
        }
    }
}

/// Leave-one-out potential-outcome predictions for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooImputation {
    pub imputer_id: ImputerId,
    pub yhat0: Vec<f64>,
    pub yhat1: Vec<f64>,
    /// `p·yhat0 + (1−p)·yhat1`, the quantity the estimator subtracts.
    pub mhat: Vec<f64>,
    /// Mean squared prediction error over realized control units.
    pub e0_sq: f64,
    /// Mean squared prediction error over realized treated units.
    pub e1_sq: f64,
}

impl LooImputation {
    /// Assembles the final record from per-unit predictions.
    ///
    /// The arm-z error is the mean of (yhatz − Y)² over units realized in arm
    /// z. Under exhaustive enumeration an arm can be empty, leaving that mean
    /// undefined; the empty arm then borrows the other arm's value (both
    /// empty cannot happen), keeping the variance estimator total.
    pub(crate) fn from_predictions(
        ds: &ContrastDataset,
        imputer_id: ImputerId,
        yhat0: Vec<f64>,
        yhat1: Vec<f64>,
    ) -> Self {
        let p = ds.p();
        let mhat: Vec<f64> = yhat0
            .iter()
            .zip(&yhat1)
            .map(|(a, b)| p * a + (1.0 - p) * b)
            .collect();
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for (i, u) in ds.units().iter().enumerate() {
            let arm = usize::from(u.treated);
            let pred = if u.treated { yhat1[i] } else { yhat0[i] };
            sums[arm] += (pred - u.y) * (pred - u.y);
            counts[arm] += 1;
        }
        let raw = |arm: usize| (counts[arm] > 0).then(|| sums[arm] / counts[arm] as f64);
        let e0_sq = raw(0).or_else(|| raw(1)).unwrap_or(0.0);
        let e1_sq = raw(1).or_else(|| raw(0)).unwrap_or(0.0);
        Self {
            imputer_id,
            yhat0,
            yhat1,
            mhat,
            e0_sq,
            e1_sq,
        }
    }

    pub fn n(&self) -> usize {
        self.mhat.len()
    }
}

/// Imputes zero for every potential outcome (no adjustment).
pub fn impute_zero(ds: &ContrastDataset) -> LooImputation {
    let n = ds.n();
    LooImputation::from_predictions(ds, ImputerId::Zero, vec![0.0; n], vec![0.0; n])
}

/// Imputes each unit's remnant prediction for both potential outcomes.
///
/// The remnant prediction is a fixed function of baseline data, so the
/// independence contract holds trivially.
pub fn impute_fixed_remnant(ds: &ContrastDataset) -> Result<LooImputation, ImputerError> {
    let r = ds
        .remnant_predictions()
        .ok_or(ImputerError::MissingRemnantPredictions)?;
    Ok(LooImputation::from_predictions(
        ds,
        ImputerId::FixedRemnant,
        r.clone(),
        r,
    ))
}

/// Outcome/assignment columns shared by the model-based imputers.
pub(crate) struct Columns {
    pub y: Vec<f64>,
    pub treated: Vec<bool>,
}

pub(crate) fn columns(ds: &ContrastDataset) -> Columns {
    Columns {
        y: ds.units().iter().map(|u| u.y).collect(),
        treated: ds.units().iter().map(|u| u.treated).collect(),
    }
}

/// Total fallback predictor: mean outcome of arm `arm` excluding the listed
/// units, else the grand mean excluding them, else 0.
pub(crate) fn fallback_mean(cols: &Columns, arm: bool, exclude: &[usize]) -> f64 {
    let mean_over = |restrict_arm: Option<bool>| -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, &y) in cols.y.iter().enumerate() {
            if exclude.contains(&i) {
                continue;
            }
            if let Some(a) = restrict_arm {
                if cols.treated[i] != a {
                    continue;
                }
            }
            sum += y;
            count += 1;
        }
        (count > 0).then(|| sum / count as f64)
    };
    mean_over(Some(arm))
        .or_else(|| mean_over(None))
        .unwrap_or(0.0)
}

/// Arm-size gate shared by the public model-based entry points.
pub(crate) fn require_arms(ds: &ContrastDataset, required: usize) -> Result<(), ImputerError> {
    let (n1, n0) = (ds.n_treated(), ds.n_control());
    if n0 < required {
        return Err(ImputerError::ArmTooSmall {
            arm: "control",
            size: n0,
            required,
        });
    }
    if n1 < required {
        return Err(ImputerError::ArmTooSmall {
            arm: "treated",
            size: n1,
            required,
        });
    }
    Ok(())
}
