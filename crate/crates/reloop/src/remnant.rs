//! Remnant outcome model: ridge regression with feature standardization.
//!
//! The remnant is data from outside the experiment (for example, users from
//! before the test launched) whose outcomes follow the business-as-usual
//! process. A model trained on the remnant supplies each experimental unit
//! with a fixed baseline prediction `yhat_r` of its untreated outcome. Those
//! predictions only ever enter the estimators as baseline covariates, so
//! model quality affects precision, never unbiasedness.
//!
//! The model is linear ridge regression on standardized features with an
//! unpenalized intercept, solved in closed form. Models serialize to a
//! versioned JSON document and reload bit-identically.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RemnantError {
    #[error("training requires at least one row and one feature")]
    EmptyTrainingData,
    #[error("row {row} has {got} features, expected {expected}")]
    FeatureWidthMismatch {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("training data contains a non-finite value in row {row}")]
    NonFiniteValue { row: usize },
    #[error("ridge penalty must be finite and non-negative, got {lambda}")]
    InvalidLambda { lambda: f64 },
    #[error(
        "unpenalized fit needs at least k + 2 = {required} rows for {features} features, got {rows}"
    )]
    InsufficientRows {
        rows: usize,
        features: usize,
        required: usize,
    },
    #[error("normal equations are singular; use a positive ridge penalty")]
    SingularSystem,
    #[error("feature name count {names} does not match feature count {features}")]
    FeatureNameMismatch { names: usize, features: usize },
    #[error("model file has unsupported version {version}; this build reads version 1")]
    UnsupportedVersion { version: u32 },
    #[error("model i/o failed: {0}")]
    Io(String),
    #[error("model file is not valid JSON: {0}")]
    Malformed(String),
}

/// A trained ridge model: standardization constants plus coefficients.
///
/// `coefs[0]` is the intercept; `coefs[1..]` align with `feature_names` and
/// apply to standardized features `(x - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemnantModel {
    pub version: u32,
    pub feature_names: Vec<String>,
    pub coefs: Vec<f64>,
    pub lambda: f64,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
}

impl RemnantModel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, RemnantError> {
        let model: RemnantModel =
            serde_json::from_str(text).map_err(|e| RemnantError::Malformed(e.to_string()))?;
        if model.version != 1 {
            return Err(RemnantError::UnsupportedVersion {
                version: model.version,
            });
        }
        let k = model.n_features();
        if model.coefs.len() != k + 1
            || model.feature_means.len() != k
            || model.feature_scales.len() != k
        {
            return Err(RemnantError::Malformed(
                "coefficient/standardization lengths do not match feature names".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), RemnantError> {
        std::fs::write(path, self.to_json()).map_err(|e| RemnantError::Io(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, RemnantError> {
        let text = std::fs::read_to_string(path).map_err(|e| RemnantError::Io(e.to_string()))?;
        Self::from_json(&text)
    }
}

fn check_matrix(rows: &[Vec<f64>], y: Option<&[f64]>) -> Result<usize, RemnantError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(RemnantError::EmptyTrainingData);
    }
    let k = rows[0].len();
    for (row, r) in rows.iter().enumerate() {
        if r.len() != k {
            return Err(RemnantError::FeatureWidthMismatch {
                row,
                got: r.len(),
                expected: k,
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(RemnantError::NonFiniteValue { row });
        }
        if let Some(y) = y {
            if !y[row].is_finite() {
                return Err(RemnantError::NonFiniteValue { row });
            }
        }
    }
    Ok(k)
}

/// Fits ridge regression of `y` on `rows` with penalty `lambda`.
///
/// Features are standardized to mean zero and unit scale (population standard
/// deviation; constant features get scale 1, leaving an all-zero column). The
/// intercept is never penalized. With `lambda = 0` this is ordinary least
/// squares and requires at least `k + 2` rows and a non-singular system.
pub fn train_remnant(
    rows: &[Vec<f64>],
    y: &[f64],
    feature_names: &[String],
    lambda: f64,
) -> Result<RemnantModel, RemnantError> {
    let k = check_matrix(rows, Some(y))?;
    assert_eq!(rows.len(), y.len(), "feature rows and outcomes must align");
    if feature_names.len() != k {
        return Err(RemnantError::FeatureNameMismatch {
            names: feature_names.len(),
            features: k,
        });
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(RemnantError::InvalidLambda { lambda });
    }
    let n = rows.len();
    if lambda == 0.0 && n < k + 2 {
        return Err(RemnantError::InsufficientRows {
            rows: n,
            features: k,
            required: k + 2,
        });
    }

    let mut feature_means = vec![0.0; k];
    let mut feature_scales = vec![0.0; k];
    for j in 0..k {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        feature_means[j] = mean;
        feature_scales[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }

    // Design matrix [1 | standardized features]; penalty on all but column 0.
    let design = DMatrix::from_fn(n, k + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            (rows[i][j - 1] - feature_means[j - 1]) / feature_scales[j - 1]
        }
    });
    let outcome = DVector::from_iterator(n, y.iter().copied());
    let mut gram = design.transpose() * &design;
    for j in 1..=k {
        gram[(j, j)] += lambda;
    }
    let rhs = design.transpose() * outcome;
    let coefs = Cholesky::new(gram)
        .ok_or(RemnantError::SingularSystem)?
        .solve(&rhs);

    Ok(RemnantModel {
        version: 1,
        feature_names: feature_names.to_vec(),
        coefs: coefs.iter().copied().collect(),
        lambda,
        feature_means,
        feature_scales,
    })
}

/// Applies a trained model to feature rows.
pub fn predict_remnant(model: &RemnantModel, rows: &[Vec<f64>]) -> Result<Vec<f64>, RemnantError> {
    let k = model.n_features();
    let mut out = Vec::with_capacity(rows.len());
    for (row, r) in rows.iter().enumerate() {
        if r.len() != k {
            return Err(RemnantError::FeatureWidthMismatch {
                row,
                got: r.len(),
                expected: k,
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(RemnantError::NonFiniteValue { row });
        }
        let mut pred = model.coefs[0];
        for (j, &v) in r.iter().enumerate() {
            pred += model.coefs[j + 1] * (v - model.feature_means[j]) / model.feature_scales[j];
        }
        out.push(pred);
    }
    Ok(out)
}
