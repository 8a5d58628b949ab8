//! Per-unit ensemble of the OLS and forest imputers.
//!
//! For each unit i and arm z the ensemble picks whichever candidate shows
//! the smaller squared error over the other units realized in arm z, and
//! uses that candidate's leave-one-out prediction for i. The residuals that
//! drive the choice come from fits excluding BOTH unit i and the unit being
//! scored (leave-pair-out): a residual from a fit that had seen unit i would
//! leak unit i's outcome into its own selection and break the exact
//! unbiasedness of the downstream estimator. Ties select OLS.

use super::forest::feature_rows;
use super::{
    columns, fallback_mean, require_arms, FeatureSet, FittedForest, ForestParams, ImputerError,
    ImputerId, LooImputation, OlsMachinery,
};
use crate::domain::ContrastDataset;

/// Ensemble output plus the per-unit selection record, for diagnostics.
pub(crate) struct EnsembleDetail {
    pub imputation: LooImputation,
    /// forest_chosen[i] = [arm-0 choice, arm-1 choice] for unit i.
    #[cfg_attr(not(test), allow(dead_code))]
    pub forest_chosen: Vec<[bool; 2]>,
}

impl EnsembleDetail {
    #[cfg_attr(not(test), allow(dead_code))]
    pub fn forest_share(&self) -> f64 {
        let picks = self.forest_chosen.iter().flatten().filter(|&&f| f).count();
        picks as f64 / (2 * self.forest_chosen.len()) as f64
    }
}

pub(crate) fn ensemble_detail(
    ds: &ContrastDataset,
    params: &ForestParams,
) -> Result<EnsembleDetail, ImputerError> {
    let mach = OlsMachinery::new(ds)?;
    let rows = feature_rows(ds, FeatureSet::CovariatesAndRemnant)?;
    let cols = columns(ds);
    let forests = [
        FittedForest::fit(&rows, &cols, false, params),
        FittedForest::fit(&rows, &cols, true, params),
    ];
    let n = ds.n();

    let mut yhat = [vec![0.0; n], vec![0.0; n]];
    let mut forest_chosen = vec![[false; 2]; n];
    for i in 0..n {
        for (zi, z) in [false, true].into_iter().enumerate() {
            let forest = &forests[zi];
            let mut sse_ols = 0.0;
            let mut sse_forest = 0.0;
            let mut scored = false;
            for j in 0..n {
                if j == i || cols.treated[j] != z {
                    continue;
                }
                let ols_pred = mach.pair_prediction(i, j, z);
                let forest_pred = forest
                    .pair_prediction(i, j)
                    .unwrap_or_else(|| fallback_mean(&cols, z, &[i, j]));
                sse_ols += (ols_pred - cols.y[j]) * (ols_pred - cols.y[j]);
                sse_forest += (forest_pred - cols.y[j]) * (forest_pred - cols.y[j]);
                scored = true;
            }
            let pick_forest = scored && sse_forest < sse_ols;
            forest_chosen[i][zi] = pick_forest;
            yhat[zi][i] = if pick_forest {
                forest
                    .loo_prediction(i)
                    .unwrap_or_else(|| fallback_mean(&cols, z, &[i]))
            } else {
                mach.loo_prediction(i, z)
            };
        }
    }
    let [yhat0, yhat1] = yhat;
    let imputation = LooImputation::from_predictions(ds, ImputerId::Ensemble, yhat0, yhat1);
    Ok(EnsembleDetail {
        imputation,
        forest_chosen,
    })
}

/// Ensemble imputation without arm-size gates (total over all assignments).
pub(crate) fn ensemble_total(
    ds: &ContrastDataset,
    params: &ForestParams,
) -> Result<LooImputation, ImputerError> {
    ensemble_detail(ds, params).map(|d| d.imputation)
}

/// Per-unit selection between leave-one-out OLS and the forest.
///
/// Requires the preconditions of both candidates: remnant predictions for
/// every unit and arms of at least `max(3, min_leaf)` units.
pub fn impute_ensemble(
    ds: &ContrastDataset,
    params: &ForestParams,
) -> Result<LooImputation, ImputerError> {
    require_arms(ds, 3.max(params.min_leaf))?;
    ensemble_total(ds, params)
}
