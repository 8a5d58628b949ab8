//! Command implementations. Each builds a serializable report; rendering and
//! output routing live in `main`.
//!
//! Contrasts are estimated in parallel but reports always list them in input
//! order, and batch FDR adjustment runs sequentially afterwards, so output is
//! a pure function of (input bytes, flags, seed).

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use reloop::domain::{validate_contrast, ContrastDataset, ValidationVerdict};
use reloop::estimators::{
    estimate_all, AnalysisConfig, EffectEstimate, EstimatorId, EstimatorRun, SkipReason,
};
use reloop::imputers::{FeatureSet, ForestParams, ImputerSpec};
use reloop::inference::{
    bh_adjust, by_adjust, variance_ratio, z_inference, FdrResult, InferenceResult,
};
use reloop::remnant::{predict_remnant, train_remnant, RemnantModel};
use reloop::simulation::{
    exact_expectation, gen_synthetic, monte_carlo, ExactMoments, McSummary, Pipeline, ScenarioSpec,
    SimMode,
};
use reloop::subgroups::{
    estimate_subgroups, pooled_terciles, post_stratify, PopulationWeights, SubgroupLabel,
    SubgroupScheme,
};

use crate::input::{self, LoadedContrast};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Flags shared by the dataset-driven commands.
pub struct AnalysisFlags {
    pub alpha: f64,
    pub min_arm: Option<usize>,
    pub binom_alpha: f64,
    pub seed: u64,
    pub estimators: Option<Vec<EstimatorId>>,
}

impl AnalysisFlags {
    fn config(&self) -> AnalysisConfig {
        let mut estimators = Vec::new();
        for &id in self.estimators.as_deref().unwrap_or(&EstimatorId::ALL) {
            if !estimators.contains(&id) {
                estimators.push(id);
            }
        }
        AnalysisConfig {
            estimators,
            forest: ForestParams {
                seed: self.seed,
                ..ForestParams::default()
            },
        }
    }
}

/// Loads the input CSV and attaches remnant predictions, either from a
/// prediction file (merged by row order) or by scoring a saved model on the
/// named covariate columns.
pub fn load_inputs(
    input_path: &Path,
    predictions: Option<&Path>,
    model: Option<&Path>,
) -> Result<Vec<LoadedContrast>> {
    if predictions.is_some() && model.is_some() {
        bail!("--remnant-predictions and --remnant-model are mutually exclusive");
    }
    let predictions = predictions.map(input::load_predictions).transpose()?;
    let mut loaded = input::load_contrasts(input_path, predictions.as_deref())?;
    if let Some(model_path) = model {
        let model = RemnantModel::load(model_path)
            .with_context(|| format!("cannot load model {}", model_path.display()))?;
        for contrast in &mut loaded {
            apply_model(contrast, &model)?;
        }
    }
    Ok(loaded)
}

fn apply_model(contrast: &mut LoadedContrast, model: &RemnantModel) -> Result<()> {
    let ds = &contrast.dataset;
    if ds.units().iter().any(|u| u.yhat_r.is_some()) {
        bail!("input already has a yhat_r column; drop it or omit --remnant-model");
    }
    let columns: Vec<usize> = model
        .feature_names
        .iter()
        .map(|name| {
            contrast
                .covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| {
                    anyhow!(
                        "contrast {:?}: model feature {name:?} is not an input column",
                        ds.contrast_id()
                    )
                })
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = ds
        .units()
        .iter()
        .map(|u| columns.iter().map(|&j| u.x[j]).collect())
        .collect();
    let yhat = predict_remnant(model, &rows)?;
    let units = ds
        .units()
        .iter()
        .zip(yhat)
        .map(|(u, v)| {
            let mut u = u.clone();
            u.yhat_r = Some(v);
            u
        })
        .collect();
    contrast.dataset = ContrastDataset::new(ds.contrast_id(), units, ds.p())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// validate

#[derive(Serialize)]
struct ValidateRow {
    #[serde(flatten)]
    verdict: ValidationVerdict,
    dropped_rows: usize,
}

#[derive(Serialize)]
struct ValidateReport {
    command: &'static str,
    version: &'static str,
    min_arm: Option<usize>,
    binom_alpha: f64,
    n_contrasts: usize,
    n_eligible: usize,
    contrasts: Vec<ValidateRow>,
}

pub fn cmd_validate(
    input_path: &Path,
    min_arm: Option<usize>,
    binom_alpha: f64,
) -> Result<impl Serialize> {
    let loaded = input::load_contrasts(input_path, None)?;
    let contrasts: Vec<ValidateRow> = loaded
        .par_iter()
        .map(|c| ValidateRow {
            verdict: validate_contrast(&c.dataset, min_arm, binom_alpha),
            dropped_rows: c.dropped_rows,
        })
        .collect();
    Ok(ValidateReport {
        command: "validate",
        version: VERSION,
        min_arm,
        binom_alpha,
        n_contrasts: contrasts.len(),
        n_eligible: contrasts.iter().filter(|c| c.verdict.eligible).count(),
        contrasts,
    })
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Serialize)]
struct FdrCell {
    adjusted: f64,
    rejected: bool,
}

#[derive(Serialize)]
struct EstimatorCell {
    estimator: EstimatorId,
    estimate: Option<EffectEstimate>,
    inference: Option<InferenceResult>,
    variance_ratio_vs_t_test: Option<f64>,
    skipped: Option<SkipReason>,
    bh: Option<FdrCell>,
    by: Option<FdrCell>,
}

#[derive(Serialize)]
struct AnalyzeContrast {
    contrast_id: String,
    dropped_rows: usize,
    validation: ValidationVerdict,
    estimators: Option<Vec<EstimatorCell>>,
}

#[derive(Serialize)]
struct FdrBatch {
    estimator: EstimatorId,
    contrast_ids: Vec<String>,
    p_values: Vec<f64>,
    bh: FdrResult,
    by: FdrResult,
}

#[derive(Serialize)]
struct AnalyzeReport {
    command: &'static str,
    version: &'static str,
    seed: u64,
    alpha: f64,
    binom_alpha: f64,
    min_arm: Option<usize>,
    estimators: Vec<EstimatorId>,
    n_contrasts: usize,
    n_eligible: usize,
    contrasts: Vec<AnalyzeContrast>,
    fdr: Vec<FdrBatch>,
}

fn estimator_cells(runs: Vec<EstimatorRun>, alpha: f64) -> Result<Vec<EstimatorCell>> {
    let t_test_var = runs
        .iter()
        .find(|r| r.id == EstimatorId::TTest)
        .and_then(|r| r.estimate.as_ref())
        .map(|e| e.var_hat);
    runs.into_iter()
        .map(|run| {
            let inference = run
                .estimate
                .as_ref()
                .map(|e| z_inference(e.tau_hat, e.var_hat, alpha))
                .transpose()?;
            // A ratio needs both variances; a degenerate zero denominator has
            // no meaningful ratio either, so it stays null too.
            let variance_ratio_vs_t_test = match (t_test_var, &run.estimate) {
                (Some(base), Some(e)) => variance_ratio(base, e.var_hat).ok(),
                _ => None,
            };
            Ok(EstimatorCell {
                estimator: run.id,
                estimate: run.estimate,
                inference,
                variance_ratio_vs_t_test,
                skipped: run.skipped,
                bh: None,
                by: None,
            })
        })
        .collect()
}

pub fn cmd_analyze(
    input_path: &Path,
    predictions: Option<&Path>,
    model: Option<&Path>,
    flags: &AnalysisFlags,
) -> Result<impl Serialize> {
    let loaded = load_inputs(input_path, predictions, model)?;
    let config = flags.config();

    let mut contrasts: Vec<AnalyzeContrast> = loaded
        .par_iter()
        .map(|c| {
            let validation = validate_contrast(&c.dataset, flags.min_arm, flags.binom_alpha);
            let estimators = if validation.eligible {
                Some(estimator_cells(
                    estimate_all(&c.dataset, &config),
                    flags.alpha,
                )?)
            } else {
                None
            };
            Ok(AnalyzeContrast {
                contrast_id: c.dataset.contrast_id().to_string(),
                dropped_rows: c.dropped_rows,
                validation,
                estimators,
            })
        })
        .collect::<Result<_>>()?;

    // Batch FDR: one family per estimator, over every eligible contrast that
    // produced a p-value, in report order.
    let mut fdr = Vec::new();
    for &estimator in &config.estimators {
        let mut contrast_ids = Vec::new();
        let mut p_values = Vec::new();
        let mut slots = Vec::new();
        for (i, contrast) in contrasts.iter().enumerate() {
            let Some(cells) = &contrast.estimators else {
                continue;
            };
            let Some((j, cell)) = cells
                .iter()
                .enumerate()
                .find(|(_, c)| c.estimator == estimator)
            else {
                continue;
            };
            if let Some(inf) = &cell.inference {
                contrast_ids.push(contrast.contrast_id.clone());
                p_values.push(inf.p_value);
                slots.push((i, j));
            }
        }
        let bh = bh_adjust(&p_values, flags.alpha)?;
        let by = by_adjust(&p_values, flags.alpha)?;
        for (t, (i, j)) in slots.into_iter().enumerate() {
            let cell = &mut contrasts[i]
                .estimators
                .as_mut()
                .expect("slot points at cells")[j];
            cell.bh = Some(FdrCell {
                adjusted: bh.adjusted[t],
                rejected: bh.rejected[t],
            });
            cell.by = Some(FdrCell {
                adjusted: by.adjusted[t],
                rejected: by.rejected[t],
            });
        }
        fdr.push(FdrBatch {
            estimator,
            contrast_ids,
            p_values,
            bh,
            by,
        });
    }

    Ok(AnalyzeReport {
        command: "analyze",
        version: VERSION,
        seed: flags.seed,
        alpha: flags.alpha,
        binom_alpha: flags.binom_alpha,
        min_arm: flags.min_arm,
        estimators: config.estimators,
        n_contrasts: contrasts.len(),
        n_eligible: contrasts.iter().filter(|c| c.validation.eligible).count(),
        contrasts,
        fdr,
    })
}

// ---------------------------------------------------------------------------
// subgroup

#[derive(Serialize)]
struct SubgroupEstimatorCell {
    estimator: EstimatorId,
    estimate: Option<EffectEstimate>,
    inference: Option<InferenceResult>,
    skipped: Option<SkipReason>,
}

#[derive(Serialize)]
struct StratumCell {
    label: SubgroupLabel,
    n: usize,
    n1: usize,
    n0: usize,
    skipped: Option<reloop::domain::ExclusionReason>,
    estimators: Vec<SubgroupEstimatorCell>,
}

#[derive(Serialize)]
struct SubgroupCovariateReport {
    covariate: usize,
    name: String,
    scheme: SubgroupScheme,
    low: StratumCell,
    high: StratumCell,
}

#[derive(Serialize)]
struct SubgroupContrast {
    contrast_id: String,
    validation: ValidationVerdict,
    subgroups: Option<Vec<SubgroupCovariateReport>>,
}

#[derive(Serialize)]
struct SubgroupReport {
    command: &'static str,
    version: &'static str,
    seed: u64,
    alpha: f64,
    min_arm: usize,
    binom_alpha: f64,
    estimators: Vec<EstimatorId>,
    covariates: Option<Vec<usize>>,
    contrasts: Vec<SubgroupContrast>,
}

fn simple_cells(runs: Vec<EstimatorRun>, alpha: f64) -> Result<Vec<SubgroupEstimatorCell>> {
    runs.into_iter()
        .map(|run| {
            let inference = run
                .estimate
                .as_ref()
                .map(|e| z_inference(e.tau_hat, e.var_hat, alpha))
                .transpose()?;
            Ok(SubgroupEstimatorCell {
                estimator: run.id,
                estimate: run.estimate,
                inference,
                skipped: run.skipped,
            })
        })
        .collect()
}

pub fn cmd_subgroup(
    input_path: &Path,
    predictions: Option<&Path>,
    model: Option<&Path>,
    covariates: Option<Vec<usize>>,
    min_arm: usize,
    flags: &AnalysisFlags,
) -> Result<impl Serialize> {
    let loaded = load_inputs(input_path, predictions, model)?;
    let config = flags.config();

    let contrasts: Vec<SubgroupContrast> = loaded
        .par_iter()
        .map(|c| {
            let ds = &c.dataset;
            // Contrast-level eligibility keeps its default arm floor; the
            // --min-arm flag governs the per-stratum gate here.
            let validation = validate_contrast(ds, None, flags.binom_alpha);
            let subgroups = if validation.eligible {
                let indices: Vec<usize> = match &covariates {
                    Some(list) => list.clone(),
                    None => (0..ds.k()).collect(),
                };
                Some(
                    indices
                        .into_iter()
                        .map(|covariate| {
                            if covariate >= ds.k() {
                                bail!(
                                    "contrast {:?}: covariate index {covariate} out of range \
                                     for {} covariates",
                                    ds.contrast_id(),
                                    ds.k()
                                );
                            }
                            let values: Vec<f64> =
                                ds.units().iter().map(|u| u.x[covariate]).collect();
                            let (q_lo, q_hi) = pooled_terciles(&values)?;
                            let scheme = SubgroupScheme::new(covariate, q_lo, q_hi)?;
                            let est = estimate_subgroups(ds, &scheme, &config, min_arm)?;
                            let stratum = |s: reloop::subgroups::StratumEstimate| {
                                Ok::<StratumCell, anyhow::Error>(StratumCell {
                                    label: s.label,
                                    n: s.n,
                                    n1: s.n1,
                                    n0: s.n0,
                                    skipped: s.skipped,
                                    estimators: simple_cells(s.runs, flags.alpha)?,
                                })
                            };
                            Ok(SubgroupCovariateReport {
                                covariate,
                                name: c.covariate_names[covariate].clone(),
                                scheme: est.scheme,
                                low: stratum(est.low)?,
                                high: stratum(est.high)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            Ok(SubgroupContrast {
                contrast_id: ds.contrast_id().to_string(),
                validation,
                subgroups,
            })
        })
        .collect::<Result<_>>()?;

    Ok(SubgroupReport {
        command: "subgroup",
        version: VERSION,
        seed: flags.seed,
        alpha: flags.alpha,
        min_arm,
        binom_alpha: flags.binom_alpha,
        estimators: config.estimators,
        covariates,
        contrasts,
    })
}

// ---------------------------------------------------------------------------
// poststratify

#[derive(Serialize)]
struct GroupCell {
    group: String,
    pi: f64,
    n: usize,
    n1: usize,
    n0: usize,
    estimators: Vec<SubgroupEstimatorCell>,
}

#[derive(Serialize)]
struct CombinedCell {
    estimator: EstimatorId,
    estimate: Option<EffectEstimate>,
    inference: Option<InferenceResult>,
    missing_groups: Vec<String>,
}

#[derive(Serialize)]
struct PostStratifyContrast {
    contrast_id: String,
    validation: ValidationVerdict,
    groups: Option<Vec<GroupCell>>,
    combined: Option<Vec<CombinedCell>>,
}

#[derive(Serialize)]
struct PostStratifyReport {
    command: &'static str,
    version: &'static str,
    seed: u64,
    alpha: f64,
    binom_alpha: f64,
    estimators: Vec<EstimatorId>,
    weights: Vec<(String, f64)>,
    contrasts: Vec<PostStratifyContrast>,
}

pub fn cmd_poststratify(
    input_path: &Path,
    predictions: Option<&Path>,
    model: Option<&Path>,
    weights_path: &Path,
    flags: &AnalysisFlags,
) -> Result<impl Serialize> {
    let entries = input::load_weights(weights_path)?;
    let weights = PopulationWeights::new(entries.clone())?;
    let loaded = load_inputs(input_path, predictions, model)?;
    let config = flags.config();

    let contrasts: Vec<PostStratifyContrast> = loaded
        .par_iter()
        .map(|c| {
            let ds = &c.dataset;
            let validation = validate_contrast(ds, flags.min_arm, flags.binom_alpha);
            if !validation.eligible {
                return Ok(PostStratifyContrast {
                    contrast_id: ds.contrast_id().to_string(),
                    validation,
                    groups: None,
                    combined: None,
                });
            }

            let mut groups = Vec::new();
            for (label, pi) in weights.iter() {
                let member = |u: &reloop::domain::UnitRecord| u.group.as_deref() == Some(label);
                let n = ds.units().iter().filter(|u| member(u)).count();
                let n1 = ds.units().iter().filter(|u| member(u) && u.treated).count();
                let estimators = if n == 0 {
                    Vec::new()
                } else {
                    let restricted = ds.restrict_to(member)?;
                    simple_cells(estimate_all(&restricted, &config), flags.alpha)?
                };
                groups.push(GroupCell {
                    group: label.to_string(),
                    pi,
                    n,
                    n1,
                    n0: n - n1,
                    estimators,
                });
            }

            let mut combined = Vec::new();
            for &estimator in &config.estimators {
                let mut per_group = BTreeMap::new();
                let mut missing_groups = Vec::new();
                for cell in &groups {
                    let found = cell
                        .estimators
                        .iter()
                        .find(|e| e.estimator == estimator)
                        .and_then(|e| e.estimate.clone());
                    match found {
                        Some(est) => {
                            per_group.insert(cell.group.clone(), est);
                        }
                        None => missing_groups.push(cell.group.clone()),
                    }
                }
                let estimate = if missing_groups.is_empty() {
                    Some(post_stratify(&per_group, &weights)?)
                } else {
                    None
                };
                let inference = estimate
                    .as_ref()
                    .map(|e| z_inference(e.tau_hat, e.var_hat, flags.alpha))
                    .transpose()?;
                combined.push(CombinedCell {
                    estimator,
                    estimate,
                    inference,
                    missing_groups,
                });
            }

            Ok(PostStratifyContrast {
                contrast_id: ds.contrast_id().to_string(),
                validation,
                groups: Some(groups),
                combined: Some(combined),
            })
        })
        .collect::<Result<_>>()?;

    Ok(PostStratifyReport {
        command: "poststratify",
        version: VERSION,
        seed: flags.seed,
        alpha: flags.alpha,
        binom_alpha: flags.binom_alpha,
        estimators: config.estimators,
        weights: entries,
        contrasts,
    })
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Serialize)]
struct ExactRow {
    #[serde(flatten)]
    moments: ExactMoments,
    bias: f64,
    conservative_margin: f64,
}

#[derive(Serialize)]
struct SimulateReport {
    command: &'static str,
    version: &'static str,
    seed: u64,
    alpha: f64,
    scenario: ScenarioSpec,
    pipelines: Vec<String>,
    exact: Option<Vec<ExactRow>>,
    monte_carlo: Option<McSummary>,
}

fn pipeline_from_name(name: &str, forest: &ForestParams) -> Result<Pipeline> {
    Ok(match name {
        "diff-in-means" => Pipeline::DiffInMeans,
        "rebar" => Pipeline::Rebar,
        "ancova-ols" => Pipeline::AncovaOls,
        "loop-zero" => Pipeline::Loop(ImputerSpec::zero()),
        "loop-fixed-remnant" => Pipeline::Loop(ImputerSpec::fixed_remnant()),
        "loop-ols" => Pipeline::Loop(ImputerSpec::loo_ols()),
        "loop-forest" => Pipeline::Loop(ImputerSpec::loo_forest(FeatureSet::Covariates, *forest)),
        "loop-ensemble" => Pipeline::Loop(ImputerSpec::ensemble(*forest)),
        other => bail!("unknown pipeline {other:?}"),
    })
}

pub fn cmd_simulate(
    scenario_path: &Path,
    pipelines: &str,
    trees: usize,
    alpha: f64,
    seed: u64,
) -> Result<impl Serialize> {
    let text = std::fs::read_to_string(scenario_path)
        .with_context(|| format!("cannot open scenario {}", scenario_path.display()))?;
    let scenario: ScenarioSpec = toml::from_str(&text)
        .with_context(|| format!("cannot parse scenario {}", scenario_path.display()))?;
    let forest = ForestParams {
        trees,
        seed,
        ..ForestParams::default()
    };
    let names: Vec<String> = pipelines
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        bail!("--pipelines must name at least one pipeline");
    }
    let pipelines: Vec<Pipeline> = names
        .iter()
        .map(|n| pipeline_from_name(n, &forest))
        .collect::<Result<_>>()?;

    let run = gen_synthetic(&scenario, seed)?;
    let (exact, mc) = match scenario.mode {
        SimMode::Enumerate => {
            let rows = pipelines
                .iter()
                .map(|pipeline| {
                    let moments = exact_expectation(
                        &run.population,
                        Some(&run.yhat_r),
                        pipeline,
                        run.population.p,
                    )?;
                    Ok(ExactRow {
                        bias: moments.bias(),
                        conservative_margin: moments.conservative_margin(),
                        moments,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(rows), None)
        }
        SimMode::MonteCarlo => (
            None,
            Some(monte_carlo(
                &run,
                &pipelines,
                scenario.replications,
                seed,
                alpha,
            )?),
        ),
    };

    Ok(SimulateReport {
        command: "simulate",
        version: VERSION,
        seed,
        alpha,
        scenario,
        pipelines: names,
        exact,
        monte_carlo: mc,
    })
}

// ---------------------------------------------------------------------------
// remnant

/// Fits the ridge model and returns it as the output document itself (already
/// versioned), so the file feeds straight back into `predict` and
/// `--remnant-model`.
pub fn cmd_remnant_train(input_path: &Path, outcome: &str, lambda: f64) -> Result<impl Serialize> {
    let names = input::column_names(input_path)?;
    if !names.iter().any(|n| n == outcome) {
        bail!("missing column {outcome:?}");
    }
    let feature_names: Vec<String> = names.into_iter().filter(|n| n != outcome).collect();
    if feature_names.is_empty() {
        bail!("training needs at least one feature column besides {outcome:?}");
    }
    let y: Vec<f64> = input::load_named_columns(input_path, &[outcome.to_string()])?
        .into_iter()
        .map(|row| row[0])
        .collect();
    let rows = input::load_named_columns(input_path, &feature_names)?;
    Ok(train_remnant(&rows, &y, &feature_names, lambda)?)
}

/// Scores a saved model on the named feature columns; output is a one-column
/// `yhat_r` CSV aligned to the input rows.
pub fn cmd_remnant_predict(input_path: &Path, model_path: &Path) -> Result<String> {
    let model = RemnantModel::load(model_path)
        .with_context(|| format!("cannot load model {}", model_path.display()))?;
    let rows = input::load_named_columns(input_path, &model.feature_names)?;
    let yhat = predict_remnant(&model, &rows)?;
    let mut out = String::from("yhat_r\n");
    for v in yhat {
        out.push_str(&crate::report::format_f64(v));
        out.push('\n');
    }
    Ok(out)
}
