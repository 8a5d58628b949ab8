//! Design-based effect estimation for Bernoulli-randomized A/B tests.
//!
//! The library estimates average treatment effects for two-arm experiments in
//! which each unit is assigned to treatment independently with a known
//! probability `p`. Precision comes from auxiliary predictions of the
//! untreated outcome ("remnant" predictions, trained on units outside the
//! experiment) and from leave-one-out imputation of within-experiment
//! outcomes. Because every imputation for unit `i` is built without unit
//! `i`'s outcome or assignment, the resulting effect estimators are exactly
//! unbiased over the randomization distribution, and their variance
//! estimators are conservative in expectation.
//!
//! Modules:
//! - [`domain`]: dataset types, eligibility validation, exact binomial test.
//! - [`imputers`]: leave-one-out outcome imputation strategies.
//! - [`estimators`]: effect estimators (difference in means, rebar, ANCOVA,
//!   and the leave-one-out adjusted estimator family).
//! - [`inference`]: normal-theory intervals and false-discovery-rate control.
//! - [`subgroups`]: tercile subgroup analysis and post-stratification.
//! - [`remnant`]: ridge-regression remnant model training and persistence.
//! - [`simulation`]: synthetic populations, exact randomization moments by
//!   full enumeration, and Monte Carlo experiments.

pub mod domain;
pub mod estimators;
pub mod imputers;
pub mod inference;
pub mod remnant;
pub mod simulation;
pub mod subgroups;

pub(crate) mod stats;
pub(crate) mod streams;

pub use domain::{
    binomial_test, min_per_arm_default, validate_contrast, ContrastDataset, DomainError,
    ExclusionReason, UnitRecord, ValidationVerdict,
};
pub use estimators::{
    ancova_ols, diff_in_means, estimate_all, loop_point, loop_variance, rebar, AnalysisConfig,
    EffectEstimate, EstimatorError, EstimatorId, EstimatorRun, SkipReason,
};
pub use imputers::{
    impute_ensemble, impute_fixed_remnant, impute_loo_forest, impute_loo_ols, impute_zero,
    FeatureSet, ForestParams, ImputerError, ImputerId, ImputerSpec, LooImputation,
};
pub use inference::{
    bh_adjust, by_adjust, variance_ratio, z_inference, FdrMethod, FdrResult, InferenceError,
    InferenceResult,
};
pub use remnant::{predict_remnant, train_remnant, RemnantError, RemnantModel};
pub use simulation::{
    exact_expectation, gen_synthetic, monte_carlo, ExactMoments, GroupSpec, McSummary, Pipeline,
    PipelineId, RemnantSpec, ScenarioSpec, SimError, SimMode, SyntheticPopulation, SyntheticRun,
};
pub use subgroups::{
    decompose_bias, estimate_subgroups, pooled_terciles, post_stratify, PopulationWeights,
    StratumEstimate, SubgroupError, SubgroupEstimates, SubgroupLabel, SubgroupScheme,
};
