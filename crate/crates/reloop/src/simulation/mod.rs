//! Ground-truth oracles for the estimator family.
//!
//! [`gen_synthetic`] draws populations with known potential outcomes, so the
//! true sample effect τ̄ is available by construction. [`exact_expectation`]
//! enumerates every Bernoulli assignment vector at small `n` and returns the
//! exact randomization moments of an estimator — the strongest possible check
//! of unbiasedness and variance conservativeness. [`monte_carlo`] scales the
//! same checks to moderate `n` with replicated random assignments, reporting
//! bias, empirical variance, mean estimated variance, and interval coverage.
//!
//! All randomness is drawn from named, pre-assigned streams of a seeded
//! generator, and reductions happen in a fixed order, so results are bitwise
//! identical for any worker-thread count.

mod exact;
mod monte_carlo;
mod scenario;

pub use exact::{exact_expectation, ExactMoments};
pub use monte_carlo::{monte_carlo, McPipelineSummary, McSummary};
pub use scenario::{
    gen_synthetic, GroupSpec, PopulationUnit, RemnantSpec, ScenarioSpec, SimMode,
    SyntheticPopulation, SyntheticRun,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ContrastDataset;
use crate::estimators::{
    ancova_ols, diff_in_means, loop_point, rebar, EffectEstimate, EstimatorError,
};
use crate::imputers::{ImputerId, ImputerSpec};

/// Largest population size accepted by [`exact_expectation`]; beyond this the
/// 2ⁿ enumeration stops being desk-scale.
pub const MAX_ENUMERATION_UNITS: usize = 14;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("exact enumeration supports n <= {MAX_ENUMERATION_UNITS}, got {n}")]
    TooManyUnits { n: usize },
    #[error("assignment probability must lie strictly inside (0, 1), got {p}")]
    InvalidProbability { p: f64 },
    #[error("alpha must lie strictly inside (0, 1), got {alpha}")]
    InvalidAlpha { alpha: f64 },
    #[error("at least one replication is required")]
    NoReplications,
    #[error("at least one pipeline is required")]
    NoPipelines,
    #[error("scenario invalid: {reason}")]
    InvalidScenario { reason: String },
    #[error("pipeline {pipeline} produced no estimate under any assignment")]
    NoFeasibleAssignments { pipeline: PipelineId },
    #[error("remnant model training failed: {0}")]
    Remnant(#[from] crate::remnant::RemnantError),
}

/// Identifies an estimation pipeline in oracle reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelineId {
    #[serde(rename = "diff-in-means")]
    DiffInMeans,
    #[serde(rename = "rebar")]
    Rebar,
    #[serde(rename = "ancova-ols")]
    AncovaOls,
    #[serde(rename = "loop-zero")]
    LoopZero,
    #[serde(rename = "loop-fixed-remnant")]
    LoopFixedRemnant,
    #[serde(rename = "loop-ols")]
    LoopOls,
    #[serde(rename = "loop-forest")]
    LoopForest,
    #[serde(rename = "loop-ensemble")]
    LoopEnsemble,
}

impl PipelineId {
    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineId::DiffInMeans => "diff-in-means",
            PipelineId::Rebar => "rebar",
            PipelineId::AncovaOls => "ancova-ols",
            PipelineId::LoopZero => "loop-zero",
            PipelineId::LoopFixedRemnant => "loop-fixed-remnant",
            PipelineId::LoopOls => "loop-ols",
            PipelineId::LoopForest => "loop-forest",
            PipelineId::LoopEnsemble => "loop-ensemble",
        }
    }
}

impl std::fmt::Display for PipelineId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An estimation pipeline the oracles can evaluate under any assignment
/// vector. `Loop` runs its imputer in total mode (fallback chains instead of
/// minimum-arm gates), as enumeration requires; the regression baselines are
/// partial, and assignments where they are undefined are skipped and the
/// moments renormalized, i.e. reported conditional on feasibility.
#[derive(Clone, Debug, PartialEq)]
pub enum Pipeline {
    DiffInMeans,
    Rebar,
    AncovaOls,
    Loop(ImputerSpec),
}

impl Pipeline {
    pub fn id(&self) -> PipelineId {
        match self {
            Pipeline::DiffInMeans => PipelineId::DiffInMeans,
            Pipeline::Rebar => PipelineId::Rebar,
            Pipeline::AncovaOls => PipelineId::AncovaOls,
            Pipeline::Loop(spec) => match spec.kind {
                ImputerId::Zero => PipelineId::LoopZero,
                ImputerId::FixedRemnant => PipelineId::LoopFixedRemnant,
                ImputerId::LooOls => PipelineId::LoopOls,
                ImputerId::LooForest => PipelineId::LoopForest,
                ImputerId::Ensemble => PipelineId::LoopEnsemble,
            },
        }
    }

    pub(crate) fn run(&self, ds: &ContrastDataset) -> Result<EffectEstimate, EstimatorError> {
        match self {
            Pipeline::DiffInMeans => diff_in_means(ds),
            Pipeline::Rebar => rebar(ds),
            Pipeline::AncovaOls => ancova_ols(ds),
            Pipeline::Loop(spec) => spec
                .run_total(ds)
                .map_err(EstimatorError::from)
                .and_then(|imp| loop_point(ds, &imp)),
        }
    }

    /// Copy of the pipeline with forest bootstrap streams re-keyed for one
    /// Monte Carlo replication, so tree randomness is fresh per replication
    /// while remaining independent of the assignment draw.
    pub(crate) fn reseeded(&self, rep: u64) -> Pipeline {
        match self {
            Pipeline::Loop(spec) => {
                let mut spec = spec.clone();
                if let Some(forest) = spec.forest.as_mut() {
                    forest.seed = forest.seed.wrapping_add(rep);
                }
                Pipeline::Loop(spec)
            }
            other => other.clone(),
        }
    }
}
