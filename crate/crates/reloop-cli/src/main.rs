//! `reloop`: batch front door for design-based A/B-test analysis.
//!
//! Subcommands ingest contrast CSVs (and optional remnant predictions or a
//! saved remnant model), run validation/estimation/subgroup/post-
//! stratification/simulation, and emit JSON reports with a stable field order
//! and 17-significant-digit floats. Exit code 0 on success; on failure a
//! machine-readable error record goes to stderr and the exit code is 1.

mod commands;
mod input;
mod report;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use reloop::estimators::EstimatorId;

use commands::AnalysisFlags;

#[derive(Parser)]
#[command(
    name = "reloop",
    version,
    about = "Covariate-adjusted A/B test analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct InputArgs {
    /// Contrast CSV: required columns contrast_id, z, y; optional p, yhat_r,
    /// group; remaining columns are covariates in header order
    #[arg(long)]
    input: PathBuf,
    /// CSV with one yhat_r column aligned to the input rows
    #[arg(long)]
    remnant_predictions: Option<PathBuf>,
    /// Saved remnant model JSON, scored on the covariate columns it names
    #[arg(long)]
    remnant_model: Option<PathBuf>,
}

#[derive(Args)]
struct CommonFlags {
    /// Two-sided level for intervals and FDR control
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Level of the exact binomial check on the realized arm split
    #[arg(long, default_value_t = 0.1)]
    binom_alpha: f64,
    /// Seed for all randomized components
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma list of estimators (default: all six)
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorId>>,
}

impl CommonFlags {
    fn analysis(&self, min_arm: Option<usize>) -> AnalysisFlags {
        AnalysisFlags {
            alpha: self.alpha,
            min_arm,
            binom_alpha: self.binom_alpha,
            seed: self.seed,
            estimators: self.estimators.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the eligibility gates on every contrast
    Validate {
        /// Contrast CSV
        #[arg(long)]
        input: PathBuf,
        /// Eligibility floor per arm (default: 5*(k+2)+1 for k covariates)
        #[arg(long)]
        min_arm: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        binom_alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate effects per contrast with batch BH/BY adjustment
    Analyze {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        flags: CommonFlags,
        /// Eligibility floor per arm (default: 5*(k+2)+1 for k covariates)
        #[arg(long)]
        min_arm: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split each contrast into tercile subgroups of selected covariates
    Subgroup {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        flags: CommonFlags,
        /// Comma list of covariate indices (default: all)
        #[arg(long, value_delimiter = ',')]
        covariates: Option<Vec<usize>>,
        /// Minimum per-arm size inside a subgroup; here --min-arm gates the
        /// strata, not contrast eligibility
        #[arg(long, default_value_t = 10)]
        min_arm: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reweight per-group estimates to fixed population shares
    Poststratify {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        flags: CommonFlags,
        /// CSV of (group, pi) population shares
        #[arg(long)]
        weights: PathBuf,
        /// Eligibility floor per arm (default: 5*(k+2)+1 for k covariates)
        #[arg(long)]
        min_arm: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the enumeration or Monte Carlo oracle on a scenario config
    Simulate {
        /// Scenario TOML
        #[arg(long)]
        scenario: PathBuf,
        /// Comma list of pipelines
        #[arg(long, default_value = "diff-in-means,loop-ols,loop-ensemble")]
        pipelines: String,
        /// Trees per forest for forest-backed pipelines
        #[arg(long, default_value_t = 100)]
        trees: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train or apply a ridge remnant model
    Remnant {
        #[command(subcommand)]
        action: RemnantAction,
    },
}

#[derive(Subcommand)]
enum RemnantAction {
    /// Fit ridge regression of --outcome on every other column
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Outcome column name
        #[arg(long, default_value = "y")]
        outcome: String,
        /// Ridge penalty
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved model; emits a one-column yhat_r CSV
    Predict {
        #[arg(long)]
        input: PathBuf,
        /// Model JSON from `remnant train`
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(text: String, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn emit_report(r: impl Serialize, out: Option<&PathBuf>) -> Result<()> {
    emit(report::to_json_string(&r)?, out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate {
            input,
            min_arm,
            binom_alpha,
            out,
        } => emit_report(
            commands::cmd_validate(&input, min_arm, binom_alpha)?,
            out.as_ref(),
        ),
        Command::Analyze {
            input,
            flags,
            min_arm,
            out,
        } => emit_report(
            commands::cmd_analyze(
                &input.input,
                input.remnant_predictions.as_deref(),
                input.remnant_model.as_deref(),
                &flags.analysis(min_arm),
            )?,
            out.as_ref(),
        ),
        Command::Subgroup {
            input,
            flags,
            covariates,
            min_arm,
            out,
        } => emit_report(
            commands::cmd_subgroup(
                &input.input,
                input.remnant_predictions.as_deref(),
                input.remnant_model.as_deref(),
                covariates,
                min_arm,
                &flags.analysis(None),
            )?,
            out.as_ref(),
        ),
        Command::Poststratify {
            input,
            flags,
            weights,
            min_arm,
            out,
        } => emit_report(
            commands::cmd_poststratify(
                &input.input,
                input.remnant_predictions.as_deref(),
                input.remnant_model.as_deref(),
                &weights,
                &flags.analysis(min_arm),
            )?,
            out.as_ref(),
        ),
        Command::Simulate {
            scenario,
            pipelines,
            trees,
            alpha,
            seed,
            out,
        } => emit_report(
            commands::cmd_simulate(&scenario, &pipelines, trees, alpha, seed)?,
            out.as_ref(),
        ),
        Command::Remnant { action } => match action {
            RemnantAction::Train {
                input,
                outcome,
                lambda,
                out,
            } => emit_report(
                commands::cmd_remnant_train(&input, &outcome, lambda)?,
                out.as_ref(),
            ),
            RemnantAction::Predict { input, model, out } => {
                emit(commands::cmd_remnant_predict(&input, &model)?, out.as_ref())
            }
        },
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        // Machine-readable error record: one JSON object on stderr.
        eprintln!(
            "{{\"error\":{{\"detail\":{}}}}}",
            serde_json::to_string(&format!("{err:#}")).expect("strings always serialize")
        );
        std::process::exit(1);
    }
}
