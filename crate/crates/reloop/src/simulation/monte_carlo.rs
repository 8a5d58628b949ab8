//! Monte Carlo estimates of bias, variance, and interval coverage.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::inference::z_inference;
use crate::simulation::{Pipeline, PipelineId, SimError, SyntheticRun};
use crate::stats::Accumulator;
use crate::streams;

/// One pipeline's Monte Carlo summary. `var_tau` is the empirical variance
/// of the point estimate across replications; `mean_vhat` is the average of
/// its variance estimate — conservativeness shows as `mean_vhat ≥ var_tau`.
/// Coverage counts confidence intervals containing the true sample effect.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McPipelineSummary {
    pub pipeline: PipelineId,
    pub successes: usize,
    pub failures: usize,
    pub mean_tau: f64,
    pub var_tau: f64,
    pub mean_vhat: f64,
    pub coverage: f64,
    pub coverage_se: f64,
    pub mc_se_tau: f64,
}

/// Summary of a Monte Carlo experiment over independent Bernoulli
/// assignments of one synthetic population.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McSummary {
    pub sate: f64,
    pub pate: Option<f64>,
    pub alpha: f64,
    pub replications: usize,
    pub seed: u64,
    pub pipelines: Vec<McPipelineSummary>,
}

/// Draws `replications` independent assignment vectors and evaluates every
/// pipeline on each. Replication `r` reads its assignment from stream
/// `replication_stream(r)` and re-keys forest bootstrap streams by `r`, so
/// results are deterministic per seed and bitwise independent of the
/// worker-thread count. Replications where a pipeline is undefined count as
/// failures for that pipeline only.
pub fn monte_carlo(
    run: &SyntheticRun,
    pipelines: &[Pipeline],
    replications: usize,
    seed: u64,
    alpha: f64,
) -> Result<McSummary, SimError> {
    if replications == 0 {
        return Err(SimError::NoReplications);
    }
    if pipelines.is_empty() {
        return Err(SimError::NoPipelines);
    }
    if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
        return Err(SimError::InvalidAlpha { alpha });
    }
    let pop = &run.population;
    let (n, p, sate) = (pop.n(), pop.p, pop.sate());

    let per_rep: Vec<Vec<Option<(f64, f64, bool)>>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = streams::rng(seed, streams::replication_stream(rep));
            let treated: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < p).collect();
            let ds = pop.realize(&treated, Some(&run.yhat_r));
            pipelines
                .iter()
                .map(|pipeline| {
                    let est = pipeline.reseeded(rep as u64).run(&ds).ok()?;
                    let inf = z_inference(est.tau_hat, est.var_hat, alpha).ok()?;
                    let covered = inf.ci_lower <= sate && sate <= inf.ci_upper;
                    Some((est.tau_hat, est.var_hat, covered))
                })
                .collect()
        })
        .collect();

    let mut summaries = Vec::with_capacity(pipelines.len());
    for (idx, pipeline) in pipelines.iter().enumerate() {
        let mut tau_acc = Accumulator::default();
        let mut vhat_acc = Accumulator::default();
        let mut covered_count = 0usize;
        let mut successes = 0usize;
        for rep in &per_rep {
            if let Some((tau, vhat, covered)) = rep[idx] {
                successes += 1;
                tau_acc.add(tau);
                vhat_acc.add(vhat);
                covered_count += usize::from(covered);
            }
        }
        if successes == 0 {
            return Err(SimError::NoFeasibleAssignments {
                pipeline: pipeline.id(),
            });
        }
        let mean_tau = tau_acc.total() / successes as f64;
        let mean_vhat = vhat_acc.total() / successes as f64;
        let mut dev_acc = Accumulator::default();
        for rep in &per_rep {
            if let Some((tau, _, _)) = rep[idx] {
                dev_acc.add((tau - mean_tau) * (tau - mean_tau));
            }
        }
        let var_tau = if successes >= 2 {
            dev_acc.total() / (successes - 1) as f64
        } else {
            0.0
        };
        let coverage = covered_count as f64 / successes as f64;
        summaries.push(McPipelineSummary {
            pipeline: pipeline.id(),
            successes,
            failures: replications - successes,
            mean_tau,
            var_tau,
            mean_vhat,
            coverage,
            coverage_se: (coverage * (1.0 - coverage) / successes as f64).sqrt(),
            mc_se_tau: (var_tau / successes as f64).sqrt(),
        });
    }

    Ok(McSummary {
        sate,
        pate: pop.pate(),
        alpha,
        replications,
        seed,
        pipelines: summaries,
    })
}
