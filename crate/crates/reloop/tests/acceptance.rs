//! Acceptance suite: every quantitative guarantee the library makes, checked
//! end to end at the stated tolerance. Each test prints one summary line so a
//! full run (`cargo test -p reloop --test acceptance -- --nocapture`) reads as
//! a checklist.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reloop::domain::{validate_contrast, ContrastDataset, ExclusionReason, UnitRecord};
use reloop::estimators::{diff_in_means, loop_point, rebar};
use reloop::imputers::{
    impute_fixed_remnant, impute_loo_ols, impute_zero, FeatureSet, ForestParams, ImputerSpec,
};
use reloop::inference::{bh_adjust, by_adjust, variance_ratio, FdrResult};
use reloop::simulation::{
    exact_expectation, gen_synthetic, monte_carlo, ExactMoments, McSummary, Pipeline, PipelineId,
    RemnantSpec, ScenarioSpec, SimMode, SyntheticRun,
};
use reloop::subgroups::{post_stratify, PopulationWeights};

fn enum_spec(p: f64) -> ScenarioSpec {
    ScenarioSpec {
        name: "enumeration".into(),
        n: 10,
        k: 2,
        p,
        rho: 0.3,
        tau_base: 2.5,
        tau_slope: 0.3,
        nonlinearity: 0.0,
        remnant: RemnantSpec {
            n: 80,
            shift: 0.0,
            lambda: 1.0,
        },
        group: None,
        mode: SimMode::Enumerate,
        replications: 1,
    }
}

struct EnumeratedPopulation {
    p: f64,
    seed: u64,
    sate: f64,
    /// Moments for: loop over zero, fixed-remnant, loo-ols, loo-forest,
    /// ensemble — in that order.
    moments: Vec<ExactMoments>,
}

fn enum_imputers(seed: u64) -> Vec<ImputerSpec> {
    let forest = ForestParams {
        trees: 20,
        vars_per_split: None,
        min_leaf: 2,
        seed,
    };
    vec![
        ImputerSpec::zero(),
        ImputerSpec::fixed_remnant(),
        ImputerSpec::loo_ols(),
        ImputerSpec::loo_forest(FeatureSet::Covariates, forest),
        ImputerSpec::ensemble(forest),
    ]
}

fn enumeration_table() -> &'static (Vec<EnumeratedPopulation>, f64) {
    static TABLE: OnceLock<(Vec<EnumeratedPopulation>, f64)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let started = Instant::now();
        let mut table = Vec::new();
        for i in 0..20u64 {
            let p = if i % 2 == 0 { 0.5 } else { 0.3 };
            let seed = 1000 + i;
            let run = gen_synthetic(&enum_spec(p), seed).unwrap();
            let moments = enum_imputers(seed)
                .into_iter()
                .map(|spec| {
                    exact_expectation(&run.population, Some(&run.yhat_r), &Pipeline::Loop(spec), p)
                        .unwrap()
                })
                .collect();
            table.push(EnumeratedPopulation {
                p,
                seed,
                sate: run.population.sate(),
                moments,
            });
        }
        (table, started.elapsed().as_secs_f64())
    })
}

#[test]
fn exact_unbiasedness_by_enumeration() {
    let (table, elapsed) = enumeration_table();
    let mut worst: f64 = 0.0;
    for pop in table {
        for m in &pop.moments {
            let rel = m.bias().abs() / pop.sate.abs().max(1.0);
            assert!(
                rel <= 1e-9,
                "pipeline {} seed {} p {}: |E[tau_hat] - tau_bar| = {:.3e} relative",
                m.pipeline,
                pop.seed,
                pop.p,
                rel
            );
            worst = worst.max(rel);
        }
    }
    assert!(
        *elapsed < 300.0,
        "enumeration of 20 populations x 5 imputers took {elapsed:.1}s, budget 300s"
    );
    println!(
        "acceptance exact_unbiasedness: PASS (100 enumerations, worst relative bias {worst:.2e}, {elapsed:.1}s)"
    );
}

#[test]
fn exact_conservativeness_by_enumeration() {
    let (table, _) = enumeration_table();
    let mut tightest = f64::INFINITY;
    for pop in table {
        for m in &pop.moments {
            if matches!(
                m.pipeline,
                PipelineId::LoopZero | PipelineId::LoopFixedRemnant
            ) {
                let margin = m.conservative_margin();
                assert!(
                    margin >= -1e-12,
                    "pipeline {} seed {}: E[v_hat] - Var(tau_hat) = {margin:.3e}",
                    m.pipeline,
                    pop.seed
                );
                tightest = tightest.min(margin);
            }
        }
    }
    println!(
        "acceptance exact_conservativeness: PASS (40 enumerations, tightest margin {tightest:.3e})"
    );
}

#[test]
fn loop_identities_at_balanced_realized_arms() {
    let mut worst: f64 = 0.0;
    for (p, treated_idx) in [
        (0.5, vec![0usize, 2, 5, 7, 9]), // n*p = 5 of 10
        (0.5, vec![1, 3, 4, 6, 8]),
        (0.3, vec![2, 5, 9]), // n*p = 3 of 10
        (0.3, vec![0, 4, 7]),
    ] {
        let run = gen_synthetic(&enum_spec(p), 77).unwrap();
        let treated: Vec<bool> = (0..10).map(|i| treated_idx.contains(&i)).collect();
        let ds = run.population.realize(&treated, Some(&run.yhat_r));

        let loop_zero = loop_point(&ds, &impute_zero(&ds)).unwrap();
        let dm = diff_in_means(&ds).unwrap();
        let gap_dm = (loop_zero.tau_hat - dm.tau_hat).abs();
        assert!(
            gap_dm <= 1e-12,
            "m_hat=0 vs diff-in-means at p={p}: gap {gap_dm:.3e}"
        );

        let loop_fixed = loop_point(&ds, &impute_fixed_remnant(&ds).unwrap()).unwrap();
        let rb = rebar(&ds).unwrap();
        let gap_rb = (loop_fixed.tau_hat - rb.tau_hat).abs();
        assert!(
            gap_rb <= 1e-12,
            "m_hat=yhat_r vs rebar at p={p}: gap {gap_rb:.3e}"
        );

        worst = worst.max(gap_dm).max(gap_rb);
    }
    println!("acceptance loop_identities: PASS (4 balanced assignments, worst gap {worst:.2e})");
}

fn centered_fit(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let m = points.len() as f64;
    let mx = points.iter().map(|(x, _)| x).sum::<f64>() / m;
    let my = points.iter().map(|(_, y)| y).sum::<f64>() / m;
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

#[test]
fn loo_ols_matches_explicit_refits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4040);
    let mut worst: f64 = 0.0;
    for ds_index in 0..50 {
        let n = 20;
        let units: Vec<UnitRecord> = loop {
            let candidate: Vec<UnitRecord> = (0..n)
                .map(|i| {
                    let r: f64 = 4.0 * rng.random::<f64>() - 2.0;
                    let y = 1.5 * r + rng.random::<f64>();
                    UnitRecord {
                        id: format!("u{i}"),
                        treated: rng.random::<f64>() < 0.5,
                        y,
                        x: vec![],
                        yhat_r: Some(r),
                        group: None,
                    }
                })
                .collect();
            let n1 = candidate.iter().filter(|u| u.treated).count();
            if n1 >= 3 && n - n1 >= 3 {
                break candidate;
            }
        };
        let ds = ContrastDataset::new(format!("d{ds_index}"), units, 0.5).unwrap();
        let imp = impute_loo_ols(&ds).unwrap();

        let arm_points = |arm: bool, exclude: Option<usize>| -> Vec<(f64, f64)> {
            ds.units()
                .iter()
                .enumerate()
                .filter(|(j, u)| u.treated == arm && Some(*j) != exclude)
                .map(|(_, u)| (u.yhat_r.unwrap(), u.y))
                .collect()
        };
        for (i, u) in ds.units().iter().enumerate() {
            let r = u.yhat_r.unwrap();
            for arm in [false, true] {
                // Own-arm predictions exclude the unit; opposite-arm
                // predictions use the full other arm.
                let exclude = (u.treated == arm).then_some(i);
                let (a, b) = centered_fit(&arm_points(arm, exclude)).unwrap();
                let want = a + b * r;
                let got = if arm { imp.yhat1[i] } else { imp.yhat0[i] };
                let gap = (got - want).abs();
                assert!(
                    gap <= 1e-8,
                    "dataset {ds_index} unit {i} arm {arm}: leverage {got} vs refit {want}"
                );
                worst = worst.max(gap);
            }
        }
    }
    println!(
        "acceptance loo_ols_oracle: PASS (50 datasets x 20 units x 2 arms, worst gap {worst:.2e})"
    );
}

fn mc_spec(shift: f64, nonlinearity: f64) -> ScenarioSpec {
    ScenarioSpec {
        name: "mc".into(),
        n: 200,
        k: 3,
        p: 0.5,
        rho: 0.7,
        tau_base: 0.3,
        tau_slope: 0.0,
        nonlinearity,
        remnant: RemnantSpec {
            n: 1000,
            shift,
            lambda: 1.0,
        },
        group: None,
        mode: SimMode::MonteCarlo,
        replications: 1,
    }
}

fn mc_pipelines(seed: u64) -> Vec<Pipeline> {
    let forest = ForestParams {
        trees: 60,
        vars_per_split: None,
        min_leaf: 5,
        seed,
    };
    vec![
        Pipeline::DiffInMeans,
        Pipeline::Loop(ImputerSpec::loo_ols()),
        Pipeline::Loop(ImputerSpec::ensemble(forest)),
    ]
}

fn main_mc() -> &'static (McSummary, f64) {
    static MC: OnceLock<(McSummary, f64)> = OnceLock::new();
    MC.get_or_init(|| {
        let started = Instant::now();
        let run = gen_synthetic(&mc_spec(0.0, 0.0), 2029).unwrap();
        let summary = monte_carlo(&run, &mc_pipelines(51), 20_000, 90, 0.05).unwrap();
        (summary, started.elapsed().as_secs_f64())
    })
}

fn row(summary: &McSummary, id: PipelineId) -> &reloop::simulation::McPipelineSummary {
    summary.pipelines.iter().find(|r| r.pipeline == id).unwrap()
}

#[test]
fn synthetic_precision_gain_at_rho_07() {
    let (summary, elapsed) = main_mc();
    let dm = row(summary, PipelineId::DiffInMeans);
    let ols = row(summary, PipelineId::LoopOls);
    let ens = row(summary, PipelineId::LoopEnsemble);

    let target = 1.0 / (1.0 - 0.49);
    let ratio_ols = variance_ratio(dm.var_tau, ols.var_tau).unwrap();
    let ratio_ens = variance_ratio(dm.var_tau, ens.var_tau).unwrap();
    assert!(
        (ratio_ols - target).abs() <= 0.15 * target,
        "remnant-adjusted ratio {ratio_ols:.3} vs target {target:.3}"
    );
    assert!(
        ratio_ens >= ratio_ols - 0.05,
        "ensemble ratio {ratio_ens:.3} below remnant-only ratio {ratio_ols:.3} - 0.05"
    );
    assert!(
        *elapsed < 600.0,
        "20k replications took {elapsed:.1}s, budget 600s"
    );
    println!(
        "acceptance precision_gain: PASS (ratios {ratio_ols:.3}/{ratio_ens:.3} vs target {target:.3}, {elapsed:.1}s)"
    );
}

#[test]
fn conservative_coverage_at_rho_07() {
    let (summary, _) = main_mc();
    for id in [PipelineId::LoopOls, PipelineId::LoopEnsemble] {
        let r = row(summary, id);
        let threshold = 0.95 - 3.0 * r.coverage_se;
        assert!(
            r.coverage >= threshold,
            "{id}: coverage {:.4} below {threshold:.4}",
            r.coverage
        );
    }
    let c_ols = row(summary, PipelineId::LoopOls).coverage;
    let c_ens = row(summary, PipelineId::LoopEnsemble).coverage;
    println!(
        "acceptance conservative_coverage: PASS (coverage {c_ols:.4}/{c_ens:.4} at nominal 0.95)"
    );
}

#[test]
fn shifted_remnant_keeps_bias_null_and_precision_sane() {
    let started = Instant::now();
    let run = gen_synthetic(&mc_spec(1.0, 0.35), 3030).unwrap();
    let summary = monte_carlo(&run, &mc_pipelines(52), 10_000, 91, 0.05).unwrap();
    let dm = row(&summary, PipelineId::DiffInMeans);
    let ens = row(&summary, PipelineId::LoopEnsemble);

    let bias = (ens.mean_tau - summary.sate).abs();
    assert!(
        bias <= 3.0 * ens.mc_se_tau,
        "bias {bias:.5} exceeds 3 x MC-SE {:.5} under shifted remnant",
        ens.mc_se_tau
    );
    let ratio = variance_ratio(dm.var_tau, ens.var_tau).unwrap();
    assert!(
        ratio >= 0.95,
        "shifted-remnant variance ratio {ratio:.3} dropped below 0.95"
    );
    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "acceptance shifted_remnant: PASS (|bias| {bias:.1e} <= {:.1e}, ratio {ratio:.3}, {elapsed:.1}s)",
        3.0 * ens.mc_se_tau
    );
}

/// Step-up reference computed the slow, direct way: adjusted values by an
/// O(m^2) suffix minimum, rejections by the classic largest-feasible-rank
/// rule on sorted values.
fn reference_stepup(p: &[f64], alpha: f64, c: f64) -> (Vec<f64>, Vec<bool>) {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));

    let mut adjusted = vec![0.0; m];
    for (rank0, &i) in order.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (r, &j) in order.iter().enumerate().skip(rank0) {
            best = best.min(c * m as f64 * p[j] / (r + 1) as f64);
        }
        adjusted[i] = best.min(1.0);
    }

    let mut k_star = 0usize;
    for rank0 in 0..m {
        if p[order[rank0]] <= (rank0 + 1) as f64 * alpha / (c * m as f64) {
            k_star = rank0 + 1;
        }
    }
    let mut rejected = vec![false; m];
    for &i in order.iter().take(k_star) {
        rejected[i] = true;
    }
    (adjusted, rejected)
}

fn check_against_reference(label: &str, got: &FdrResult, p: &[f64], alpha: f64, c: f64) {
    let (adj, rej) = reference_stepup(p, alpha, c);
    assert_eq!(
        got.rejected, rej,
        "{label}: rejection sets differ for p={p:?}"
    );
    assert_eq!(got.n_rejected, rej.iter().filter(|&&x| x).count());
    for (a, b) in got.adjusted.iter().zip(&adj) {
        assert!(
            (a - b).abs() <= 1e-12,
            "{label}: adjusted {a} vs reference {b} for p={p:?}"
        );
    }
}

#[test]
fn fdr_matches_brute_force_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8080);
    for _ in 0..1000 {
        let m = rng.random_range(1..=50);
        let mut p: Vec<f64> = (0..m)
            .map(|_| match rng.random_range(0..10u8) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random::<f64>(),
            })
            .collect();
        // Inject exact ties to stress ordering.
        if m >= 4 {
            p[1] = p[0];
            p[3] = p[2];
        }
        let alpha = 0.05;
        let c_by: f64 = (1..=m).map(|j| 1.0 / j as f64).sum();
        check_against_reference("bh", &bh_adjust(&p, alpha).unwrap(), &p, alpha, 1.0);
        check_against_reference("by", &by_adjust(&p, alpha).unwrap(), &p, alpha, c_by);
    }

    // Global null at the scale of a large experiment batch: the realized
    // false discovery rate stays at the nominal level.
    let (m, reps, alpha) = (227, 5000, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(8181);
    let mut false_discovery_reps = 0usize;
    for _ in 0..reps {
        let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        if bh_adjust(&p, alpha).unwrap().n_rejected > 0 {
            false_discovery_reps += 1;
        }
    }
    let fdr = false_discovery_reps as f64 / reps as f64;
    let bound = alpha + 3.0 * (alpha * (1.0 - alpha) / reps as f64).sqrt();
    assert!(fdr <= bound, "global-null FDR {fdr:.4} exceeds {bound:.4}");
    println!(
        "acceptance fdr_oracle: PASS (1000 vectors exact, global-null FDR {fdr:.4} <= {bound:.4})"
    );
}

#[test]
fn post_stratification_reproduces_the_full_partition_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9090);
    let mut worst: f64 = 0.0;
    for ds_index in 0..20 {
        // Pair each potential-outcome row into one treated and one control
        // unit: group means become exact, so the sample-share-weighted
        // combination must reproduce the overall mean effect.
        let n = 30 + rng.random_range(0..30);
        let mut units = Vec::new();
        let mut tau_sum = 0.0;
        let mut groups: Vec<String> = Vec::new();
        for i in 0..n {
            let g = format!("g{}", rng.random_range(0..3u8));
            let y0 = 2.0 * rng.random::<f64>() - 1.0;
            let tau = rng.random::<f64>();
            tau_sum += tau;
            units.push(UnitRecord {
                id: format!("t{i}"),
                treated: true,
                y: y0 + tau,
                x: vec![],
                yhat_r: None,
                group: Some(g.clone()),
            });
            units.push(UnitRecord {
                id: format!("c{i}"),
                treated: false,
                y: y0,
                x: vec![],
                yhat_r: None,
                group: Some(g.clone()),
            });
            groups.push(g);
        }
        let sate = tau_sum / n as f64;
        let ds = ContrastDataset::new(format!("d{ds_index}"), units, 0.5).unwrap();

        let labels: Vec<String> = {
            let mut l = groups.clone();
            l.sort();
            l.dedup();
            l
        };
        let mut weights = Vec::new();
        let mut estimates = BTreeMap::new();
        for label in &labels {
            let share = groups.iter().filter(|g| *g == label).count() as f64 / n as f64;
            weights.push((label.clone(), share));
            let part = ds
                .restrict_to(|u| u.group.as_deref() == Some(label))
                .unwrap();
            estimates.insert(label.clone(), diff_in_means(&part).unwrap());
        }
        let combined =
            post_stratify(&estimates, &PopulationWeights::new(weights).unwrap()).unwrap();
        let gap = (combined.tau_hat - sate).abs();
        assert!(
            gap <= 1e-12,
            "dataset {ds_index}: post-stratified {} vs {sate}",
            combined.tau_hat
        );
        worst = worst.max(gap);
    }
    println!("acceptance post_stratification_identity: PASS (20 datasets, worst gap {worst:.2e})");
}

#[test]
fn validation_gates_fire_the_specified_reasons() {
    let unit = |id: usize, treated: bool, y: f64, x: Vec<f64>| UnitRecord {
        id: format!("u{id}"),
        treated,
        y,
        x,
        yhat_r: None,
        group: None,
    };

    // Zero outcome variance: everything else healthy.
    let units: Vec<UnitRecord> = (0..60)
        .map(|i| unit(i, i % 2 == 0, 1.0, vec![i as f64]))
        .collect();
    let ds = ContrastDataset::new("constant", units, 0.5).unwrap();
    let verdict = validate_contrast(&ds, None, 0.1);
    assert!(!verdict.eligible);
    assert_eq!(verdict.reasons, vec![ExclusionReason::ZeroOutcomeVariance]);

    // One arm below the default floor 5(k+2)+1 = 21 at k=2.
    let mut units = Vec::new();
    for i in 0..20 {
        units.push(unit(i, true, (i % 5) as f64, vec![i as f64, 1.0]));
    }
    for i in 20..52 {
        units.push(unit(i, false, (i % 7) as f64, vec![i as f64, 2.0]));
    }
    let ds = ContrastDataset::new("small-arm", units, 0.5).unwrap();
    let verdict = validate_contrast(&ds, None, 0.1);
    assert!(!verdict.eligible);
    assert_eq!(verdict.reasons, vec![ExclusionReason::ArmTooSmall]);

    // Realized split implausible under the declared probability.
    let units: Vec<UnitRecord> = (0..200)
        .map(|i| unit(i, i < 130, (i % 11) as f64, vec![i as f64]))
        .collect();
    let ds = ContrastDataset::new("suspect-p", units, 0.5).unwrap();
    let verdict = validate_contrast(&ds, None, 0.1);
    assert!(!verdict.eligible);
    assert_eq!(
        verdict.reasons,
        vec![ExclusionReason::RandomizationProbSuspect]
    );

    println!("acceptance validation_gates: PASS (3 fixtures, exact reason vectors)");
}

// Fast structural check that the shared Monte Carlo scenario really carries
// what the headline tests assume: complete remnant predictions and the
// expected pipeline set.
#[test]
fn mc_scenario_wiring_is_complete() {
    let run: SyntheticRun = gen_synthetic(&mc_spec(0.0, 0.0), 2029).unwrap();
    assert_eq!(run.population.n(), 200);
    assert_eq!(run.yhat_r.len(), 200);
    let ids: Vec<PipelineId> = mc_pipelines(51).iter().map(Pipeline::id).collect();
    assert_eq!(
        ids,
        vec![
            PipelineId::DiffInMeans,
            PipelineId::LoopOls,
            PipelineId::LoopEnsemble
        ]
    );
}
