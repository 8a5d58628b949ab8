//! Declarative scenario specs and the synthetic data generator behind the
//! oracles.
//!
//! The outcome model is standardized to unit variance:
//!
//! ```text
//! y(0) = ρ·Σⱼxⱼ/√k + ν·(x₁²−1)/√2 + σ·ε     σ² = 1 − ρ² − ν²
//! y(1) = y(0) + τ(𝐱)                         τ(𝐱) = τ₀ + τ₁·x₁
//! ```
//!
//! with x and ε independent standard normals, so ρ is the correlation
//! between the linear signal and the untreated outcome and ν adds curvature
//! a linear remnant model cannot capture. Treatment shifts each unit's
//! outcome by exactly τ(𝐱), so a constant τ makes the sample effect that
//! constant and the classic variance-reduction target 1/(1−ρ²) applies. The
//! remnant pool is drawn from the same outcome process with covariates
//! shifted by `shift`, a ridge model is fit on it, and its predictions for
//! the experimental units become `ŷʳ`.
//!
//! Every random ingredient has its own named stream of the seeded generator,
//! so populations are reproducible per seed and independent of worker count.

use serde::{Deserialize, Serialize};

use crate::domain::{ContrastDataset, UnitRecord};
use crate::remnant::{predict_remnant, train_remnant, RemnantModel};
use crate::simulation::SimError;
use crate::stats::normal01;
use crate::streams;
use crate::subgroups::PopulationWeights;

/// Remnant pool: how many units to draw, how far to shift their covariates,
/// and the ridge penalty for the model trained on them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemnantSpec {
    pub n: usize,
    pub shift: f64,
    pub lambda: f64,
}

impl Default for RemnantSpec {
    fn default() -> Self {
        Self {
            n: 500,
            shift: 0.0,
            lambda: 1.0,
        }
    }
}

/// Splits the population into two labeled groups on one covariate, with a
/// target population share `pi_low` for the low group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub covariate: usize,
    pub threshold: f64,
    pub low_label: String,
    pub high_label: String,
    pub pi_low: f64,
}

/// Which oracle a scenario is meant for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    Enumerate,
    #[default]
    MonteCarlo,
}

fn default_name() -> String {
    "scenario".to_string()
}

fn default_k() -> usize {
    1
}

fn default_replications() -> usize {
    1000
}

/// Declarative description of a synthetic experiment, deserializable from a
/// key-value config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub n: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    pub p: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub tau_base: f64,
    #[serde(default)]
    pub tau_slope: f64,
    #[serde(default)]
    pub nonlinearity: f64,
    #[serde(default)]
    pub remnant: RemnantSpec,
    #[serde(default)]
    pub group: Option<GroupSpec>,
    #[serde(default)]
    pub mode: SimMode,
    #[serde(default = "default_replications")]
    pub replications: usize,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |reason: &str| {
            Err(SimError::InvalidScenario {
                reason: reason.to_string(),
            })
        };
        if self.n == 0 {
            return fail("n must be at least 1");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if !self.p.is_finite() || self.p <= 0.0 || self.p >= 1.0 {
            return Err(SimError::InvalidProbability { p: self.p });
        }
        for (name, v) in [
            ("rho", self.rho),
            ("tau_base", self.tau_base),
            ("tau_slope", self.tau_slope),
            ("nonlinearity", self.nonlinearity),
        ] {
            if !v.is_finite() {
                return fail(&format!("{name} must be finite"));
            }
        }
        if self.rho * self.rho + self.nonlinearity * self.nonlinearity > 1.0 + 1e-12 {
            return fail("rho^2 + nonlinearity^2 must not exceed 1 (unit outcome variance)");
        }
        if !self.remnant.lambda.is_finite() || self.remnant.lambda < 0.0 {
            return fail("remnant.lambda must be finite and non-negative");
        }
        if self.remnant.n < self.k + 2 {
            return fail("remnant.n must be at least k + 2");
        }
        if !self.remnant.shift.is_finite() {
            return fail("remnant.shift must be finite");
        }
        if self.replications == 0 {
            return Err(SimError::NoReplications);
        }
        if let Some(g) = &self.group {
            if g.covariate >= self.k {
                return fail("group.covariate out of range");
            }
            if !g.pi_low.is_finite() || g.pi_low <= 0.0 || g.pi_low >= 1.0 {
                return fail("group.pi_low must lie strictly inside (0, 1)");
            }
            if g.low_label.is_empty() || g.high_label.is_empty() || g.low_label == g.high_label {
                return fail("group labels must be non-empty and distinct");
            }
        }
        Ok(())
    }

    fn sigma(&self) -> f64 {
        (1.0 - self.rho * self.rho - self.nonlinearity * self.nonlinearity)
            .max(0.0)
            .sqrt()
    }

    fn systematic(&self, x: &[f64]) -> f64 {
        let linear = x.iter().sum::<f64>() / (self.k as f64).sqrt();
        self.rho * linear + self.nonlinearity * (x[0] * x[0] - 1.0) / std::f64::consts::SQRT_2
    }

    fn tau(&self, x: &[f64]) -> f64 {
        self.tau_base + self.tau_slope * x[0]
    }
}

/// One population unit: both potential outcomes, covariates, and an optional
/// group label.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PopulationUnit {
    pub y0: f64,
    pub y1: f64,
    pub x: Vec<f64>,
    pub group: Option<String>,
}

/// A fully known potential-outcome table plus the scenario metadata the
/// oracles need. The true sample effect is [`sate`](Self::sate), recomputed
/// from the stored outcomes on demand.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticPopulation {
    pub units: Vec<PopulationUnit>,
    pub p: f64,
    pub weights: Option<PopulationWeights>,
    pub rho: f64,
    pub remnant_shift: f64,
}

impl SyntheticPopulation {
    pub fn new(
        units: Vec<PopulationUnit>,
        p: f64,
        weights: Option<PopulationWeights>,
        rho: f64,
        remnant_shift: f64,
    ) -> Result<Self, SimError> {
        if units.is_empty() {
            return Err(SimError::InvalidScenario {
                reason: "population has no units".into(),
            });
        }
        if !p.is_finite() || p <= 0.0 || p >= 1.0 {
            return Err(SimError::InvalidProbability { p });
        }
        Ok(Self {
            units,
            p,
            weights,
            rho,
            remnant_shift,
        })
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn k(&self) -> usize {
        self.units[0].x.len()
    }

    /// True sample average treatment effect `mean(y1 − y0)`.
    pub fn sate(&self) -> f64 {
        self.units.iter().map(|u| u.y1 - u.y0).sum::<f64>() / self.n() as f64
    }

    /// Population average effect under the stored group weights: `Σₖ πₖ·τ̄ₖ`.
    /// `None` without weights or when a weighted group has no members.
    pub fn pate(&self) -> Option<f64> {
        let weights = self.weights.as_ref()?;
        let mut total = 0.0;
        for (label, pi) in weights.iter() {
            let taus: Vec<f64> = self
                .units
                .iter()
                .filter(|u| u.group.as_deref() == Some(label))
                .map(|u| u.y1 - u.y0)
                .collect();
            if taus.is_empty() {
                return None;
            }
            total += pi * taus.iter().sum::<f64>() / taus.len() as f64;
        }
        Some(total)
    }

    /// The observed dataset under one assignment vector: each unit reveals
    /// `y1` if treated, else `y0`.
    pub fn realize(&self, treated: &[bool], yhat_r: Option<&[f64]>) -> ContrastDataset {
        assert_eq!(
            treated.len(),
            self.n(),
            "assignment length must match the population"
        );
        if let Some(r) = yhat_r {
            assert_eq!(
                r.len(),
                self.n(),
                "prediction length must match the population"
            );
        }
        let units: Vec<UnitRecord> = self
            .units
            .iter()
            .zip(treated)
            .enumerate()
            .map(|(i, (u, &z))| UnitRecord {
                id: format!("u{i}"),
                treated: z,
                y: if z { u.y1 } else { u.y0 },
                x: u.x.clone(),
                yhat_r: yhat_r.map(|r| r[i]),
                group: u.group.clone(),
            })
            .collect();
        ContrastDataset::new("synthetic", units, self.p)
            .expect("a valid population realizes to a valid dataset")
    }
}

/// A generated population together with the remnant model fit on the shifted
/// pool and its predictions for the experimental units.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRun {
    pub population: SyntheticPopulation,
    pub remnant_model: RemnantModel,
    pub yhat_r: Vec<f64>,
}

fn draw_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| shift + normal01(rng)).collect())
        .collect()
}

/// Draws a population and its remnant pool from `spec`, trains the ridge
/// remnant model, and returns both with predictions attached. Deterministic
/// per `seed`.
pub fn gen_synthetic(spec: &ScenarioSpec, seed: u64) -> Result<SyntheticRun, SimError> {
    spec.validate()?;
    let (n, k) = (spec.n, spec.k);
    let sigma = spec.sigma();

    let x = draw_matrix(
        &mut streams::rng(seed, streams::POPULATION_COVARIATES),
        n,
        k,
        0.0,
    );
    let mut rng0 = streams::rng(seed, streams::POPULATION_NOISE);
    let units: Vec<PopulationUnit> = x
        .into_iter()
        .map(|xi| {
            let base = spec.systematic(&xi);
            let y0 = base + sigma * normal01(&mut rng0);
            let y1 = y0 + spec.tau(&xi);
            let group = spec.group.as_ref().map(|g| {
                if xi[g.covariate] < g.threshold {
                    g.low_label.clone()
                } else {
                    g.high_label.clone()
                }
            });
            PopulationUnit {
                y0,
                y1,
                x: xi,
                group,
            }
        })
        .collect();

    let weights = spec.group.as_ref().map(|g| {
        PopulationWeights::new(vec![
            (g.low_label.clone(), g.pi_low),
            (g.high_label.clone(), 1.0 - g.pi_low),
        ])
        .expect("two distinct labels with complementary shares are valid weights")
    });

    let xr = draw_matrix(
        &mut streams::rng(seed, streams::REMNANT_COVARIATES),
        spec.remnant.n,
        k,
        spec.remnant.shift,
    );
    let mut rng_r = streams::rng(seed, streams::REMNANT_NOISE);
    let yr: Vec<f64> = xr
        .iter()
        .map(|xi| spec.systematic(xi) + sigma * normal01(&mut rng_r))
        .collect();
    let feature_names: Vec<String> = (0..k).map(|j| format!("x{j}")).collect();
    let remnant_model = train_remnant(&xr, &yr, &feature_names, spec.remnant.lambda)?;

    let rows: Vec<Vec<f64>> = units.iter().map(|u| u.x.clone()).collect();
    let yhat_r = predict_remnant(&remnant_model, &rows)?;

    Ok(SyntheticRun {
        population: SyntheticPopulation::new(units, spec.p, weights, spec.rho, spec.remnant.shift)?,
        remnant_model,
        yhat_r,
    })
}
