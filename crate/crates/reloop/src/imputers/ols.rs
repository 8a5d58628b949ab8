//! Leave-one-out per-arm OLS on the remnant prediction.
//!
//! Within each arm, the imputer fits intercept + slope of Y on ŷʳ and
//! predicts each unit from the fit that excludes that unit. Own-arm
//! leave-one-out predictions use the hat-matrix identity
//! `ŷ₍₋ᵢ₎ = (ŷᵢ − hᵢYᵢ)/(1 − hᵢ)` instead of n refits; the two agree to
//! floating-point error, which the tests pin at 1e-8 against explicit refits.
//!
//! All sums run over globally centered values: subtracting one unit's terms
//! from centered sums loses far less precision than subtracting raw ones.
//! Degeneracy (fewer than two units or fewer than two distinct regressor
//! values after exclusions) is detected exactly via value multiplicities,
//! then falls back through leave-i-out arm mean → grand mean → 0.

use std::collections::HashMap;

use super::{
    columns, fallback_mean, require_arms, Columns, ImputerError, ImputerId, LooImputation,
};
use crate::domain::ContrastDataset;

struct ArmStats {
    m: usize,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
    /// Multiplicity of each raw regressor bit pattern within the arm.
    counts: HashMap<u64, usize>,
}

/// Intercept and slope in centered coordinates.
#[derive(Clone, Copy)]
struct Fit {
    a: f64,
    b: f64,
}

pub(crate) struct OlsMachinery {
    r_raw: Vec<f64>,
    r_c: Vec<f64>,
    y_c: Vec<f64>,
    y_mean: f64,
    cols: Columns,
    arms: [ArmStats; 2],
}

impl OlsMachinery {
    pub fn new(ds: &ContrastDataset) -> Result<Self, ImputerError> {
        let r_raw = ds
            .remnant_predictions()
            .ok_or(ImputerError::MissingRemnantPredictions)?;
        let cols = columns(ds);
        let n = ds.n();
        let r_mean = r_raw.iter().sum::<f64>() / n as f64;
        let y_mean = cols.y.iter().sum::<f64>() / n as f64;
        let r_c: Vec<f64> = r_raw.iter().map(|v| v - r_mean).collect();
        let y_c: Vec<f64> = cols.y.iter().map(|v| v - y_mean).collect();
        let mut arms = [
            ArmStats {
                m: 0,
                sx: 0.0,
                sy: 0.0,
                sxx: 0.0,
                sxy: 0.0,
                counts: HashMap::new(),
            },
            ArmStats {
                m: 0,
                sx: 0.0,
                sy: 0.0,
                sxx: 0.0,
                sxy: 0.0,
                counts: HashMap::new(),
            },
        ];
        for i in 0..n {
            let arm = &mut arms[usize::from(cols.treated[i])];
            arm.m += 1;
            arm.sx += r_c[i];
            arm.sy += y_c[i];
            arm.sxx += r_c[i] * r_c[i];
            arm.sxy += r_c[i] * y_c[i];
            *arm.counts.entry(r_raw[i].to_bits()).or_insert(0) += 1;
        }
        Ok(Self {
            r_raw,
            r_c,
            y_c,
            y_mean,
            cols,
            arms,
        })
    }

    /// Fits arm `z` with the listed units removed; `None` when degenerate.
    fn fit_excluding(&self, z: bool, exclude: &[usize]) -> Option<Fit> {
        let arm = &self.arms[usize::from(z)];
        let (mut m, mut sx, mut sy, mut sxx, mut sxy) = (arm.m, arm.sx, arm.sy, arm.sxx, arm.sxy);
        let mut removed: Vec<(u64, usize)> = Vec::with_capacity(exclude.len());
        for &i in exclude {
            if self.cols.treated[i] != z {
                continue;
            }
            m -= 1;
            sx -= self.r_c[i];
            sy -= self.y_c[i];
            sxx -= self.r_c[i] * self.r_c[i];
            sxy -= self.r_c[i] * self.y_c[i];
            let bits = self.r_raw[i].to_bits();
            match removed.iter_mut().find(|(b, _)| *b == bits) {
                Some((_, c)) => *c += 1,
                None => removed.push((bits, 1)),
            }
        }
        if m < 2 {
            return None;
        }
        let mut distinct = arm.counts.len();
        for (bits, gone) in removed {
            if arm.counts[&bits] == gone {
                distinct -= 1;
            }
        }
        if distinct < 2 {
            return None;
        }
        let mf = m as f64;
        let sxx_c = sxx - sx * sx / mf;
        if sxx_c <= 0.0 {
            return None;
        }
        let b = (sxy - sx * sy / mf) / sxx_c;
        let a = (sy - b * sx) / mf;
        Some(Fit { a, b })
    }

    fn predict(&self, fit: Fit, i: usize) -> f64 {
        fit.a + fit.b * self.r_c[i] + self.y_mean
    }

    /// Prediction of unit i's arm-`z` potential outcome using arm-`z` data
    /// excluding unit i. When i sits in arm `z` this is the hat-matrix
    /// leave-one-out value; otherwise the full-arm fit already excludes i.
    pub fn loo_prediction(&self, i: usize, z: bool) -> f64 {
        if self.cols.treated[i] != z {
            return match self.fit_excluding(z, &[]) {
                Some(fit) => self.predict(fit, i),
                None => fallback_mean(&self.cols, z, &[i]),
            };
        }
        let arm = &self.arms[usize::from(z)];
        let viable = self.fit_excluding(z, &[i]).is_some();
        let full = self.fit_excluding(z, &[]);
        match (full, viable) {
            (Some(fit), true) => {
                let mf = arm.m as f64;
                let x_bar = arm.sx / mf;
                let sxx_c = arm.sxx - arm.sx * arm.sx / mf;
                let h = 1.0 / mf + (self.r_c[i] - x_bar) * (self.r_c[i] - x_bar) / sxx_c;
                if 1.0 - h <= 1e-12 {
                    return fallback_mean(&self.cols, z, &[i]);
                }
                let pred_full = fit.a + fit.b * self.r_c[i];
                (pred_full - h * self.y_c[i]) / (1.0 - h) + self.y_mean
            }
            _ => fallback_mean(&self.cols, z, &[i]),
        }
    }

    /// Prediction of unit j's outcome from arm-`z` data excluding both i and
    /// j — the residual source for ensemble selection, which must not peek at
    /// either unit.
    pub fn pair_prediction(&self, i: usize, j: usize, z: bool) -> f64 {
        let exclude: &[usize] = if i == j { &[i] } else { &[i, j] };
        match self.fit_excluding(z, exclude) {
            Some(fit) => self.predict(fit, j),
            None => fallback_mean(&self.cols, z, exclude),
        }
    }
}

/// Leave-one-out OLS imputation without arm-size gates (total).
pub(crate) fn loo_ols_total(ds: &ContrastDataset) -> Result<LooImputation, ImputerError> {
    let mach = OlsMachinery::new(ds)?;
    let n = ds.n();
    let yhat0: Vec<f64> = (0..n).map(|i| mach.loo_prediction(i, false)).collect();
    let yhat1: Vec<f64> = (0..n).map(|i| mach.loo_prediction(i, true)).collect();
    Ok(LooImputation::from_predictions(
        ds,
        ImputerId::LooOls,
        yhat0,
        yhat1,
    ))
}

/// Per-arm leave-one-out OLS of Y on the remnant prediction.
///
/// Requires at least 3 units per arm; smaller arms signal that this imputer
/// should not be used directly (the enumeration oracle exercises the total
/// fallback path internally).
pub fn impute_loo_ols(ds: &ContrastDataset) -> Result<LooImputation, ImputerError> {
    require_arms(ds, 3)?;
    loo_ols_total(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::UnitRecord;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(id: usize, treated: bool, y: f64, r: f64) -> UnitRecord {
        UnitRecord {
            id: format!("u{id}"),
            treated,
            y,
            x: vec![],
            yhat_r: Some(r),
            group: None,
        }
    }

    fn random_ds(rng: &mut ChaCha8Rng, n: usize) -> ContrastDataset {
        let units: Vec<UnitRecord> = (0..n)
            .map(|i| {
                let r = rng.random::<f64>() * 4.0 - 2.0;
                let y = 0.5 + 1.3 * r + rng.random::<f64>();
                unit(i, rng.random::<f64>() < 0.5, y, r)
            })
            .collect();
        ContrastDataset::new("c", units, 0.5).unwrap()
    }

    /// Direct OLS of y on r over the given indices, evaluated at r0.
    fn explicit_fit(ds: &ContrastDataset, keep: &[usize], r0: f64) -> Option<f64> {
        let m = keep.len();
        if m < 2 {
            return None;
        }
        let r: Vec<f64> = keep
            .iter()
            .map(|&i| ds.units()[i].yhat_r.unwrap())
            .collect();
        let y: Vec<f64> = keep.iter().map(|&i| ds.units()[i].y).collect();
        if crate::stats::all_equal(&r) {
            return None;
        }
        let (rm, ym) = (
            r.iter().sum::<f64>() / m as f64,
            y.iter().sum::<f64>() / m as f64,
        );
        let sxx: f64 = r.iter().map(|v| (v - rm) * (v - rm)).sum();
        let sxy: f64 = r.iter().zip(&y).map(|(a, b)| (a - rm) * (b - ym)).sum();
        let b = sxy / sxx;
        Some(ym + b * (r0 - rm))
    }

    fn arm_indices(ds: &ContrastDataset, z: bool, exclude: &[usize]) -> Vec<usize> {
        (0..ds.n())
            .filter(|i| ds.units()[*i].treated == z && !exclude.contains(i))
            .collect()
    }

    #[test]
    fn collinear_remnant_reproduces_outcomes() {
        let units: Vec<UnitRecord> = [1.0, 2.0, 4.0, 3.0, 5.5, 7.0]
            .iter()
            .enumerate()
            .map(|(i, &y)| unit(i, i % 2 == 0, y, y))
            .collect();
        let ds = ContrastDataset::new("c", units, 0.5).unwrap();
        let imp = impute_loo_ols(&ds).unwrap();
        for (i, u) in ds.units().iter().enumerate() {
            assert!((imp.yhat0[i] - u.y).abs() < 1e-10);
            assert!((imp.yhat1[i] - u.y).abs() < 1e-10);
        }
        assert!(imp.e0_sq < 1e-20 && imp.e1_sq < 1e-20);
    }

    #[test]
    fn constant_regressor_falls_back_to_arm_means() {
        let units = vec![
            unit(0, false, 1.0, 0.5),
            unit(1, false, 3.0, 0.5),
            unit(2, false, 5.0, 0.5),
            unit(3, true, 10.0, 0.5),
            unit(4, true, 20.0, 0.5),
            unit(5, true, 30.0, 0.5),
        ];
        let ds = ContrastDataset::new("c", units, 0.5).unwrap();
        let imp = impute_loo_ols(&ds).unwrap();
        // Own-arm predictions are leave-i-out arm means.
        assert_eq!(imp.yhat0[0], 4.0);
        assert_eq!(imp.yhat0[1], 3.0);
        assert_eq!(imp.yhat1[3], 25.0);
        // Opposite-arm predictions are that arm's mean (i is not a member).
        assert_eq!(imp.yhat1[0], 20.0);
        assert_eq!(imp.yhat0[3], 3.0);
    }

    #[test]
    fn single_distinct_value_after_removal_degenerates() {
        let units = vec![
            unit(0, false, 1.0, 5.0),
            unit(1, false, 2.0, 5.0),
            unit(2, false, 4.0, 7.0),
            unit(3, true, 1.0, 1.0),
            unit(4, true, 2.0, 2.0),
            unit(5, true, 3.0, 3.0),
        ];
        let ds = ContrastDataset::new("c", units, 0.5).unwrap();
        let imp = impute_loo_ols(&ds).unwrap();
        // Removing unit 2 leaves control regressors {5, 5}: degenerate, so
        // unit 2's own-arm prediction is the leave-2-out control mean.
        assert_eq!(imp.yhat0[2], 1.5);
        // Removing unit 0 leaves {5, 7}: a valid two-point fit through
        // (5, 2) and (7, 4) evaluated at r = 5.
        assert!((imp.yhat0[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_explicit_refits() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let ds = random_ds(&mut rng, 20);
            let imp = loo_ols_total(&ds).unwrap();
            for i in 0..ds.n() {
                for z in [false, true] {
                    let keep = arm_indices(&ds, z, &[i]);
                    let want = explicit_fit(&ds, &keep, ds.units()[i].yhat_r.unwrap())
                        .unwrap_or_else(|| fallback_mean(&columns(&ds), z, &[i]));
                    let got = if z { imp.yhat1[i] } else { imp.yhat0[i] };
                    assert!(
                        (got - want).abs() < 1e-8,
                        "unit {i} arm {z}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn pair_predictions_match_explicit_refits() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let ds = random_ds(&mut rng, 14);
        let mach = OlsMachinery::new(&ds).unwrap();
        for z in [false, true] {
            for i in 0..ds.n() {
                for j in arm_indices(&ds, z, &[i]) {
                    let keep = arm_indices(&ds, z, &[i, j]);
                    let want = explicit_fit(&ds, &keep, ds.units()[j].yhat_r.unwrap())
                        .unwrap_or_else(|| fallback_mean(&columns(&ds), z, &[i, j]));
                    let got = mach.pair_prediction(i, j, z);
                    assert!((got - want).abs() < 1e-8, "pair ({i},{j}) arm {z}");
                }
            }
        }
    }

    #[test]
    fn own_outcome_does_not_move_own_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let ds = random_ds(&mut rng, 12);
        let base = loo_ols_total(&ds).unwrap();
        for i in 0..ds.n() {
            let mut units = ds.units().to_vec();
            units[i].y += 3.7;
            let bumped = ContrastDataset::new("c", units, 0.5).unwrap();
            let imp = loo_ols_total(&bumped).unwrap();
            assert!((imp.yhat0[i] - base.yhat0[i]).abs() < 1e-9);
            assert!((imp.yhat1[i] - base.yhat1[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn small_arm_is_rejected_by_the_public_gate() {
        let units = vec![
            unit(0, false, 1.0, 0.1),
            unit(1, false, 2.0, 0.2),
            unit(2, true, 3.0, 0.3),
            unit(3, true, 4.0, 0.4),
            unit(4, true, 5.0, 0.5),
        ];
        let ds = ContrastDataset::new("c", units, 0.5).unwrap();
        assert_eq!(
            impute_loo_ols(&ds).unwrap_err(),
            ImputerError::ArmTooSmall {
                arm: "control",
                size: 2,
                required: 3
            }
        );
        assert!(loo_ols_total(&ds).is_ok());
    }
}
