//! Leave-one-out bagged regression forest.
//!
//! Each arm gets its own forest of CART-style variance-reduction trees over
//! Poisson(1) bootstrap samples. The bootstrap count of unit i in tree t is
//! drawn from a stream keyed only by (arm, tree, unit position) — never by
//! the realized assignment — and the prediction for unit i from an arm's
//! forest aggregates only trees whose count for i is zero. A tree used for i
//! therefore never saw unit i, whether or not i sits in that arm, so the
//! prediction is a fixed function of the other units' data: flipping unit
//! i's assignment or outcome leaves its own predictions bit-identical, which
//! is exactly what the enumeration oracle requires.
//!
//! Units left with no usable tree fall back to the leave-i-out arm mean,
//! then the leave-i-out grand mean, then 0, keeping the imputer total.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    columns, fallback_mean, require_arms, Columns, FeatureSet, ImputerError, ImputerId,
    LooImputation,
};
use crate::domain::ContrastDataset;
use crate::stats::all_equal;
use crate::streams;

/// Forest shape and seeding. `vars_per_split` defaults to ⌈features/3⌉.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub vars_per_split: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 500,
            vars_per_split: None,
            min_leaf: 5,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<(), ImputerError> {
        if self.trees == 0 || self.min_leaf == 0 {
            return Err(ImputerError::InvalidSpec {
                reason: "forest needs at least one tree and a positive min leaf size".into(),
            });
        }
        Ok(())
    }
}

pub(crate) fn feature_rows(
    ds: &ContrastDataset,
    features: FeatureSet,
) -> Result<Vec<Vec<f64>>, ImputerError> {
    let remnant = match features {
        FeatureSet::Covariates => None,
        FeatureSet::Remnant | FeatureSet::CovariatesAndRemnant => Some(
            ds.remnant_predictions()
                .ok_or(ImputerError::MissingRemnantPredictions)?,
        ),
    };
    Ok(ds
        .units()
        .iter()
        .enumerate()
        .map(|(i, u)| match features {
            FeatureSet::Covariates => u.x.clone(),
            FeatureSet::Remnant => vec![remnant.as_ref().unwrap()[i]],
            FeatureSet::CovariatesAndRemnant => {
                let mut row = u.x.clone();
                row.push(remnant.as_ref().unwrap()[i]);
                row
            }
        })
        .collect())
}

/// One Poisson(1) draw by CDF inversion: exactly one uniform per unit, so
/// stream positions stay aligned with unit positions.
fn poisson1(rng: &mut ChaCha8Rng) -> u8 {
    let u: f64 = rng.random();
    let mut count = 0u8;
    let mut pmf = (-1.0f64).exp();
    let mut cdf = pmf;
    while u > cdf && count < 30 {
        count += 1;
        pmf /= f64::from(count);
        cdf += pmf;
    }
    count
}

enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value }],
        }
    }

    fn predict(&self, row: &[f64]) -> f64 {
        let mut at = self.nodes.len() - 1;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

struct TreeBuilder<'a> {
    rows: &'a [Vec<f64>],
    y: &'a [f64],
    min_leaf: usize,
    m_try: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    feature_pool: Vec<usize>,
}

impl<'a> TreeBuilder<'a> {
    fn node_mean(&self, idx: &[usize]) -> f64 {
        idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64
    }

    fn push(&mut self, node: Node) -> u32 {
        self.nodes.push(node);
        (self.nodes.len() - 1) as u32
    }

    fn grow(&mut self, idx: &mut [usize]) -> u32 {
        let n = idx.len();
        let kf = self.feature_pool.len();
        let splittable = n >= 2 * self.min_leaf
            && kf > 0
            && !all_equal(&idx.iter().map(|&i| self.y[i]).collect::<Vec<_>>());
        if !splittable {
            let value = self.node_mean(idx);
            return self.push(Node::Leaf { value });
        }

        // Sample m_try distinct features, scanned in ascending order so the
        // first strictly-best split wins ties deterministically.
        let m = self.m_try.min(kf);
        for s in 0..m {
            let j = s + self.rng.random_range(0..kf - s);
            self.feature_pool.swap(s, j);
        }
        let mut selected: Vec<usize> = self.feature_pool[..m].to_vec();
        selected.sort_unstable();

        let total_sum: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let total_sq: f64 = idx.iter().map(|&i| self.y[i] * self.y[i]).sum();
        let mut best: Option<(f64, usize, f64)> = None; // (sse, feature, threshold)
        for &f in &selected {
            idx.sort_unstable_by(|&a, &b| {
                self.rows[a][f].total_cmp(&self.rows[b][f]).then(a.cmp(&b))
            });
            let mut sum_left = 0.0;
            let mut sq_left = 0.0;
            for s in 1..n {
                let i = idx[s - 1];
                sum_left += self.y[i];
                sq_left += self.y[i] * self.y[i];
                if s < self.min_leaf || n - s < self.min_leaf {
                    continue;
                }
                let (lo, hi) = (self.rows[idx[s - 1]][f], self.rows[idx[s]][f]);
                if lo == hi {
                    continue;
                }
                let sse_left = sq_left - sum_left * sum_left / s as f64;
                let sum_right = total_sum - sum_left;
                let sse_right = (total_sq - sq_left) - sum_right * sum_right / (n - s) as f64;
                let sse = sse_left + sse_right;
                if best.is_none_or(|(b_sse, _, _)| sse < b_sse) {
                    best = Some((sse, f, (lo + hi) / 2.0));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            let value = self.node_mean(idx);
            return self.push(Node::Leaf { value });
        };
        idx.sort_unstable_by(|&a, &b| {
            self.rows[a][feature]
                .total_cmp(&self.rows[b][feature])
                .then(a.cmp(&b))
        });
        let cut = idx.partition_point(|&i| self.rows[i][feature] <= threshold);
        let (left_idx, right_idx) = idx.split_at_mut(cut);
        let left = self.grow(left_idx);
        let right = self.grow(right_idx);
        self.push(Node::Split {
            feature,
            threshold,
            left,
            right,
        })
    }
}

/// One arm's fitted forest plus the bookkeeping needed for leave-one-out and
/// leave-pair-out aggregation over every unit in the dataset.
pub(crate) struct FittedForest {
    /// preds[t][i]: tree t's prediction at unit i's features.
    preds: Vec<Vec<f64>>,
    /// counts[t][i]: unit i's bootstrap multiplicity in tree t.
    #[cfg_attr(not(test), allow(dead_code))]
    counts: Vec<Vec<u8>>,
    /// oob[i]: bitmask over trees that excluded unit i and are usable.
    oob: Vec<Vec<u64>>,
    words: usize,
}

impl FittedForest {
    pub fn fit(
        rows: &[Vec<f64>],
        cols: &Columns,
        arm: bool,
        params: &ForestParams,
    ) -> FittedForest {
        let n = cols.y.len();
        let kf = rows.first().map_or(0, Vec::len);
        let m_try = params
            .vars_per_split
            .unwrap_or_else(|| kf.div_ceil(3))
            .clamp(usize::from(kf > 0), kf.max(1));
        let b = params.trees;
        let mut preds = Vec::with_capacity(b);
        let mut counts = Vec::with_capacity(b);
        let mut usable = Vec::with_capacity(b);
        for t in 0..b {
            let mut count_rng = streams::rng(params.seed, streams::forest_count_stream(arm, t));
            let tree_counts: Vec<u8> = (0..n).map(|_| poisson1(&mut count_rng)).collect();
            let mut inbag: Vec<usize> = Vec::new();
            for (i, &count) in tree_counts.iter().enumerate() {
                if cols.treated[i] == arm {
                    inbag.extend(std::iter::repeat_n(i, count as usize));
                }
            }
            let tree = if inbag.is_empty() {
                Tree::leaf(0.0)
            } else {
                let mut builder = TreeBuilder {
                    rows,
                    y: &cols.y,
                    min_leaf: params.min_leaf,
                    m_try,
                    rng: streams::rng(params.seed, streams::forest_growth_stream(arm, t)),
                    nodes: Vec::new(),
                    feature_pool: (0..kf).collect(),
                };
                builder.grow(&mut inbag);
                Tree {
                    nodes: builder.nodes,
                }
            };
            usable.push(!inbag.is_empty());
            preds.push((0..n).map(|i| tree.predict(&rows[i])).collect());
            counts.push(tree_counts);
        }
        // A tree trained on an empty in-bag sample predicts nothing useful;
        // drop it from every unit's aggregation mask.
        let words = b.div_ceil(64);
        let mut oob = vec![vec![0u64; words]; n];
        for t in 0..b {
            if !usable[t] {
                continue;
            }
            for (i, mask) in oob.iter_mut().enumerate() {
                if counts[t][i] == 0 {
                    mask[t / 64] |= 1 << (t % 64);
                }
            }
        }
        FittedForest {
            preds,
            counts,
            oob,
            words,
        }
    }

    fn mean_over_mask(&self, mask: &[u64], at: usize) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (w, &bits) in mask.iter().enumerate() {
            let mut bits = bits;
            while bits != 0 {
                let t = w * 64 + bits.trailing_zeros() as usize;
                sum += self.preds[t][at];
                count += 1;
                bits &= bits - 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    /// Aggregated prediction for unit i over trees that excluded i.
    pub fn loo_prediction(&self, i: usize) -> Option<f64> {
        self.mean_over_mask(&self.oob[i], i)
    }

    /// Prediction at unit j over trees that excluded both i and j.
    pub fn pair_prediction(&self, i: usize, j: usize) -> Option<f64> {
        let mask: Vec<u64> = (0..self.words)
            .map(|w| self.oob[i][w] & self.oob[j][w])
            .collect();
        self.mean_over_mask(&mask, j)
    }

    #[cfg(test)]
    fn bootstrap_count(&self, tree: usize, unit: usize) -> u8 {
        self.counts[tree][unit]
    }
}

/// Forest imputation without arm-size gates (total over all assignments).
pub(crate) fn loo_forest_total(
    ds: &ContrastDataset,
    features: FeatureSet,
    params: &ForestParams,
) -> Result<LooImputation, ImputerError> {
    params.check()?;
    let rows = feature_rows(ds, features)?;
    let cols = columns(ds);
    let forest0 = FittedForest::fit(&rows, &cols, false, params);
    let forest1 = FittedForest::fit(&rows, &cols, true, params);
    let n = ds.n();
    let pred = |forest: &FittedForest, arm: bool, i: usize| {
        forest
            .loo_prediction(i)
            .unwrap_or_else(|| fallback_mean(&cols, arm, &[i]))
    };
    let yhat0: Vec<f64> = (0..n).map(|i| pred(&forest0, false, i)).collect();
    let yhat1: Vec<f64> = (0..n).map(|i| pred(&forest1, true, i)).collect();
    Ok(LooImputation::from_predictions(
        ds,
        ImputerId::LooForest,
        yhat0,
        yhat1,
    ))
}

/// Per-arm bagged forest imputation with out-of-bag leave-one-out.
///
/// `features` selects the regressors (covariates, remnant prediction, or
/// both). Each arm must have at least `max(3, min_leaf)` units.
pub fn impute_loo_forest(
    ds: &ContrastDataset,
    features: FeatureSet,
    params: &ForestParams,
) -> Result<LooImputation, ImputerError> {
    params.check()?;
    require_arms(ds, 3.max(params.min_leaf))?;
    loo_forest_total(ds, features, params)
}
