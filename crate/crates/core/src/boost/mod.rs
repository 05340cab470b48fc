//! Gradient-boosted regression trees with squared-error loss and exact
//! greedy split search.
//!
//! Each round fits a tree to the first and second derivatives of the loss
//! (`g = prediction - target`, `h = 1`). A split is scored by
//!
//! ```text
//! gain = 1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - (G_L+G_R)^2/(H_L+H_R+lambda)] - gamma
//! ```
//!
//! and a leaf holding gradient sum `G` and hessian sum `H` outputs
//! `-eta * G / (H + lambda)`. Missing feature values (NaN) follow a per-split
//! default direction chosen to maximise the gain.

mod grow;
mod tree;

pub use grow::SplitCandidate;
pub use tree::{JsonNode, Node, Tree};

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use grow::{grow_tree, SortedColumns};

/// Row-major feature matrix (NaN = missing) with a regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    n_features: usize,
    target: Vec<f64>,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        if rows.len() != target.len() {
            return Err(Error::UndefinedInput(format!(
                "{} rows but {} targets",
                rows.len(),
                target.len()
            )));
        }
        let n_features = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * n_features);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n_features {
                return Err(Error::UndefinedInput(format!("row {i} has {} features, expected {n_features}", row.len())));
            }
            if row.iter().any(|v| v.is_infinite()) {
                return Err(Error::UndefinedInput(format!("row {i} has an infinite feature")));
            }
            values.extend(row);
        }
        if target.iter().any(|t| !t.is_finite()) {
            return Err(Error::UndefinedInput("target must be finite".into()));
        }
        Ok(Dataset {
            values,
            n_features,
            target,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.n_features + feature]
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_features.max(1)).take(self.n_rows())
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(idx.len() * self.n_features);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            values,
            n_features: self.n_features,
            target: idx.iter().map(|&i| self.target[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub min_split_gain: f64,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            n_trees: 200,
            max_depth: 4,
            learning_rate: 0.1,
            l2_reg: 1.0,
            min_split_gain: 0.0,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl BoostParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate <= 1.0
            && self.l2_reg >= 0.0
            && self.min_split_gain >= 0.0
            && self.subsample > 0.0
            && self.subsample <= 1.0;
        if !ok {
            return Err(Error::config(format!("invalid boosting parameters {self:?}")));
        }
        Ok(())
    }
}

/// Gain of splitting a node into (left, right) children.
pub fn split_gain(g_l: f64, h_l: f64, g_r: f64, h_r: f64, lambda: f64, gamma: f64) -> f64 {
    let g = g_l + g_r;
    let h = h_l + h_r;
    0.5 * (g_l * g_l / (h_l + lambda) + g_r * g_r / (h_r + lambda) - g * g / (h + lambda)) - gamma
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostedModel {
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub n_features: usize,
    pub params: BoostParams,
}

impl BoostedModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    pub fn predict_all(&self, data: &Dataset) -> Vec<f64> {
        data.rows().map(|r| self.predict(r)).collect()
    }

    pub fn write_json<W: Write>(&self, out: W, notes: &[(&str, &str)]) -> Result<()> {
        let doc = ModelDoc {
            format: MODEL_FORMAT.to_owned(),
            base_score: self.base_score,
            n_features: self.n_features,
            params: self.params,
            notes: notes.iter().map(|(k, v)| ((*k).to_owned(), (*v).to_owned())).collect(),
            trees: self.trees.iter().map(Tree::to_json).collect(),
        };
        serde_json::to_writer_pretty(out, &doc)?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_reader(reader)?;
        if doc.format != MODEL_FORMAT {
            return Err(Error::UndefinedInput(format!("unknown model format `{}`", doc.format)));
        }
        let trees = doc
            .trees
            .iter()
            .map(|t| Tree::from_json(t, doc.n_features))
            .collect::<Result<_>>()?;
        Ok(BoostedModel {
            base_score: doc.base_score,
            trees,
            n_features: doc.n_features,
            params: doc.params,
        })
    }
}

const MODEL_FORMAT: &str = "busvar-gbt/1";

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    base_score: f64,
    n_features: usize,
    params: BoostParams,
    #[serde(default)]
    notes: std::collections::BTreeMap<String, String>,
    trees: Vec<JsonNode>,
}

/// Mean squared error after each round; entry 0 is the base-score-only loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub mse: Vec<f64>,
}

impl TrainingTrace {
    pub fn final_rmse(&self) -> f64 {
        self.mse.last().copied().unwrap_or(f64::NAN).sqrt()
    }
}

pub fn fit(data: &Dataset, params: &BoostParams) -> Result<BoostedModel> {
    fit_traced(data, params).map(|(m, _)| m)
}

/// Fits a model and records the training loss after every round.
///
/// Boosting stops early once a round cannot split the root; a dataset with
/// constant features or targets therefore yields a base-score-only model.
pub fn fit_traced(data: &Dataset, params: &BoostParams) -> Result<(BoostedModel, TrainingTrace)> {
    params.validate()?;
    let n = data.n_rows();
    if n == 0 {
        return Err(Error::UndefinedInput("cannot fit an empty dataset".into()));
    }
    let base_score = data.target().iter().sum::<f64>() / n as f64;
    let mut pred = vec![base_score; n];
    let mse = |pred: &[f64]| {
        pred.iter()
            .zip(data.target())
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / n as f64
    };
    let mut trace = TrainingTrace { mse: vec![mse(&pred)] };

    let cols = SortedColumns::new(data);
    let hess = vec![1.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut in_sample = vec![true; n];

    for _ in 0..params.n_trees {
        let grad: Vec<f64> = pred.iter().zip(data.target()).map(|(p, y)| p - y).collect();
        if params.subsample < 1.0 {
            for s in in_sample.iter_mut() {
                *s = rng.gen::<f64>() < params.subsample;
            }
            if !in_sample.iter().any(|&s| s) {
                continue;
            }
        }
        let tree = grow_tree(data, &cols, &grad, &hess, &in_sample, params);
        if tree.is_leaf_only() {
            break;
        }
        for (p, row) in pred.iter_mut().zip(data.rows()) {
            *p += tree.predict(row);
        }
        trees.push(tree);
        trace.mse.push(mse(&pred));
    }

    Ok((
        BoostedModel {
            base_score,
            trees,
            n_features: data.n_features(),
            params: *params,
        },
        trace,
    ))
}

/// Out-of-fold RMSE for each of `k` shuffled folds.
pub fn cross_validate(data: &Dataset, params: &BoostParams, k: usize, seed: u64) -> Result<Vec<f64>> {
    let n = data.n_rows();
    if k < 2 || k > n {
        return Err(Error::config(format!("cannot run {k}-fold validation on {n} rows")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..k)
        .map(|fold| {
            let test: Vec<usize> = idx.iter().skip(fold).step_by(k).copied().collect();
            let train: Vec<usize> = idx
                .iter()
                .enumerate()
                .filter(|(pos, _)| pos % k != fold)
                .map(|(_, &i)| i)
                .collect();
            let model = fit(&data.subset(&train), params)?;
            let held = data.subset(&test);
            let sse: f64 = held
                .rows()
                .zip(held.target())
                .map(|(r, y)| (model.predict(r) - y).powi(2))
                .sum();
            Ok((sse / test.len() as f64).sqrt())
        })
        .collect()
}
