use rob_tensor::Matrix;
use serde::{Deserialize, Serialize};

use super::features::FeatureTable;
use crate::error::{Result, RobError};

pub const DEFAULT_KNN_K: [usize; 2] = [10, 20];
pub const DEFAULT_KNN_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KnnWeighting {
    /// Each neighbour votes `exp(similarity / temperature)`.
    Exponential { temperature: f64 },
    /// One vote per neighbour.
    Majority,
}

impl Default for KnnWeighting {
    fn default() -> Self {
        KnnWeighting::Exponential {
            temperature: DEFAULT_KNN_TEMPERATURE,
        }
    }
}

fn normalized(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Predicted class of each query row by cosine-similarity kNN. Equal
/// similarities keep the lower train index; equal votes pick the lower class.
pub fn knn_predict(
    train: &FeatureTable,
    queries: &Matrix,
    k: usize,
    weighting: KnnWeighting,
) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(RobError::contract("kNN needs a non-empty train set"));
    }
    if k == 0 || k > train.len() {
        return Err(RobError::config(format!(
            "k = {k} must lie in 1..={}",
            train.len()
        )));
    }
    if queries.cols() != train.features.cols() {
        return Err(RobError::contract(
            "train and query features differ in width",
        ));
    }
    let tr = normalized(&train.features);
    let q = normalized(queries);
    let sims = q.matmul_t(&tr, false, true)?;
    let n_classes = train.n_classes();
    let mut out = Vec::with_capacity(q.rows());
    for r in 0..q.rows() {
        let row = sims.row(r);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut votes = vec![0.0; n_classes];
        for &i in &idx[..k] {
            votes[train.labels[i]] += match weighting {
                KnnWeighting::Exponential { temperature } => (row[i] / temperature).exp(),
                KnnWeighting::Majority => 1.0,
            };
        }
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

pub fn knn_eval(
    train: &FeatureTable,
    test: &FeatureTable,
    k: usize,
    weighting: KnnWeighting,
) -> Result<f64> {
    let pred = knn_predict(train, &test.features, k, weighting)?;
    Ok(accuracy(&pred, &test.labels))
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}
