use rand::seq::index;
use rob_tensor::Matrix;
use serde::{Deserialize, Serialize};

use super::features::FeatureTable;
use super::knn::accuracy;
use super::logreg::fit_logreg;
use crate::error::{Result, RobError};
use crate::rng::{self, tag};

pub const NORMALIZATION_ORDER: [&str; 2] = ["l2_normalize", "subtract_train_mean"];

/// `n` values from `hi` down to `lo`, evenly spaced in log10; endpoints exact.
pub fn lambda_grid(n: usize, hi: f64, lo: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => {
            let (a, b) = (hi.log10(), lo.log10());
            let mut g: Vec<f64> = (0..n)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
                .collect();
            g[0] = hi;
            g[n - 1] = lo;
            g
        }
    }
}

pub fn default_lambda_grid() -> Vec<f64> {
    lambda_grid(13, 1e4, 1e-2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowShotSpec {
    pub images_per_class: usize,
    pub n_splits: usize,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl LowShotSpec {
    /// Split counts follow the protocol: 5 splits for 1 image per class,
    /// 3 for 5 images per class, 1 otherwise.
    pub fn standard(images_per_class: usize, seed: u64) -> Self {
        let n_splits = match images_per_class {
            1 => 5,
            5 => 3,
            _ => 1,
        };
        Self {
            images_per_class,
            n_splits,
            lambda_grid: default_lambda_grid(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowShotResult {
    pub images_per_class: usize,
    pub mean: f64,
    pub std: f64,
    pub per_split: Vec<f64>,
    pub best_lambda: Vec<f64>,
    pub normalization: Vec<String>,
}

fn l2_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// L2-normalizes both tables, then subtracts the train mean from both.
pub fn normalize_pair(train: &FeatureTable, test: &FeatureTable) -> (FeatureTable, FeatureTable) {
    let tr = l2_rows(&train.features);
    let te = l2_rows(&test.features);
    let d = tr.cols();
    let mut mean = vec![0.0; d];
    for r in 0..tr.rows() {
        for (m, v) in mean.iter_mut().zip(tr.row(r)) {
            *m += v / tr.rows() as f64;
        }
    }
    let center = |mut m: Matrix| {
        for r in 0..m.rows() {
            for (v, mu) in m.row_mut(r).iter_mut().zip(&mean) {
                *v -= mu;
            }
        }
        m
    };
    let steps: Vec<String> = NORMALIZATION_ORDER.iter().map(|s| s.to_string()).collect();
    let mk = |t: &FeatureTable, f: Matrix| FeatureTable {
        features: f,
        labels: t.labels.clone(),
        repr: t.repr,
        normalization: steps.clone(),
    };
    (mk(train, center(tr)), mk(test, center(te)))
}

/// Per-class sample of `k` train indices without replacement.
pub fn sample_split(
    labels: &[usize],
    n_classes: usize,
    k: usize,
    seed: u64,
    split: u64,
) -> Result<Vec<usize>> {
    let mut r = rng::stream(seed, &[tag::SPLIT, split]);
    let mut out = Vec::with_capacity(n_classes * k);
    for c in 0..n_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < k {
            return Err(RobError::contract(format!(
                "class {c} has {} examples, low-shot needs {k}",
                members.len()
            )));
        }
        let mut picked: Vec<usize> = index::sample(&mut r, members.len(), k)
            .into_iter()
            .map(|j| members[j])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

/// Logistic regression on `images_per_class` labeled examples per class,
/// best lambda per split, averaged over splits.
pub fn low_shot_eval(
    train: &FeatureTable,
    test: &FeatureTable,
    spec: &LowShotSpec,
) -> Result<LowShotResult> {
    if spec.n_splits == 0 || spec.images_per_class == 0 || spec.lambda_grid.is_empty() {
        return Err(RobError::config(
            "low-shot needs splits, images per class and lambdas",
        ));
    }
    let n_classes = train.n_classes().max(test.n_classes());
    let mut per_split = Vec::with_capacity(spec.n_splits);
    let mut best_lambda = Vec::with_capacity(spec.n_splits);
    for split in 0..spec.n_splits {
        let idx = sample_split(
            &train.labels,
            n_classes,
            spec.images_per_class,
            spec.seed,
            split as u64,
        )?;
        let (tr, te) = normalize_pair(&train.subset(&idx), test);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for &lambda in &spec.lambda_grid {
            let model = fit_logreg(&tr.features, &tr.labels, n_classes, lambda)?;
            if te.features.cols() != model.weights.rows() {
                return Err(RobError::contract(
                    "train and test features differ in width",
                ));
            }
            let acc = accuracy(&model.predict(&te.features), &te.labels);
            if acc > best.0 {
                best = (acc, lambda);
            }
        }
        per_split.push(best.0);
        best_lambda.push(best.1);
    }
    let mean = per_split.iter().sum::<f64>() / per_split.len() as f64;
    let std =
        (per_split.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / per_split.len() as f64).sqrt();
    Ok(LowShotResult {
        images_per_class: spec.images_per_class,
        mean,
        std,
        per_split,
        best_lambda,
        normalization: NORMALIZATION_ORDER.iter().map(|s| s.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ReprChoice;

    #[test]
    fn grid_endpoints_and_spacing() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 13);
        assert_eq!((g[0], g[12]), (1e4, 1e-2));
        for w in g.windows(2) {
            assert!(((w[0] / w[1]).log10() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn split_counts() {
        assert_eq!(LowShotSpec::standard(1, 0).n_splits, 5);
        assert_eq!(LowShotSpec::standard(5, 0).n_splits, 3);
        assert_eq!(LowShotSpec::standard(13, 0).n_splits, 1);
    }

    #[test]
    fn train_mean_vanishes_and_short_classes_are_named() {
        let f = Matrix::from_rows(&[vec![3.0, 1.0], vec![0.5, 2.0], vec![-1.0, 4.0]]).unwrap();
        let t = FeatureTable::new(f, vec![0, 1, 1], ReprChoice::LastGlobal).unwrap();
        let (tr, _) = normalize_pair(&t, &t);
        for c in 0..2 {
            let m: f64 = (0..3).map(|r| tr.features.get(r, c)).sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-12);
        }
        let err = sample_split(&t.labels, 2, 2, 0, 0).unwrap_err().to_string();
        assert!(err.contains("class 0"), "{err}");
    }
}
