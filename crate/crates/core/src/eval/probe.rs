use rand::seq::SliceRandom;
use rand::Rng as _;
use rob_tensor::{column_stats, CeTerm, Graph, Matrix};
use serde::{Deserialize, Serialize};

use super::features::{FeatureTable, ReprChoice};
use super::knn::accuracy;
use crate::error::{Result, RobError};
use crate::models::{Init, ParamStore};
use crate::rng::{self, tag};
use crate::train::{optimizer_step, OptimSpec, OptimState};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeHead {
    Linear,
    /// Batch normalization (no affine warm start) before the linear layer.
    BnLinear,
    /// Batch normalization, then affine, hard-swish, 20% dropout, affine.
    TwoLayerHardswish,
}

impl ProbeHead {
    pub const ALL: [ProbeHead; 3] = [
        ProbeHead::Linear,
        ProbeHead::BnLinear,
        ProbeHead::TwoLayerHardswish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeHead::Linear => "linear",
            ProbeHead::BnLinear => "bn_linear",
            ProbeHead::TwoLayerHardswish => "two_layer_hardswish",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 1e-2,
            weight_decay: 1e-4,
            hidden_dim: 128,
            dropout: 0.2,
            seed: 0,
        }
    }
}

struct Probe {
    head: ProbeHead,
    params: ParamStore,
    bn_stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn forward(
    p: &Probe,
    g: &mut Graph,
    x: &Matrix,
    train: bool,
    dropout: Option<(f64, &mut rng::Rng)>,
) -> rob_tensor::Var {
    let leaf = |g: &mut Graph, n: &str| p.params.leaf(g, n, train);
    let mut h = if p.head == ProbeHead::Linear {
        g.constant(x.clone())
    } else if train {
        let xv = g.constant(x.clone());
        let gamma = leaf(g, "bn.weight");
        let beta = leaf(g, "bn.bias");
        g.batch_norm(xv, gamma, beta, BN_EPS)
    } else {
        // population statistics of the training features
        let (mean, var) = p.bn_stats.as_ref().expect("set after training");
        let gamma = p.params.get("bn.weight").expect("bn params");
        let beta = p.params.get("bn.bias").expect("bn params");
        let mut y = x.clone();
        for r in 0..y.rows() {
            for (c, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[c]) / (var[c] + BN_EPS).sqrt() * gamma.get(0, c) + beta.get(0, c);
            }
        }
        g.constant(y)
    };
    let layers: &[&str] = if p.head == ProbeHead::TwoLayerHardswish {
        &["fc1", "fc2"]
    } else {
        &["fc"]
    };
    let mut dropout = dropout;
    for (i, name) in layers.iter().enumerate() {
        let w = leaf(g, &format!("{name}.weight"));
        let b = leaf(g, &format!("{name}.bias"));
        let y = g.matmul(h, w);
        h = g.add_row(y, b);
        if i + 1 < layers.len() {
            h = g.hardswish(h);
            if let Some((rate, r)) = dropout.as_mut() {
                let (rows, cols) = g.value(h).shape();
                let keep = 1.0 - *rate;
                let mask: Vec<f64> = (0..rows * cols)
                    .map(|_| {
                        if r.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                h = g.mul_const(h, Matrix::from_vec(rows, cols, mask).expect("sized"));
            }
        }
    }
    h
}

/// Trains a probe head on frozen train features and returns test top-1.
pub fn linear_probe(
    train: &FeatureTable,
    test: &FeatureTable,
    head: ProbeHead,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let n_classes = train.n_classes().max(test.n_classes());
    let distinct = {
        let mut l = train.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(RobError::contract(
            "linear probe needs at least two classes in the train set",
        ));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(RobError::config(
            "probe batch_size and epochs must be positive",
        ));
    }
    let d = train.features.cols();
    let seed = cfg.seed;
    let mut params = ParamStore::new();
    if head != ProbeHead::Linear {
        params.init(seed, "bn.weight", 1, d, Init::Ones);
        params.init(seed, "bn.bias", 1, d, Init::Zeros);
    }
    match head {
        ProbeHead::TwoLayerHardswish => {
            params.init(
                seed,
                "fc1.weight",
                d,
                cfg.hidden_dim,
                Init::TruncNormal(0.02),
            );
            params.init(seed, "fc1.bias", 1, cfg.hidden_dim, Init::Zeros);
            params.init(
                seed,
                "fc2.weight",
                cfg.hidden_dim,
                n_classes,
                Init::TruncNormal(0.02),
            );
            params.init(seed, "fc2.bias", 1, n_classes, Init::Zeros);
        }
        _ => {
            params.init(seed, "fc.weight", d, n_classes, Init::TruncNormal(0.01));
            params.init(seed, "fc.bias", 1, n_classes, Init::Zeros);
        }
    }
    let mut probe = Probe {
        head,
        params,
        bn_stats: None,
    };
    let n = train.len();
    let bs = cfg.batch_size.min(n);
    let per_epoch = n.div_ceil(bs);
    let steps = (per_epoch * cfg.epochs) as u64;
    let spec = OptimSpec::adamw(cfg.lr, cfg.weight_decay, cfg.weight_decay, bs, steps, 0);
    let mut state = OptimState::default();
    let mut drop_rng = rng::stream(seed, &[tag::PROBE, 1]);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[tag::PROBE, 0, epoch as u64]));
        for chunk in order.chunks(bs) {
            // batch norm needs two rows
            if chunk.len() < 2 && head != ProbeHead::Linear {
                step += 1;
                continue;
            }
            let x = train.features.select_rows(chunk);
            let mut targets = Matrix::zeros(chunk.len(), n_classes);
            for (r, &i) in chunk.iter().enumerate() {
                targets.set(r, train.labels[i], 1.0);
            }
            let mut g = Graph::new();
            let dropout = (head == ProbeHead::TwoLayerHardswish && cfg.dropout > 0.0)
                .then_some((cfg.dropout, &mut drop_rng));
            let logits = forward(&probe, &mut g, &x, true, dropout);
            let logp = g.log_softmax_clamped(logits, f64::NEG_INFINITY);
            let w = 1.0 / chunk.len() as f64;
            let terms = (0..chunk.len())
                .map(|r| CeTerm {
                    target_row: r,
                    pred_row: r,
                    weight: w,
                })
                .collect();
            let loss = g.weighted_cross_entropy(logp, targets, terms);
            let grads = g.backward(loss);
            let grads = g.param_grads(&grads);
            let lr = spec.lr.value(step)?;
            optimizer_step(
                &spec,
                &mut state,
                &mut probe.params,
                &grads,
                lr,
                cfg.weight_decay,
            )?;
            step += 1;
        }
    }
    if head != ProbeHead::Linear {
        probe.bn_stats = Some(column_stats(&train.features));
    }
    let mut g = Graph::new();
    let logits = forward(&probe, &mut g, &test.features, false, None);
    let s = g.value(logits);
    let pred: Vec<usize> = (0..s.rows())
        .map(|r| {
            let row = s.row(r);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect();
    Ok(accuracy(&pred, &test.labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub repr: ReprChoice,
    pub head: ProbeHead,
    pub accuracy: f64,
}

/// Every evaluated (representation, head) cell and the best of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSweep {
    pub cells: Vec<ProbeCell>,
    pub best: ProbeCell,
}

/// Runs every head on every (train, test) table pair; reports all cells and the max.
pub fn probe_sweep(
    tables: &[(FeatureTable, FeatureTable)],
    heads: &[ProbeHead],
    cfg: &ProbeConfig,
) -> Result<ProbeSweep> {
    let mut cells = Vec::new();
    for (train, test) in tables {
        for &head in heads {
            cells.push(ProbeCell {
                repr: train.repr,
                head,
                accuracy: linear_probe(train, test, head, cfg)?,
            });
        }
    }
    let best = cells
        .iter()
        .fold(None::<&ProbeCell>, |b, c| match b {
            Some(b) if b.accuracy >= c.accuracy => Some(b),
            _ => Some(c),
        })
        .ok_or_else(|| RobError::config("probe sweep has no cells"))?
        .clone();
    Ok(ProbeSweep { cells, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_is_rejected() {
        let t =
            FeatureTable::new(Matrix::zeros(3, 2), vec![0, 0, 0], ReprChoice::LastGlobal).unwrap();
        assert!(linear_probe(&t, &t, ProbeHead::Linear, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn sweep_reports_the_max_of_all_cells() {
        let f = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.1, 0.8],
        ])
        .unwrap();
        let t = FeatureTable::new(f, vec![0, 0, 1, 1], ReprChoice::LastGlobal).unwrap();
        let cfg = ProbeConfig {
            epochs: 30,
            batch_size: 4,
            ..Default::default()
        };
        let s = probe_sweep(&[(t.clone(), t)], &ProbeHead::ALL, &cfg).unwrap();
        assert_eq!(s.cells.len(), 3);
        let max = s.cells.iter().map(|c| c.accuracy).fold(0.0, f64::max);
        assert_eq!(s.best.accuracy, max);
    }
}
