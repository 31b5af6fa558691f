use rob_tensor::{Graph, Matrix};
use serde::{Deserialize, Serialize};

use crate::data::{center_view, Dataset, Image};
use crate::error::{Result, RobError};
use crate::models::{EncoderFamily, ForwardOptions, ModelBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprChoice {
    /// Final class token (transformer) or pooled features (convnet).
    LastGlobal,
    /// Class tokens of the last four blocks, concatenated (transformer only).
    ConcatLast4Global,
    /// Last feature map average-pooled over a 1×2 grid, cells concatenated (convnet only).
    PooledFeaturemapConcat,
}

impl ReprChoice {
    pub fn name(self) -> &'static str {
        match self {
            ReprChoice::LastGlobal => "last_global",
            ReprChoice::ConcatLast4Global => "concat_last4_global",
            ReprChoice::PooledFeaturemapConcat => "pooled_featuremap_concat",
        }
    }

    /// Representations that the bundle's encoder can produce.
    pub fn applicable(bundle: &ModelBundle) -> Vec<ReprChoice> {
        match bundle.encoder.family {
            EncoderFamily::PatchTransformer if bundle.encoder.depth >= 4 => {
                vec![ReprChoice::LastGlobal, ReprChoice::ConcatLast4Global]
            }
            EncoderFamily::PatchTransformer => vec![ReprChoice::LastGlobal],
            EncoderFamily::ConvResidual => {
                vec![ReprChoice::LastGlobal, ReprChoice::PooledFeaturemapConcat]
            }
        }
    }
}

/// Frozen features of a labeled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub repr: ReprChoice,
    /// Transformations applied after extraction, in order.
    pub normalization: Vec<String>,
}

impl FeatureTable {
    pub fn new(features: Matrix, labels: Vec<usize>, repr: ReprChoice) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(RobError::contract("one label per feature row is required"));
        }
        Ok(Self {
            features,
            labels,
            repr,
            normalization: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> FeatureTable {
        FeatureTable {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            repr: self.repr,
            normalization: self.normalization.clone(),
        }
    }
}

/// Deterministic preprocessing for evaluation: central crop, resized to the encoder input.
pub fn eval_view(img: &Image, size: usize, crop_fraction: f64) -> Image {
    center_view(img, size, crop_fraction)
}

fn pooled_cells(map: &Matrix, batch: usize, h: usize, w: usize) -> Matrix {
    let c = map.cols();
    let ranges = if w == 1 {
        [(0, 1), (0, 1)]
    } else {
        [(0, w / 2), (w / 2, w)]
    };
    let mut out = Matrix::zeros(batch, 2 * c);
    for b in 0..batch {
        for (cell, (x0, x1)) in ranges.into_iter().enumerate() {
            let count = ((x1 - x0) * h) as f64;
            for y in 0..h {
                for x in x0..x1 {
                    let row = map.row(b * h * w + y * w + x);
                    for k in 0..c {
                        let v = out.get(b, cell * c + k) + row[k] / count;
                        out.set(b, cell * c + k, v);
                    }
                }
            }
        }
    }
    out
}

/// Encodes every record (central crop) and returns the requested representation.
/// Rows follow dataset order.
pub fn extract_features(
    bundle: &ModelBundle,
    ds: &Dataset,
    repr: ReprChoice,
    crop_fraction: f64,
) -> Result<FeatureTable> {
    let labels = ds.labels().ok_or_else(|| {
        RobError::contract("feature extraction for evaluation needs a labeled dataset")
    })?;
    match (repr, bundle.encoder.family) {
        (ReprChoice::ConcatLast4Global, EncoderFamily::ConvResidual) => {
            return Err(RobError::config(
                "concat_last4_global needs a patch_transformer encoder",
            ))
        }
        (ReprChoice::ConcatLast4Global, _) if bundle.encoder.depth < 4 => {
            return Err(RobError::config(format!(
                "concat_last4_global needs depth >= 4, encoder has {}",
                bundle.encoder.depth
            )))
        }
        (ReprChoice::PooledFeaturemapConcat, EncoderFamily::PatchTransformer) => {
            return Err(RobError::config(
                "pooled_featuremap_concat needs a conv_residual encoder",
            ))
        }
        _ => {}
    }
    let size = bundle.encoder.input_size;
    let views: Vec<Image> = ds
        .records
        .iter()
        .map(|r| eval_view(&r.image, size, crop_fraction))
        .collect();
    let mut blocks = Vec::new();
    for chunk in views.chunks(64) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let mut g = Graph::new();
        let mut opts = ForwardOptions {
            layerwise: repr == ReprChoice::ConcatLast4Global,
            ..Default::default()
        };
        let vars = bundle.forward(&mut g, &refs, &mut opts, false)?;
        let block = match repr {
            ReprChoice::LastGlobal => g.value(vars.encoder.global).clone(),
            ReprChoice::ConcatLast4Global => {
                let layers = &vars.encoder.layerwise;
                let parts: Vec<Matrix> = layers[layers.len() - 4..]
                    .iter()
                    .map(|&v| g.value(v).clone())
                    .collect();
                Matrix::hstack(&parts.iter().collect::<Vec<_>>())?
            }
            ReprChoice::PooledFeaturemapConcat => {
                let (map, h, w) = vars.encoder.feature_map.expect("conv encoder");
                pooled_cells(g.value(map), refs.len(), h, w)
            }
        };
        blocks.push(block);
    }
    let features = Matrix::vstack(&blocks.iter().collect::<Vec<_>>())?;
    FeatureTable::new(features, labels, repr)
}
