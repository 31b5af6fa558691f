//! Dataset ingestion, synthetic data, multi-crop views and patch masks.

mod augment;
mod container;
mod folder;
mod mask;
mod multicrop;
mod synthetic;

pub use augment::{center_view, resize_bilinear, AugKind, AugOp, ViewProb};
pub use container::{
    read_dataset, read_feature_table, write_dataset, write_feature_table, DatasetHeader,
};
pub use folder::load_image_folder;
pub use mask::{sample_patch_mask, PatchMask};
pub use multicrop::{multicrop, MultiCropConfig, ViewSet};
pub use synthetic::generate_synthetic_dataset;

use crate::error::{Result, RobError};

/// Channel count of every image handled by the crate.
pub const CHANNELS: usize = 3;

/// An RGB image stored height × width × channel, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(RobError::Format {
                what: "image",
                reason: format!("{} values for a {height}x{width}x3 image", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub label: Option<usize>,
    pub image: Image,
}

/// An ordered collection of records plus the class names behind label ids.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Deterministic stratified split: the first `train_fraction` of each
    /// class (in dataset order) goes to train, the rest to test.
    pub fn split_stratified(&self, train_fraction: f64) -> Result<(Dataset, Dataset)> {
        let labels = self
            .labels()
            .ok_or_else(|| RobError::config("a stratified split needs a labeled dataset"))?;
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); self.n_classes().max(1)];
        for (i, &l) in labels.iter().enumerate() {
            if l >= per_class.len() {
                per_class.resize(l + 1, Vec::new());
            }
            per_class[l].push(i);
        }
        let (mut tr, mut te) = (Vec::new(), Vec::new());
        for idx in per_class {
            let cut = ((idx.len() as f64) * train_fraction).round() as usize;
            tr.extend_from_slice(&idx[..cut.min(idx.len())]);
            te.extend_from_slice(&idx[cut.min(idx.len())..]);
        }
        tr.sort_unstable();
        te.sort_unstable();
        Ok((self.subset(&tr), self.subset(&te)))
    }

    /// Smallest image side across the dataset.
    pub fn min_side(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.image.height.min(r.image.width))
            .min()
            .unwrap_or(0)
    }
}
