use serde::{Deserialize, Serialize};

use super::augment::random_crop_window;
use super::{resize_bilinear, AugOp, Image, ImageRecord, PatchMask};
use crate::error::{Result, RobError};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiCropConfig {
    pub n_large: usize,
    pub n_small: usize,
    pub large_size: usize,
    pub small_size: usize,
    pub large_scale_range: (f64, f64),
    pub small_scale_range: (f64, f64),
    pub photometric_ops: Vec<AugOp>,
}

impl Default for MultiCropConfig {
    fn default() -> Self {
        Self::with_sizes(64, 32, 8)
    }
}

impl MultiCropConfig {
    pub fn with_sizes(large_size: usize, small_size: usize, n_small: usize) -> Self {
        Self {
            n_large: 2,
            n_small,
            large_size,
            small_size,
            large_scale_range: (0.4, 1.0),
            small_scale_range: (0.05, 0.4),
            photometric_ops: AugOp::default_pipeline(large_size),
        }
    }

    /// Crops that cover the whole image with no photometric change: every view
    /// is the resized source image.
    pub fn identity(large_size: usize, small_size: usize, n_small: usize) -> Self {
        Self {
            large_scale_range: (1.0, 1.0),
            small_scale_range: (1.0, 1.0),
            photometric_ops: Vec::new(),
            ..Self::with_sizes(large_size, small_size, n_small)
        }
    }

    pub fn n_views(&self) -> usize {
        self.n_large + self.n_small
    }

    pub fn view_size(&self, view: usize) -> usize {
        if view < self.n_large {
            self.large_size
        } else {
            self.small_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_large != 2 {
            return Err(RobError::config(format!(
                "n_large must be 2, got {}",
                self.n_large
            )));
        }
        if self.small_size == 0 || self.large_size <= self.small_size {
            return Err(RobError::config(format!(
                "large_size ({}) must exceed small_size ({}) > 0",
                self.large_size, self.small_size
            )));
        }
        for (name, (lo, hi)) in [
            ("large_scale_range", self.large_scale_range),
            ("small_scale_range", self.small_scale_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(RobError::config(format!(
                    "{name} must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// The views of one image: indices 0 and 1 are large crops, the rest small.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub views: Vec<Image>,
    pub source_id: String,
    /// Empty, or one optional mask per view.
    pub masks: Vec<Option<PatchMask>>,
}

impl ViewSet {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn mask(&self, view: usize) -> Option<&PatchMask> {
        self.masks.get(view).and_then(Option::as_ref)
    }
}

/// Builds the multi-crop views of `record`. Each view gets its own crop
/// window and its own photometric draws; the result is a pure function of
/// the record, config and rng state.
pub fn multicrop(record: &ImageRecord, config: &MultiCropConfig, rng: &mut Rng) -> Result<ViewSet> {
    config.validate()?;
    let img = &record.image;
    let side = img.height.min(img.width);
    if config.large_size > side {
        return Err(RobError::contract(format!(
            "crop size {} exceeds image {} ({}x{})",
            config.large_size, record.id, img.height, img.width
        )));
    }
    let mut views = Vec::with_capacity(config.n_views());
    for v in 0..config.n_views() {
        let (size, scale) = if v < config.n_large {
            (config.large_size, config.large_scale_range)
        } else {
            (config.small_size, config.small_scale_range)
        };
        let (y0, x0, h, w) = random_crop_window(img.height, img.width, scale, rng);
        let mut view = resize_bilinear(img, y0, x0, h, w, size, size);
        for op in &config.photometric_ops {
            op.apply(&mut view, v, rng);
        }
        views.push(view);
    }
    Ok(ViewSet {
        views,
        source_id: record.id.clone(),
        masks: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::rng;
    use proptest::prelude::*;

    fn record() -> ImageRecord {
        generate_synthetic_dataset(2, 1, 32, 5)
            .unwrap()
            .records
            .remove(0)
    }

    #[test]
    fn two_large_and_eight_small() {
        let cfg = MultiCropConfig::with_sizes(24, 12, 8);
        let vs = multicrop(&record(), &cfg, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(vs.n_views(), 10);
        for (i, v) in vs.views.iter().enumerate() {
            let s = if i < 2 { 24 } else { 12 };
            assert_eq!((v.height, v.width), (s, s));
        }
    }

    #[test]
    fn no_small_views() {
        let cfg = MultiCropConfig::with_sizes(24, 12, 0);
        let vs = multicrop(&record(), &cfg, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(vs.n_views(), 2);
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let cfg = MultiCropConfig::with_sizes(48, 12, 2);
        assert!(multicrop(&record(), &cfg, &mut rng::stream(1, &[])).is_err());
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut cfg = MultiCropConfig::default();
        cfg.n_large = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = MultiCropConfig::default();
        cfg.small_scale_range = (0.0, 0.4);
        assert!(cfg.validate().is_err());
        let cfg = MultiCropConfig::with_sizes(16, 16, 2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identity_views_equal_the_resized_source() {
        let rec = record();
        let cfg = MultiCropConfig::identity(32, 16, 1);
        let vs = multicrop(&rec, &cfg, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(vs.views[0], rec.image);
        assert_eq!(vs.views[1], rec.image);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn view_count_sizes_and_determinism(n_small in 0usize..6, seed in any::<u64>()) {
            let cfg = MultiCropConfig::with_sizes(16, 8, n_small);
            let rec = record();
            let a = multicrop(&rec, &cfg, &mut rng::stream(seed, &[])).unwrap();
            prop_assert_eq!(a.n_views(), 2 + n_small);
            for (i, v) in a.views.iter().enumerate() {
                prop_assert_eq!(v.height, cfg.view_size(i));
            }
            let b = multicrop(&rec, &cfg, &mut rng::stream(seed, &[])).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
