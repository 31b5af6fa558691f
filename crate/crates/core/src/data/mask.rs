use rand::seq::index;

use crate::error::{Result, RobError};
use crate::rng::Rng;

/// Which patch tokens of one view are masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub n_patches: usize,
    /// `kept[p]` is false for masked patches.
    pub kept: Vec<bool>,
    /// Sorted indices of masked patches.
    pub masked_indices: Vec<usize>,
}

impl PatchMask {
    pub fn none(n_patches: usize) -> Self {
        Self {
            n_patches,
            kept: vec![true; n_patches],
            masked_indices: Vec::new(),
        }
    }

    pub fn from_masked(n_patches: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= n_patches) {
            return Err(RobError::contract(format!(
                "masked index out of range for {n_patches} patches"
            )));
        }
        let mut kept = vec![true; n_patches];
        for &m in &masked {
            kept[m] = false;
        }
        Ok(Self {
            n_patches,
            kept,
            masked_indices: masked,
        })
    }

    pub fn n_masked(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.n_patches).filter(|&p| self.kept[p]).collect()
    }
}

/// Masks exactly `floor(ratio · n_patches)` patches chosen uniformly without
/// replacement.
pub fn sample_patch_mask(n_patches: usize, ratio: f64, rng: &mut Rng) -> Result<PatchMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(RobError::config(format!(
            "mask ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let count = (ratio * n_patches as f64).floor() as usize;
    let masked = index::sample(rng, n_patches, count).into_vec();
    PatchMask::from_masked(n_patches, masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn five_percent_of_196_is_nine() {
        // enumeration oracle: largest m with m <= 0.05 * 196
        let oracle = (0..=196usize)
            .filter(|&m| (m as f64) <= 0.05 * 196.0)
            .max()
            .unwrap();
        assert_eq!(oracle, 9);
        let m = sample_patch_mask(196, 0.05, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(m.n_masked(), oracle);
    }

    #[test]
    fn zero_ratio_and_half_ratio() {
        let m = sample_patch_mask(64, 0.0, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(m.n_masked(), 0);
        assert!(m.kept.iter().all(|&k| k));
        let m = sample_patch_mask(64, 0.5, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(m.n_masked(), 32);
        let mut uniq = m.masked_indices.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 32);
    }

    #[test]
    fn ratio_of_one_is_rejected() {
        assert!(sample_patch_mask(16, 1.0, &mut rng::stream(0, &[])).is_err());
        assert!(sample_patch_mask(16, -0.1, &mut rng::stream(0, &[])).is_err());
    }

    proptest! {
        #[test]
        fn cardinality_is_floor_of_ratio(n in 1usize..400, ratio in 0.0f64..0.999, seed in any::<u64>()) {
            let a = sample_patch_mask(n, ratio, &mut rng::stream(seed, &[])).unwrap();
            prop_assert_eq!(a.n_masked(), (ratio * n as f64).floor() as usize);
            prop_assert_eq!(a.kept.iter().filter(|k| !**k).count(), a.n_masked());
            prop_assert!(a.masked_indices.windows(2).all(|w| w[0] < w[1]));
            let b = sample_patch_mask(n, ratio, &mut rng::stream(seed, &[])).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
