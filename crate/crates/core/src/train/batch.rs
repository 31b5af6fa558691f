use rand::seq::SliceRandom;

use crate::data::{multicrop, Dataset, MultiCropConfig, ViewSet};
use crate::error::{Result, RobError};
use crate::rng::{self, tag};

/// Dataset indices of the `step`-th batch. Each epoch visits the dataset in a
/// seeded order; batches run straight across epoch boundaries.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut pos = step * batch_size as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for _ in 0..batch_size {
        let epoch = pos / n as u64;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(seed, &[tag::EPOCH_ORDER, epoch]));
            cached = Some((epoch, order));
        }
        out.push(cached.as_ref().expect("set above").1[(pos % n as u64) as usize]);
        pos += 1;
    }
    out
}

/// Multi-crop views of the given records; each image draws from its own
/// stream keyed by (step, slot), so the batch is a pure function of its inputs.
pub fn make_views(
    ds: &Dataset,
    indices: &[usize],
    config: &MultiCropConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<ViewSet>> {
    indices
        .iter()
        .enumerate()
        .map(|(slot, &i)| {
            let record = ds
                .records
                .get(i)
                .ok_or_else(|| RobError::contract(format!("record index {i} out of range")))?;
            multicrop(
                record,
                config,
                &mut rng::stream(seed, &[tag::AUGMENT, step, slot as u64]),
            )
        })
        .collect()
}

pub fn step_batch(
    ds: &Dataset,
    config: &MultiCropConfig,
    seed: u64,
    step: u64,
    batch_size: usize,
) -> Result<Vec<ViewSet>> {
    if ds.is_empty() {
        return Err(RobError::contract("training dataset is empty"));
    }
    let idx = batch_indices(seed, step, batch_size, ds.len());
    make_views(ds, &idx, config, seed, step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_epoch_is_a_permutation() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, s, 4, n)).collect();
        // 20 draws = 2 full epochs
        let (a, b) = seen.split_at_mut(n);
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, (0..n).collect::<Vec<_>>().as_slice());
        assert_eq!(b, (0..n).collect::<Vec<_>>().as_slice());
        assert_eq!(batch_indices(3, 2, 4, n), batch_indices(3, 2, 4, n));
        assert_ne!(batch_indices(3, 0, 10, n), batch_indices(4, 0, 10, n));
    }
}
