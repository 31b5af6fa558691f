//! Generates the synthetic dataset, samples multi-crop views and patch masks,
//! and writes the dataset container.
//!
//! cargo run --release --example synthetic_views

use rob::data::{
    generate_synthetic_dataset, multicrop, read_dataset, sample_patch_mask, write_dataset,
    MultiCropConfig,
};
use rob::rng::{self, tag};

fn main() -> rob::Result<()> {
    let ds = generate_synthetic_dataset(10, 8, 32, 0)?;
    let (train, test) = ds.split_stratified(0.5)?;
    println!(
        "{} images, {} classes: {} train / {} test",
        ds.len(),
        ds.n_classes(),
        train.len(),
        test.len()
    );

    let config = MultiCropConfig::with_sizes(16, 8, 2);
    let mut r = rng::stream(0, &[tag::AUGMENT, 0]);
    let views = multicrop(&ds.records[0], &config, &mut r)?;
    for (i, v) in views.views.iter().enumerate() {
        println!("view {i}: {}x{}", v.height, v.width);
    }

    let mut r = rng::stream(0, &[tag::MASK, 0]);
    let mask = sample_patch_mask(16, 0.3, &mut r)?;
    println!("masked patches {:?} of 16", mask.masked_indices);

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("synthetic.rob");
    write_dataset(&path, &ds, 0)?;
    let (header, back) = read_dataset(&path)?;
    println!(
        "container round trip: {header:?}, identical = {}",
        back == ds
    );
    Ok(())
}
