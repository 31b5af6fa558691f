//! Runs every evaluation protocol (kNN, probe sweep, low-shot) on a bundle.
//!
//! cargo run --release --example evaluate

use rob::data::generate_synthetic_dataset;
use rob::eval::{evaluate_bundle, EvalConfig, ProbeConfig};
use rob::models::{EncoderConfig, HeadConfig, ModelBundle, Role};

fn main() -> rob::Result<()> {
    let ds = generate_synthetic_dataset(10, 24, 32, 0)?;
    let (train, test) = ds.split_stratified(0.5)?;
    let bundle = ModelBundle::new(
        EncoderConfig::transformer(4, 32, 2, 4, 16),
        HeadConfig::ssl_default(32, 32, 16, 32),
        0,
        Role::Teacher,
    )?;
    let cfg = EvalConfig {
        probe: ProbeConfig {
            epochs: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = evaluate_bundle(&bundle, &train, &test, &cfg)?;
    for c in &report.knn {
        println!("kNN k={:<2} {:<20} {:.3}", c.k, c.repr.name(), c.accuracy);
    }
    if let Some(sweep) = &report.linear {
        for c in &sweep.cells {
            println!(
                "probe {:<20} {:<20} {:.3}",
                c.repr.name(),
                c.head.name(),
                c.accuracy
            );
        }
        println!(
            "probe best {:.3} ({}, {})",
            sweep.best.accuracy,
            sweep.best.repr.name(),
            sweep.best.head.name()
        );
    }
    for c in &report.low_shot {
        println!(
            "low-shot {} img/class: {:.3} ± {:.3} over {} splits",
            c.result.images_per_class,
            c.result.mean,
            c.result.std,
            c.result.per_split.len()
        );
    }
    println!("normalization {:?}", report.low_shot_normalization);
    Ok(())
}
