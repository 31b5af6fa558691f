//! Builds a teacher and students with each head variant, then saves and
//! reloads a checkpoint.
//!
//! cargo run --release --example models_and_checkpoints

use rob::data::generate_synthetic_dataset;
use rob::models::{EncoderConfig, HeadConfig, HeadVariant, ModelBundle, Role};

fn main() -> rob::Result<()> {
    let teacher = ModelBundle::new(
        EncoderConfig::transformer(4, 64, 4, 4, 16),
        HeadConfig::ssl_default(64, 64, 32, 64),
        0,
        Role::Teacher,
    )?;
    println!(
        "teacher: {} parameters, frozen = {}",
        teacher.param_count(),
        teacher.frozen
    );

    for variant in HeadVariant::ALL {
        let student = ModelBundle::student_for(
            &teacher,
            EncoderConfig::transformer(4, 32, 2, 4, 16),
            variant,
            3,
            1,
        )?;
        println!(
            "student/{:<11} {:>6} parameters ({} trainable)",
            variant.name(),
            student.param_count(),
            student.params.trainable_count()
        );
    }
    let conv = ModelBundle::new(
        EncoderConfig::conv(vec![1, 1], 32, 16),
        HeadConfig::ssl_default(32, 32, 16, 64),
        2,
        Role::Student,
    )?;
    println!("conv student: {} parameters", conv.param_count());

    let ds = generate_synthetic_dataset(2, 2, 16, 0)?;
    let images: Vec<&rob::data::Image> = ds.records.iter().map(|r| &r.image).collect();
    let probs = teacher.probabilities(&images, 0.07)?;
    println!(
        "teacher distribution over K={}: first row sums to {:.6}",
        probs.cols(),
        probs.row(0).iter().sum::<f64>()
    );

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("teacher.ckpt");
    let digest = teacher.save(&path, 0, 0)?;
    let (back, header, _) = ModelBundle::load(&path)?;
    println!(
        "checkpoint {digest}: role {:?}, identical = {}",
        header.role,
        back == teacher
    );
    Ok(())
}
