//! Trains a small teacher with the EMA/centering baseline and registers it,
//! the programmatic equivalent of `rob train-teacher`.
//!
//! cargo run --release --example train_teacher [steps]

use rob::cli::{cmd_train_teacher, preset, TeacherRegistry};

fn main() -> rob::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(60);
    let dir = tempfile::tempdir().expect("temp dir");
    let mut cfg = preset("desk-dino")?.with_steps(steps, steps);
    cfg.output_dir = dir.path().join("teacher");
    cfg.registry = dir.path().join("registry.json");

    let out = cmd_train_teacher(&cfg)?;
    for r in out.records.iter().step_by((steps as usize / 6).max(1)) {
        println!(
            "step {:>4} loss {:.4} collapse {:.3}",
            r.step,
            r.loss,
            r.collapse.unwrap_or(f64::NAN)
        );
    }
    if let Some(report) = &out.report {
        println!(
            "teacher kNN@10 {:.3}",
            report.knn_accuracy(10).unwrap_or(f64::NAN)
        );
    }
    let registry = TeacherRegistry::load(&cfg.registry)?;
    let entry = registry.get(&cfg.teacher.name).expect("registered");
    println!(
        "registered {} -> {} ({})",
        entry.name,
        entry.checkpoint.display(),
        entry.checkpoint_digest
    );
    Ok(())
}
