//! Distills a frozen teacher into a half-width student with each method's
//! loss, and shows that the teacher weights never move.
//!
//! cargo run --release --example distill [steps]

use rob::data::generate_synthetic_dataset;
use rob::data::MultiCropConfig;
use rob::models::{EncoderConfig, HeadConfig, HeadVariant, ModelBundle, Role};
use rob::objectives::{DistillObjective, Method};
use rob::train::{
    run_distillation, teacher_student_kl, DistillState, LoopOptions, OptimSpec, OptimState,
};

fn main() -> rob::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(100);
    let ds = generate_synthetic_dataset(10, 8, 32, 0)?;
    let images: Vec<&rob::data::Image> = ds.records.iter().map(|r| &r.image).collect();
    let teacher = ModelBundle::new(
        EncoderConfig::transformer(2, 32, 4, 4, 16),
        HeadConfig::ssl_default(32, 32, 16, 32),
        0,
        Role::Teacher,
    )?;
    let mc = MultiCropConfig::with_sizes(16, 8, 2);
    let optim = OptimSpec::adamw(1e-3, 0.04, 0.4, 16, steps, steps / 10);

    for method in Method::ALL {
        let student = ModelBundle::student_for(
            &teacher,
            EncoderConfig::transformer(2, 16, 2, 4, 16),
            HeadVariant::SslDefault,
            3,
            1,
        )?;
        let objective = DistillObjective::recipe(method);
        let kl0 = teacher_student_kl(
            &teacher,
            &student,
            &images,
            objective.teacher_temp,
            objective.student_temp,
        )?;
        let before = teacher.checksum();
        let state = DistillState {
            step: 0,
            student,
            teacher: teacher.clone(),
            optim: OptimState::default(),
        };
        let (state, records) =
            run_distillation(&ds, state, &objective, &optim, &mc, LoopOptions::default())?;
        let kl1 = teacher_student_kl(
            &state.teacher,
            &state.student,
            &images,
            objective.teacher_temp,
            objective.student_temp,
        )?;
        println!(
            "{:<4} loss {:.3} -> {:.3}  KL {:.4} -> {:.4}  teacher unchanged: {}",
            method.name(),
            records[0].loss,
            records.last().expect("records").loss,
            kl0,
            kl1,
            state.teacher.checksum() == before
        );
    }
    Ok(())
}
