//! Named starting configurations. `rob-*-b1` carry the published per-method
//! recipes at full scale; `desk-*` shrink them to run on one CPU in minutes.

use std::path::PathBuf;

use super::config::{
    DataConfig, DataSource, RunConfig, RunSection, StudentConfig, StudentInit, TeacherConfig,
};
use crate::data::MultiCropConfig;
use crate::error::{Result, RobError};
use crate::eval::{EvalConfig, ProbeConfig};
use crate::models::{EncoderConfig, HeadConfig, HeadVariant};
use crate::objectives::{DistillObjective, Method};
use crate::train::{Algorithm, BaselineSslConfig, OptimSpec, ScheduleSpec};

pub const PRESETS: [&str; 9] = [
    "desk-dino",
    "desk-ibot",
    "desk-swav",
    "desk-msn",
    "desk-conv-student",
    "rob-dino-b1",
    "rob-ibot-b1",
    "rob-swav-b1",
    "rob-msn-b1",
];

/// 1.28M images at batch 1024.
const IMAGENET_STEPS_PER_EPOCH_1024: u64 = 1252;

fn desk(method: Method) -> RunConfig {
    let steps = 200;
    let batch = 32;
    let teacher_enc = EncoderConfig::transformer(4, 64, 4, 4, 16);
    let mut student_enc = EncoderConfig::transformer(4, 32, 2, 4, 16);
    if method == Method::Dino {
        student_enc.drop_path_rate = 0.1;
    }
    let wd_end = if method == Method::Ibot { 0.48 } else { 0.4 };
    RunConfig {
        seed: 0,
        output_dir: PathBuf::from(format!("runs/desk-{}", method.name())),
        registry: PathBuf::from("runs/registry.json"),
        data: DataConfig {
            source: DataSource::Synthetic {
                n_classes: 10,
                per_class: 24,
                image_size: 32,
                seed: 0,
            },
            train_fraction: 0.5,
        },
        augmentation: MultiCropConfig::with_sizes(16, 8, 2),
        teacher: TeacherConfig {
            name: "desk-teacher".into(),
            encoder: teacher_enc,
            head: HeadConfig::ssl_default(64, 64, 32, 64),
            baseline: BaselineSslConfig::dino(steps),
            optimization: OptimSpec::adamw(5e-4, 0.04, 0.4, batch, steps, 20),
        },
        student: StudentConfig {
            encoder: student_enc,
            head_variant: HeadVariant::SslDefault,
            mlp_depth: 3,
            init: StudentInit::Random,
        },
        objective: DistillObjective::recipe(method),
        optimization: OptimSpec::adamw(2e-3, 0.04, wd_end, batch, steps, 20),
        evaluation: EvalConfig {
            probe: ProbeConfig {
                epochs: 30,
                ..Default::default()
            },
            ..Default::default()
        },
        run: RunSection {
            checkpoint_every: 0,
            resume: false,
        },
    }
}

fn imagenet_recipe(method: Method) -> RunConfig {
    let epochs = if method == Method::Swav { 100 } else { 300 };
    let (batch, per_epoch) = if method == Method::Swav {
        (4096, IMAGENET_STEPS_PER_EPOCH_1024.div_ceil(4))
    } else {
        (1024, IMAGENET_STEPS_PER_EPOCH_1024)
    };
    let steps = epochs * per_epoch;
    let warmup = 10 * per_epoch;
    let n_small = match method {
        Method::Dino => 8,
        Method::Swav => 4,
        Method::Ibot | Method::Msn => 10,
    };
    let vit = |depth, width, heads, patch| EncoderConfig {
        mlp_ratio: 4,
        ..EncoderConfig::transformer(depth, width, heads, patch, 224)
    };
    let (name, teacher_enc, teacher_head) = match method {
        Method::Dino => (
            "dino-vit-s8",
            vit(12, 384, 6, 8),
            HeadConfig::ssl_default(384, 2048, 256, 65536),
        ),
        Method::Ibot => (
            "ibot-vit-b16",
            vit(12, 768, 12, 16),
            HeadConfig::ssl_default(768, 2048, 256, 8192),
        ),
        Method::Msn => (
            "msn-vit-b16",
            vit(12, 768, 12, 16),
            HeadConfig::ssl_default(768, 2048, 256, 1024),
        ),
        Method::Swav => (
            "swav-resnet50",
            EncoderConfig::conv(vec![3, 4, 6, 3], 2048, 224),
            HeadConfig {
                hidden_dims: vec![2048],
                ..HeadConfig::ssl_default(2048, 2048, 128, 3000)
            },
        ),
    };
    let student_enc = match method {
        Method::Swav => EncoderConfig::conv(vec![1, 2, 3, 1], 960, 224),
        Method::Dino => EncoderConfig {
            drop_path_rate: 0.1,
            ..vit(12, 192, 3, 16)
        },
        _ => vit(12, 192, 3, 16),
    };
    let optimization = match method {
        Method::Swav => OptimSpec {
            algorithm: Algorithm::SgdMomentum,
            lr: ScheduleSpec::cosine(warmup, 4.8, 0.0, steps),
            wd: ScheduleSpec::constant(1e-6, steps),
            momentum: 0.9,
            recipe_note: Some("published recipe uses LARS; run here as SGD with momentum".into()),
            ..OptimSpec::adamw(4.8, 1e-6, 1e-6, batch, steps, warmup)
        },
        Method::Ibot => OptimSpec::adamw(2e-3, 0.04, 0.48, batch, steps, warmup),
        _ => OptimSpec::adamw(2e-3, 0.04, 0.4, batch, steps, warmup),
    };
    RunConfig {
        seed: 0,
        output_dir: PathBuf::from(format!("runs/rob-{}-b1", method.name())),
        registry: PathBuf::from("runs/registry.json"),
        data: DataConfig {
            source: DataSource::Folder {
                path: PathBuf::from("imagenet/train"),
                resize: 256,
            },
            train_fraction: 0.9,
        },
        augmentation: MultiCropConfig::with_sizes(224, 96, n_small),
        teacher: TeacherConfig {
            name: name.into(),
            encoder: teacher_enc,
            head: teacher_head,
            baseline: BaselineSslConfig::dino(steps),
            optimization: optimization.clone(),
        },
        student: StudentConfig {
            encoder: student_enc,
            head_variant: HeadVariant::SslDefault,
            mlp_depth: 3,
            init: StudentInit::Random,
        },
        objective: DistillObjective::recipe(method),
        optimization,
        evaluation: EvalConfig::default(),
        run: RunSection {
            checkpoint_every: per_epoch,
            resume: true,
        },
    }
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let cfg = match name {
        "desk-dino" => desk(Method::Dino),
        "desk-ibot" => desk(Method::Ibot),
        "desk-swav" => desk(Method::Swav),
        "desk-msn" => desk(Method::Msn),
        "desk-conv-student" => {
            let mut c = desk(Method::Dino);
            c.student.encoder = EncoderConfig::conv(vec![1, 1], 32, 16);
            c.output_dir = PathBuf::from("runs/desk-conv-student");
            c
        }
        "rob-dino-b1" => imagenet_recipe(Method::Dino),
        "rob-ibot-b1" => imagenet_recipe(Method::Ibot),
        "rob-swav-b1" => imagenet_recipe(Method::Swav),
        "rob-msn-b1" => imagenet_recipe(Method::Msn),
        other => {
            return Err(RobError::config(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            preset(name)
                .unwrap()
                .validate()
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert_eq!(preset("nope").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn recipe_constants() {
        let d = preset("rob-dino-b1").unwrap();
        assert_eq!(
            (d.objective.teacher_temp, d.objective.student_temp),
            (0.07, 0.1)
        );
        assert_eq!(d.optimization.lr.peak_value, 2e-3);
        assert_eq!(
            (d.optimization.wd.peak_value, d.optimization.wd.end_value),
            (0.04, 0.4)
        );
        assert_eq!(d.optimization.batch_size, 1024);
        assert_eq!(d.student.encoder.drop_path_rate, 0.1);
        assert_eq!(d.augmentation.n_small, 8);
        let i = preset("rob-ibot-b1").unwrap();
        assert_eq!(
            (i.optimization.wd.end_value, i.augmentation.n_small),
            (0.48, 10)
        );
        let s = preset("rob-swav-b1").unwrap();
        assert_eq!(
            (
                s.objective.teacher_temp,
                s.optimization.lr.peak_value,
                s.optimization.batch_size
            ),
            (0.03, 4.8, 4096)
        );
        assert_eq!(s.teacher.head.n_prototypes, 3000);
        let m = preset("rob-msn-b1").unwrap();
        assert_eq!(
            (m.objective.teacher_temp, m.objective.mask_ratio),
            (0.1, 0.05)
        );
        assert_eq!(m.student.encoder.drop_path_rate, 0.0);
    }
}
