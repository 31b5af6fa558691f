use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::presets;
use crate::data::{
    generate_synthetic_dataset, load_image_folder, read_dataset, Dataset, MultiCropConfig,
};
use crate::error::{Result, RobError};
use crate::eval::EvalConfig;
use crate::models::{EncoderConfig, HeadConfig, HeadVariant};
use crate::objectives::DistillObjective;
use crate::train::{BaselineSslConfig, OptimSpec};

/// Relative data paths are resolved against this directory.
pub const DATA_ROOT_ENV: &str = "ROB_DATA_ROOT";
pub const DEFAULT_PRESET: &str = "desk-dino";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n_classes: usize,
        per_class: usize,
        image_size: usize,
        seed: u64,
    },
    /// One subdirectory per class.
    Folder { path: PathBuf, resize: usize },
    /// Dataset container written by `write_dataset`.
    Container { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Per-class fraction used for training; the rest is the evaluation test set.
    pub train_fraction: f64,
}

impl DataConfig {
    pub fn resolve(path: &Path) -> PathBuf {
        if path.is_absolute() {
            return path.to_path_buf();
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(path),
            None => path.to_path_buf(),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match &self.source {
            DataSource::Synthetic {
                n_classes,
                per_class,
                image_size,
                seed,
            } => generate_synthetic_dataset(*n_classes, *per_class, *image_size, *seed),
            DataSource::Folder { path, resize } => load_image_folder(&Self::resolve(path), *resize),
            DataSource::Container { path } => Ok(read_dataset(&Self::resolve(path))?.1),
        }
    }

    /// `(train, test)` stratified by class.
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        self.load()?.split_stratified(self.train_fraction)
    }
}

/// How the teacher is produced (`train-teacher`) and found (`distill`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub name: String,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub baseline: BaselineSslConfig,
    pub optimization: OptimSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Random,
    /// Start from the teacher's weights; requires identical architectures.
    CopyTeacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub encoder: EncoderConfig,
    pub head_variant: HeadVariant,
    /// Layer count of the `mlp` head variant.
    pub mlp_depth: usize,
    pub init: StudentInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// State checkpoint period in steps; 0 saves only the final state.
    pub checkpoint_every: u64,
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Teacher registry file.
    pub registry: PathBuf,
    pub data: DataConfig,
    pub augmentation: MultiCropConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub objective: DistillObjective,
    pub optimization: OptimSpec,
    pub evaluation: EvalConfig,
    pub run: RunSection,
}

/// Command-line overrides applied after the preset and the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
/// A table naming a different `kind` replaces the old variant wholesale.
pub fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t))
            if t.get("kind").is_none_or(|k| Some(k) == b.get("kind")) =>
        {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| RobError::config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Preset, then config file, then flags; the result is validated.
    pub fn resolve(o: &Overrides) -> Result<RunConfig> {
        let name = o.preset.as_deref().unwrap_or(DEFAULT_PRESET);
        let preset = presets::preset(name)?;
        let mut value = toml::Value::try_from(&preset).expect("config serializes to TOML");
        if let Some(path) = &o.config {
            let text = std::fs::read_to_string(path).map_err(|e| RobError::io(path, e))?;
            let file: toml::Value = toml::from_str(&text)
                .map_err(|e| RobError::config(format!("{}: {e}", path.display())))?;
            merge(&mut value, file);
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| RobError::config(e.to_string()))?;
        cfg.follow_steps(&preset);
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &o.output {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schedules still at the preset's length follow an overridden step count,
    /// so an overlay only needs to set `steps`.
    fn follow_steps(&mut self, preset: &RunConfig) {
        fn fit(o: &mut OptimSpec, base: u64) {
            let steps = o.steps;
            for s in [&mut o.lr, &mut o.wd] {
                if s.total_steps == base && steps != base {
                    *s = s.with_total(steps);
                }
            }
        }
        let base = preset.teacher.optimization.steps;
        fit(&mut self.teacher.optimization, base);
        let ema = &mut self.teacher.baseline.ema_momentum;
        if ema.total_steps == base {
            *ema = ema.with_total(self.teacher.optimization.steps);
        }
        fit(&mut self.optimization, preset.optimization.steps);
    }

    /// Stretches the teacher and distillation schedules to new step budgets.
    pub fn with_steps(mut self, teacher_steps: u64, distill_steps: u64) -> Self {
        self.teacher.optimization = self.teacher.optimization.with_steps(teacher_steps);
        self.teacher.baseline.ema_momentum =
            self.teacher.baseline.ema_momentum.with_total(teacher_steps);
        self.optimization = self.optimization.with_steps(distill_steps);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: RobError| match e {
            RobError::Config(m) => RobError::config(format!("{name}: {m}")),
            other => other,
        };
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(RobError::config("data.train_fraction must lie in (0, 1)"));
        }
        if let DataSource::Synthetic {
            n_classes,
            per_class,
            image_size,
            ..
        } = self.data.source
        {
            if n_classes == 0 || per_class < 2 || image_size == 0 {
                return Err(RobError::config(
                    "data: synthetic needs n_classes > 0, per_class >= 2, image_size > 0",
                ));
            }
        }
        self.augmentation
            .validate()
            .map_err(|e| field("augmentation", e))?;
        if self.teacher.name.is_empty() {
            return Err(RobError::config("teacher.name must not be empty"));
        }
        self.teacher
            .encoder
            .validate()
            .map_err(|e| field("teacher.encoder", e))?;
        self.teacher
            .head
            .validate()
            .map_err(|e| field("teacher.head", e))?;
        if self.teacher.head.in_dim != self.teacher.encoder.width {
            return Err(RobError::config(format!(
                "teacher.head.in_dim {} must equal teacher.encoder.width {}",
                self.teacher.head.in_dim, self.teacher.encoder.width
            )));
        }
        self.teacher
            .baseline
            .validate()
            .map_err(|e| field("teacher.baseline", e))?;
        self.teacher
            .optimization
            .validate()
            .map_err(|e| field("teacher.optimization", e))?;
        if self.teacher.baseline.ema_momentum.total_steps != self.teacher.optimization.steps {
            return Err(RobError::config(
                "teacher.baseline.ema_momentum must span teacher.optimization.steps",
            ));
        }
        self.student
            .encoder
            .validate()
            .map_err(|e| field("student.encoder", e))?;
        if self.student.init == StudentInit::CopyTeacher
            && self.student.encoder != self.teacher.encoder
        {
            return Err(RobError::config(
                "student.init = copy_teacher needs student.encoder equal to teacher.encoder",
            ));
        }
        for (who, enc) in [
            ("teacher", &self.teacher.encoder),
            ("student", &self.student.encoder),
        ] {
            if enc.input_size != self.augmentation.large_size {
                return Err(RobError::config(format!(
                    "{who}.encoder.input_size {} must equal augmentation.large_size {}",
                    enc.input_size, self.augmentation.large_size
                )));
            }
        }
        self.objective
            .validate()
            .map_err(|e| field("objective", e))?;
        self.optimization
            .validate()
            .map_err(|e| field("optimization", e))?;
        self.evaluation
            .validate()
            .map_err(|e| field("evaluation", e))?;
        Ok(())
    }
}
