use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, StudentInit};
use super::registry::{encoder_digest, TeacherRegistry, TeacherRegistryEntry};
use crate::data::write_feature_table;
use crate::error::{Result, RobError};
use crate::eval::{evaluate_bundle, extract_features, EvalReport, ReprChoice};
use crate::models::checkpoint::{file_digest, sha256_hex};
use crate::models::{HeadVariant, ModelBundle, Role};
use crate::objectives::ViewMatchPolicy;
use crate::train::{
    run_baseline, run_distillation, BaselineState, DistillState, LoopOptions, MetricRecord,
    OptimState,
};

pub const CODE_VERSION: &str = concat!("rob-distill ", env!("CARGO_PKG_VERSION"));
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
pub const RUN_INFO_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "eval_report.json";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const DIGEST_SUFFIX: &str = "sha256";
pub const FEATURES_DIR: &str = "features";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub seed: u64,
    pub code_version: String,
    pub config_digest: String,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_digest: Option<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| RobError::io(path, e))
}

/// Creates the run directory and checks it is writable before any compute.
fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| RobError::io(&dir, e))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| RobError::io(&dir, e))?;
    fs::remove_file(&probe).map_err(|e| RobError::io(&probe, e))?;
    write_text(&dir.join(RESOLVED_CONFIG_FILE), &cfg.to_toml_string())?;
    Ok(dir)
}

fn config_digest(cfg: &RunConfig) -> String {
    sha256_hex(cfg.to_toml_string().as_bytes())
}

fn write_run_info(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    ckpt: Option<(&Path, &str)>,
) -> Result<()> {
    let info = RunInfo {
        command: command.into(),
        seed: cfg.seed,
        code_version: CODE_VERSION.into(),
        config_digest: config_digest(cfg),
        checkpoint: ckpt.map(|(p, _)| p.to_path_buf()),
        checkpoint_digest: ckpt.map(|(_, d)| d.to_string()),
    };
    write_text(
        &dir.join(RUN_INFO_FILE),
        &(serde_json::to_string_pretty(&info).expect("serializable") + "\n"),
    )
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(DIGEST_SUFFIX);
    PathBuf::from(s)
}

/// Saves a bundle and a `<file>.sha256` sidecar holding its digest.
pub fn save_verified(bundle: &ModelBundle, path: &Path, step: u64, seed: u64) -> Result<String> {
    let digest = bundle.save(path, step, seed)?;
    write_text(&sidecar(path), &format!("{digest}\n"))?;
    Ok(digest)
}

/// Loads a bundle whose file digest matches its sidecar.
pub fn load_verified(path: &Path) -> Result<(ModelBundle, String)> {
    let side = sidecar(path);
    let expected = fs::read_to_string(&side)
        .map_err(|e| RobError::io(&side, e))?
        .trim()
        .to_string();
    let found = file_digest(path)?;
    if found != expected {
        return Err(RobError::Digest {
            what: path.display().to_string(),
            expected,
            found,
        });
    }
    let (bundle, _, _) = ModelBundle::load(path)?;
    Ok((bundle, found))
}

fn evaluate_into(
    dir: &Path,
    cfg: &RunConfig,
    bundle: &ModelBundle,
    digest: &str,
) -> Result<Option<EvalReport>> {
    if cfg.evaluation.protocols.is_empty() {
        return Ok(None);
    }
    let (train, test) = cfg.data.load_split()?;
    let mut report = evaluate_bundle(bundle, &train, &test, &cfg.evaluation)?;
    report.model_digest = Some(digest.to_string());
    report.save(&dir.join(REPORT_FILE))?;
    // Raw last-layer features, tagged with the model digest, for reuse outside the suite.
    let features = dir.join(FEATURES_DIR);
    fs::create_dir_all(&features).map_err(|e| RobError::io(&features, e))?;
    let repr = ReprChoice::LastGlobal;
    for (split, ds) in [("train", &train), ("test", &test)] {
        let table = extract_features(bundle, ds, repr, cfg.evaluation.crop_fraction)?;
        let labels: Vec<Option<usize>> = table.labels.iter().map(|&l| Some(l)).collect();
        let path = features.join(format!("{split}-{}.rft", repr.name()));
        write_feature_table(
            &path,
            &table.features,
            &labels,
            &format!("{digest}:{}", repr.name()),
        )?;
    }
    Ok(Some(report))
}

fn loop_options<'a>(cfg: &RunConfig, dir: &'a Path) -> LoopOptions<'a> {
    LoopOptions {
        seed: cfg.seed,
        out_dir: Some(dir),
        checkpoint_every: cfg.run.checkpoint_every,
        resume: cfg.run.resume,
        stop_at: None,
        on_step: None,
    }
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub digest: String,
    pub records: Vec<MetricRecord>,
    pub report: Option<EvalReport>,
    pub entry: TeacherRegistryEntry,
}

/// Trains a teacher with the EMA/centering baseline, saves the EMA network
/// and registers it under `teacher.name`.
pub fn cmd_train_teacher(cfg: &RunConfig) -> Result<TeacherOutcome> {
    cfg.validate()?;
    let dir = prepare_run_dir(cfg)?;
    let (train, _) = cfg.data.load_split()?;
    let student = ModelBundle::new(
        cfg.teacher.encoder.clone(),
        cfg.teacher.head.clone(),
        cfg.seed,
        Role::Student,
    )?;
    let opts = loop_options(cfg, &dir);
    let (state, records) = run_baseline(
        &train,
        BaselineState::new(student),
        &cfg.teacher.baseline,
        &cfg.teacher.optimization,
        &cfg.augmentation,
        opts,
    )?;
    let teacher = state.teacher.into_teacher();
    let checkpoint = dir.join(TEACHER_CHECKPOINT);
    let digest = save_verified(&teacher, &checkpoint, state.step, cfg.seed)?;
    let report = evaluate_into(&dir, cfg, &teacher, &digest)?;
    let absolute = fs::canonicalize(&checkpoint).map_err(|e| RobError::io(&checkpoint, e))?;
    let entry = TeacherRegistryEntry {
        name: cfg.teacher.name.clone(),
        checkpoint: absolute,
        checkpoint_digest: digest.clone(),
        method: "dino_baseline".into(),
        encoder_digest: encoder_digest(&teacher.encoder),
        seed: cfg.seed,
        steps: state.step,
        code_version: CODE_VERSION.into(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let mut registry = TeacherRegistry::load(&cfg.registry)?;
    registry.register(entry.clone());
    registry.save(&cfg.registry)?;
    write_run_info(&dir, "train-teacher", cfg, Some((&checkpoint, &digest)))?;
    Ok(TeacherOutcome {
        run_dir: dir,
        checkpoint,
        digest,
        records,
        report,
        entry,
    })
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub digest: String,
    pub records: Vec<MetricRecord>,
    pub report: Option<EvalReport>,
}

impl DistillOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Distills the registered teacher into a fresh student, then evaluates it.
pub fn cmd_distill(cfg: &RunConfig) -> Result<DistillOutcome> {
    cfg.validate()?;
    let registry = TeacherRegistry::load(&cfg.registry)?;
    let (teacher, _, _) = registry.load_teacher(&cfg.teacher.name)?;
    if teacher.encoder != cfg.teacher.encoder || teacher.head != cfg.teacher.head {
        return Err(RobError::config(format!(
            "teacher section does not describe the registered teacher {:?}",
            cfg.teacher.name
        )));
    }
    let dir = prepare_run_dir(cfg)?;
    let (train, _) = cfg.data.load_split()?;
    let s = &cfg.student;
    let mut student = ModelBundle::student_for(
        &teacher,
        s.encoder.clone(),
        s.head_variant,
        s.mlp_depth,
        cfg.seed,
    )?;
    if s.init == StudentInit::CopyTeacher {
        student.params.copy_values_from(&teacher.params)?;
    }
    let state = DistillState {
        step: 0,
        student,
        teacher,
        optim: OptimState::default(),
    };
    let opts = loop_options(cfg, &dir);
    let (state, records) = run_distillation(
        &train,
        state,
        &cfg.objective,
        &cfg.optimization,
        &cfg.augmentation,
        opts,
    )?;
    let checkpoint = dir.join(STUDENT_CHECKPOINT);
    let digest = save_verified(&state.student, &checkpoint, state.step, cfg.seed)?;
    let report = evaluate_into(&dir, cfg, &state.student, &digest)?;
    write_run_info(&dir, "distill", cfg, Some((&checkpoint, &digest)))?;
    Ok(DistillOutcome {
        run_dir: dir,
        checkpoint,
        digest,
        records,
        report,
    })
}

/// Evaluates a checkpoint after checking it against its digest sidecar.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let (bundle, digest) = load_verified(checkpoint)?;
    let dir = prepare_run_dir(cfg)?;
    let report = evaluate_into(&dir, cfg, &bundle, &digest)?
        .ok_or_else(|| RobError::config("evaluation.protocols is empty"))?;
    write_run_info(&dir, "evaluate", cfg, Some((checkpoint, &digest)))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    HeadVariant,
    Multicrop,
    ViewPolicy,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [
        AblationAxis::HeadVariant,
        AblationAxis::Multicrop,
        AblationAxis::ViewPolicy,
    ];

    pub fn parse(s: &str) -> Result<AblationAxis> {
        match s {
            "head_variant" => Ok(AblationAxis::HeadVariant),
            "multicrop" => Ok(AblationAxis::Multicrop),
            "view_policy" => Ok(AblationAxis::ViewPolicy),
            other => Err(RobError::config(format!(
                "unknown ablation axis {other:?}; expected head_variant, multicrop or view_policy"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::HeadVariant => "head_variant",
            AblationAxis::Multicrop => "multicrop",
            AblationAxis::ViewPolicy => "view_policy",
        }
    }

    /// One labelled config per axis value; everything else is shared.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let root = base.output_dir.join(format!("ablate-{}", self.name()));
        let mk = |label: String, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c.output_dir = root.join(&label);
            (label, c)
        };
        match self {
            AblationAxis::HeadVariant => HeadVariant::ALL
                .iter()
                .map(|&v| mk(v.name().into(), &|c| c.student.head_variant = v))
                .collect(),
            AblationAxis::Multicrop => {
                let n = base.augmentation.n_small;
                vec![
                    mk(format!("n_small={n}"), &|_| {}),
                    mk("n_small=0".into(), &|c| c.augmentation.n_small = 0),
                ]
            }
            AblationAxis::ViewPolicy => [ViewMatchPolicy::Identical, ViewMatchPolicy::Cross]
                .iter()
                .map(|&p| mk(p.name().into(), &|c| c.objective.policy = p))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub run_dir: PathBuf,
    pub final_loss: f64,
    pub report: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Side-by-side table: one line per run.
    pub fn table(&self) -> String {
        let mut out = format!(
            "axis: {}\n{:<16} {:>12} {:>8} {:>8} {:>8} {:>10}\n",
            self.axis.name(),
            "run",
            "final_loss",
            "knn@10",
            "knn@20",
            "linear",
            "low-shot-1"
        );
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{:.3}", a));
        for r in &self.rows {
            let rep = r.report.as_ref();
            out.push_str(&format!(
                "{:<16} {:>12.6} {:>8} {:>8} {:>8} {:>10}\n",
                r.label,
                r.final_loss,
                cell(rep.and_then(|x| x.knn_accuracy(10))),
                cell(rep.and_then(|x| x.knn_accuracy(20))),
                cell(rep.and_then(|x| x.linear.as_ref().map(|l| l.best.accuracy))),
                cell(rep.and_then(|x| x.low_shot.first().map(|c| c.result.mean))),
            ));
        }
        out
    }
}

/// One distillation per axis value with shared seed, data and teacher.
pub fn cmd_ablate(cfg: &RunConfig, axis: AblationAxis) -> Result<AblationReport> {
    cfg.validate()?;
    let runs = axis.variants(cfg);
    for (_, c) in &runs {
        c.validate()?;
    }
    let mut rows = Vec::with_capacity(runs.len());
    for (label, c) in runs {
        let out = cmd_distill(&c)?;
        rows.push(AblationRow {
            label,
            run_dir: out.run_dir.clone(),
            final_loss: out.final_loss().unwrap_or(f64::NAN),
            report: out.report,
        });
    }
    let report = AblationReport { axis, rows };
    let root = cfg.output_dir.join(format!("ablate-{}", axis.name()));
    write_text(
        &root.join("ablation.json"),
        &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"),
    )?;
    write_text(&root.join("ablation.txt"), &report.table())?;
    Ok(report)
}
