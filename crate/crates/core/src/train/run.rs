//! Training loops with JSONL metrics, periodic state checkpoints and resume.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::batch::step_batch;
use super::optim::OptimSpec;
use super::state::{
    restore_baseline_state, restore_distill_state, save_baseline_state, save_distill_state,
};
use super::step::{
    baseline_ssl_step, check_compatible, distill_step, BaselineSslConfig, BaselineState,
    DistillState, StepMetrics,
};
use crate::data::{Dataset, MultiCropConfig};
use crate::error::{Result, RobError};
use crate::models::ModelBundle;
use crate::objectives::DistillObjective;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wd: f64,
    /// Seconds since the loop (re)started.
    pub wallclock: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_momentum: Option<f64>,
}

impl MetricRecord {
    /// The record without its timing field, for reproducibility comparisons.
    pub fn without_wallclock(&self) -> MetricRecord {
        MetricRecord {
            wallclock: 0.0,
            ..self.clone()
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| RobError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| RobError::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| RobError::Format {
                what: "metrics log",
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Default)]
pub struct LoopOptions<'a> {
    pub seed: u64,
    /// Run directory for metrics and checkpoints; `None` keeps everything in memory.
    pub out_dir: Option<&'a Path>,
    /// Save a state checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Continue from the newest state checkpoint in `out_dir`.
    pub resume: bool,
    /// Stop before this step, as if interrupted.
    pub stop_at: Option<u64>,
    /// Called after every step with the step index and its metrics.
    pub on_step: Option<&'a mut dyn FnMut(u64, &StepMetrics)>,
}

fn state_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR)
        .join(format!("state-{step:08}.bin"))
}

/// Newest `state-*.bin` under `dir/checkpoints`.
pub fn latest_state(dir: &Path) -> Result<Option<PathBuf>> {
    let ckpt = dir.join(CHECKPOINT_DIR);
    if !ckpt.exists() {
        return Ok(None);
    }
    let mut best: Option<PathBuf> = None;
    for entry in fs::read_dir(&ckpt).map_err(|e| RobError::io(&ckpt, e))? {
        let p = entry.map_err(|e| RobError::io(&ckpt, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("state-")
            && name.ends_with(".bin")
            && best.as_ref().is_none_or(|b| p > *b)
        {
            best = Some(p);
        }
    }
    Ok(best)
}

/// Keeps only records before `step` in an existing log.
fn truncate_metrics(path: &Path, step: u64) -> Result<Vec<MetricRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let kept: Vec<MetricRecord> = read_metrics(path)?
        .into_iter()
        .filter(|r| r.step < step)
        .collect();
    let mut out = String::new();
    for r in &kept {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| RobError::io(path, e))?;
    Ok(kept)
}

trait Trainer {
    fn step_index(&self) -> u64;
    fn run_step(
        &mut self,
        ds: &Dataset,
        mc: &MultiCropConfig,
        optim: &OptimSpec,
        seed: u64,
    ) -> Result<(StepMetrics, Option<f64>)>;
    fn save(&self, path: &Path, seed: u64) -> Result<String>;
    fn restore(&mut self, path: &Path, seed: u64) -> Result<()>;
    /// Called at checkpoints and at the end.
    fn verify(&self) -> Result<()>;
}

struct DistillTrainer<'a> {
    state: DistillState,
    objective: &'a DistillObjective,
    teacher_checksum: String,
}

impl Trainer for DistillTrainer<'_> {
    fn step_index(&self) -> u64 {
        self.state.step
    }

    fn run_step(
        &mut self,
        ds: &Dataset,
        mc: &MultiCropConfig,
        optim: &OptimSpec,
        seed: u64,
    ) -> Result<(StepMetrics, Option<f64>)> {
        let mut batch = step_batch(ds, mc, seed, self.state.step, optim.batch_size)?;
        Ok((
            distill_step(&mut self.state, &mut batch, self.objective, optim, seed)?,
            None,
        ))
    }

    fn save(&self, path: &Path, seed: u64) -> Result<String> {
        save_distill_state(path, &self.state, seed)
    }

    fn restore(&mut self, path: &Path, seed: u64) -> Result<()> {
        restore_distill_state(path, &mut self.state, seed)
    }

    fn verify(&self) -> Result<()> {
        let now = self.state.teacher.checksum();
        if now != self.teacher_checksum {
            return Err(RobError::Digest {
                what: "frozen teacher parameters".into(),
                expected: self.teacher_checksum.clone(),
                found: now,
            });
        }
        Ok(())
    }
}

struct BaselineTrainer<'a> {
    state: BaselineState,
    config: &'a BaselineSslConfig,
}

impl Trainer for BaselineTrainer<'_> {
    fn step_index(&self) -> u64 {
        self.state.step
    }

    fn run_step(
        &mut self,
        ds: &Dataset,
        mc: &MultiCropConfig,
        optim: &OptimSpec,
        seed: u64,
    ) -> Result<(StepMetrics, Option<f64>)> {
        let batch = step_batch(ds, mc, seed, self.state.step, optim.batch_size)?;
        let m = self.config.ema_momentum.value(self.state.step)?;
        Ok((
            baseline_ssl_step(&mut self.state, &batch, self.config, optim, seed)?,
            Some(m),
        ))
    }

    fn save(&self, path: &Path, seed: u64) -> Result<String> {
        save_baseline_state(path, &self.state, seed)
    }

    fn restore(&mut self, path: &Path, seed: u64) -> Result<()> {
        restore_baseline_state(path, &mut self.state, seed)
    }

    fn verify(&self) -> Result<()> {
        Ok(())
    }
}

fn drive(
    trainer: &mut dyn Trainer,
    ds: &Dataset,
    mc: &MultiCropConfig,
    optim: &OptimSpec,
    opts: &mut LoopOptions<'_>,
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    let mut log: Option<File> = None;
    if let Some(dir) = opts.out_dir {
        let ckpt = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckpt).map_err(|e| RobError::io(&ckpt, e))?;
        let metrics = dir.join(METRICS_FILE);
        if opts.resume {
            if let Some(p) = latest_state(dir)? {
                trainer.restore(&p, opts.seed)?;
            }
            records = truncate_metrics(&metrics, trainer.step_index())?;
        } else {
            fs::write(&metrics, "").map_err(|e| RobError::io(&metrics, e))?;
        }
        log = Some(
            OpenOptions::new()
                .append(true)
                .open(&metrics)
                .map_err(|e| RobError::io(&metrics, e))?,
        );
    }
    let start = Instant::now();
    let end = opts.stop_at.map_or(optim.steps, |s| s.min(optim.steps));
    while trainer.step_index() < end {
        let step = trainer.step_index();
        let lr = optim.lr.value(step)?;
        let wd = optim.wd.value(step)?;
        let (m, ema) = trainer.run_step(ds, mc, optim, opts.seed)?;
        let record = MetricRecord {
            step,
            loss: m.loss,
            lr,
            wd,
            wallclock: start.elapsed().as_secs_f64(),
            collapse: Some(m.collapse),
            ema_momentum: ema,
        };
        if let (Some(f), Some(dir)) = (log.as_mut(), opts.out_dir) {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| RobError::io(dir.join(METRICS_FILE), e))?;
        }
        records.push(record);
        if let Some(cb) = opts.on_step.as_deref_mut() {
            cb(step, &m);
        }
        let done = step + 1;
        let periodic = opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0;
        if periodic || done == optim.steps {
            trainer.verify()?;
            if let Some(dir) = opts.out_dir {
                trainer.save(&state_path(dir, done), opts.seed)?;
            }
        }
    }
    trainer.verify()?;
    Ok(records)
}

fn check_sizes(bundle: &ModelBundle, mc: &MultiCropConfig, what: &str) -> Result<()> {
    if bundle.encoder.input_size != mc.large_size {
        return Err(RobError::config(format!(
            "{what} input_size {} must equal the large crop size {}",
            bundle.encoder.input_size, mc.large_size
        )));
    }
    bundle.encoder.check_view_size(mc.large_size)?;
    if mc.n_small > 0 {
        bundle.encoder.check_view_size(mc.small_size)?;
    }
    Ok(())
}

/// RoB distillation loop. The teacher checksum is verified at every
/// checkpoint and at the end; any change is an error.
pub fn run_distillation(
    ds: &Dataset,
    state: DistillState,
    objective: &DistillObjective,
    optim: &OptimSpec,
    mc: &MultiCropConfig,
    mut opts: LoopOptions<'_>,
) -> Result<(DistillState, Vec<MetricRecord>)> {
    optim.validate()?;
    mc.validate()?;
    check_compatible(&state.student, &state.teacher, objective)?;
    check_sizes(&state.student, mc, "student")?;
    check_sizes(&state.teacher, mc, "teacher")?;
    let teacher_checksum = state.teacher.checksum();
    let mut t = DistillTrainer {
        state,
        objective,
        teacher_checksum,
    };
    let records = drive(&mut t, ds, mc, optim, &mut opts)?;
    Ok((t.state, records))
}

/// Baseline EMA/centering loop used to produce teachers.
pub fn run_baseline(
    ds: &Dataset,
    state: BaselineState,
    config: &BaselineSslConfig,
    optim: &OptimSpec,
    mc: &MultiCropConfig,
    mut opts: LoopOptions<'_>,
) -> Result<(BaselineState, Vec<MetricRecord>)> {
    optim.validate()?;
    mc.validate()?;
    config.validate()?;
    if config.ema_momentum.total_steps != optim.steps {
        return Err(RobError::config(
            "the EMA schedule must span optimization.steps",
        ));
    }
    check_sizes(&state.student, mc, "student")?;
    let mut t = BaselineTrainer { state, config };
    let records = drive(&mut t, ds, mc, optim, &mut opts)?;
    Ok((t.state, records))
}
