//! Single optimization steps: RoB distillation against a frozen teacher, and
//! the EMA/centering baseline used to manufacture teachers.

use rob_tensor::{softmax_rows, Graph, Matrix, Var};
use serde::{Deserialize, Serialize};

use super::metrics::mean_pairwise_cosine;
use super::optim::{optimizer_step, OptimSpec, OptimState};
use super::schedule::ScheduleSpec;
use crate::data::{sample_patch_mask, Image, PatchMask, ViewSet};
use crate::error::{Result, RobError};
use crate::models::{BundleVars, EncoderFamily, ForwardOptions, MaskMode, ModelBundle, ParamStore};
use crate::objectives::terms::distill_loss_graph;
use crate::objectives::{DistillObjective, DistillTargets, Method, Normalization, ViewMatchPolicy};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub step: u64,
    pub student: ModelBundle,
    pub teacher: ModelBundle,
    pub optim: OptimState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
    /// Mean pairwise cosine between the learning network's outputs for
    /// distinct images (first large view).
    pub collapse: f64,
}

fn n_views_of(batch: &[ViewSet]) -> Result<usize> {
    let n = batch
        .first()
        .ok_or_else(|| RobError::contract("empty batch"))?
        .n_views();
    if n < 2 || batch.iter().any(|v| v.n_views() != n) {
        return Err(RobError::contract(
            "every image needs the same number (>= 2) of views",
        ));
    }
    Ok(n)
}

fn masks_of(vs: &ViewSet, range: std::ops::Range<usize>) -> Vec<Option<PatchMask>> {
    range.map(|v| vs.mask(v).cloned()).collect()
}

pub struct StudentPass {
    /// `B·N × K` head scores, image-major.
    pub scores: Var,
    pub large: BundleVars,
}

/// Student forward over every view. Large and small views run as two
/// batches; the scores are reassembled image-major.
pub fn student_forward(
    g: &mut Graph,
    student: &ModelBundle,
    batch: &[ViewSet],
    mode: MaskMode,
    drop_path_seed: Option<(u64, u64)>,
    with_patch_scores: bool,
) -> Result<StudentPass> {
    let n = n_views_of(batch)?;
    let b = batch.len();
    let mut dp_rng = drop_path_seed.map(|(seed, step)| rng::stream(seed, &[tag::DROP_PATH, step]));

    let large_imgs: Vec<&Image> = batch.iter().flat_map(|vs| &vs.views[..2]).collect();
    let large_masks: Vec<Option<PatchMask>> =
        batch.iter().flat_map(|vs| masks_of(vs, 0..2)).collect();
    let any_large_mask = large_masks.iter().any(Option::is_some);
    let mut opts = ForwardOptions {
        train: true,
        drop_path_rng: dp_rng.as_mut(),
        masks: any_large_mask.then_some(&large_masks[..]),
        mask_mode: Some(mode),
        layerwise: false,
    };
    let large = student.forward(g, &large_imgs, &mut opts, with_patch_scores)?;
    if n == 2 {
        return Ok(StudentPass {
            scores: large.scores,
            large,
        });
    }
    let small_imgs: Vec<&Image> = batch.iter().flat_map(|vs| &vs.views[2..]).collect();
    let small_masks: Vec<Option<PatchMask>> =
        batch.iter().flat_map(|vs| masks_of(vs, 2..n)).collect();
    let any_small_mask = small_masks.iter().any(Option::is_some);
    let mut opts = ForwardOptions {
        train: true,
        drop_path_rng: dp_rng.as_mut(),
        masks: any_small_mask.then_some(&small_masks[..]),
        mask_mode: Some(mode),
        layerwise: false,
    };
    let small = student.forward(g, &small_imgs, &mut opts, false)?;
    let both = g.concat_rows(&[large.scores, small.scores]);
    let ns = n - 2;
    let order: Vec<usize> = (0..b)
        .flat_map(|i| {
            [2 * i, 2 * i + 1]
                .into_iter()
                .chain((0..ns).map(move |s| 2 * b + i * ns + s))
        })
        .collect();
    let scores = g.gather_rows(both, order);
    Ok(StudentPass { scores, large })
}

/// Gradient-free teacher scores for the two large views of each image,
/// `2B × K` (and `2B·P × K` patch scores when requested).
pub fn teacher_scores(
    teacher: &ModelBundle,
    batch: &[ViewSet],
    with_patches: bool,
) -> Result<(Matrix, Option<Matrix>)> {
    let size = teacher.encoder.input_size;
    let mut imgs = Vec::with_capacity(batch.len() * 2);
    for vs in batch {
        for v in &vs.views[..2] {
            if v.height != size || v.width != size {
                return Err(RobError::contract(format!(
                    "teacher only accepts {size}x{size} large views, got {}x{}",
                    v.height, v.width
                )));
            }
            imgs.push(v);
        }
    }
    teacher_scores_on(teacher, &imgs, with_patches)
}

fn teacher_scores_on(
    teacher: &ModelBundle,
    imgs: &[&Image],
    with_patches: bool,
) -> Result<(Matrix, Option<Matrix>)> {
    let mut g = Graph::new();
    let vars = teacher.forward(&mut g, imgs, &mut ForwardOptions::default(), with_patches)?;
    let scores = g.value(vars.scores).clone();
    let patches = vars.patch_scores.map(|p| g.value(p).clone());
    Ok((scores, patches))
}

fn targets_from(
    scores: &Matrix,
    patches: Option<&Matrix>,
    temp: f64,
    center: Option<&[f64]>,
    n_patches: usize,
) -> Vec<DistillTargets> {
    let mut logits = scores.clone();
    if let Some(c) = center {
        for r in 0..logits.rows() {
            for (v, cv) in logits.row_mut(r).iter_mut().zip(c) {
                *v -= cv;
            }
        }
    }
    let probs = softmax_rows(&logits.scale(1.0 / temp));
    let patch_probs = patches.map(|p| softmax_rows(&p.scale(1.0 / temp)));
    (0..scores.rows() / 2)
        .map(|b| DistillTargets {
            teacher_dists: probs.select_rows(&[2 * b, 2 * b + 1]),
            teacher_patch_dists: patch_probs.as_ref().map(|pp| {
                let view = |v: usize| {
                    let start = (2 * b + v) * n_patches;
                    pp.select_rows(&(start..start + n_patches).collect::<Vec<_>>())
                };
                [view(0), view(1)]
            }),
        })
        .collect()
}

/// Checks that a student/teacher pair and an objective fit together.
pub fn check_compatible(
    student: &ModelBundle,
    teacher: &ModelBundle,
    objective: &DistillObjective,
) -> Result<()> {
    objective.validate()?;
    if !teacher.frozen {
        return Err(RobError::contract("the teacher bundle must be frozen"));
    }
    if student.frozen {
        return Err(RobError::contract("the student bundle must be trainable"));
    }
    if student.head.n_prototypes != teacher.head.n_prototypes {
        return Err(RobError::config(format!(
            "student head has K={}, teacher K={}",
            student.head.n_prototypes, teacher.head.n_prototypes
        )));
    }
    if objective.method.masks_student() && student.encoder.family != EncoderFamily::PatchTransformer
    {
        return Err(RobError::config(format!(
            "{} masks student patches and needs a patch_transformer student",
            objective.method.name()
        )));
    }
    if objective.method == Method::Ibot {
        if teacher.encoder.family != EncoderFamily::PatchTransformer {
            return Err(RobError::config(
                "ibot patch loss needs a patch_transformer teacher",
            ));
        }
        if teacher.encoder.patch_size != student.encoder.patch_size
            || teacher.encoder.input_size != student.encoder.input_size
        {
            return Err(RobError::config(format!(
                "ibot patch loss needs matching patch grids: teacher patch {} on {}, student patch {} on {}",
                teacher.encoder.patch_size,
                teacher.encoder.input_size,
                student.encoder.patch_size,
                student.encoder.input_size
            )));
        }
    }
    Ok(())
}

/// Samples the student masks a method needs: iBOT masks the two large views,
/// MSN every view.
pub fn attach_masks(
    batch: &mut [ViewSet],
    student: &ModelBundle,
    objective: &DistillObjective,
    seed: u64,
    step: u64,
) -> Result<()> {
    if !objective.method.masks_student() {
        return Ok(());
    }
    let mut r = rng::stream(seed, &[tag::MASK, step]);
    for vs in batch.iter_mut() {
        let n = vs.n_views();
        let masked_views = if objective.method == Method::Ibot {
            2
        } else {
            n
        };
        vs.masks = (0..n)
            .map(|v| {
                if v < masked_views {
                    let p = student.encoder.n_patches(vs.views[v].height);
                    sample_patch_mask(p, objective.mask_ratio, &mut r).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
    }
    Ok(())
}

/// One RoB update of the student. The teacher only sees the two large views.
pub fn distill_step(
    state: &mut DistillState,
    batch: &mut [ViewSet],
    objective: &DistillObjective,
    optim: &OptimSpec,
    seed: u64,
) -> Result<StepMetrics> {
    check_compatible(&state.student, &state.teacher, objective)?;
    let lr = optim.lr.value(state.step)?;
    let wd = optim.wd.value(state.step)?;
    let n = n_views_of(batch)?;
    attach_masks(batch, &state.student, objective, seed, state.step)?;
    let is_ibot = objective.method == Method::Ibot;

    let (t_scores, t_patches) = teacher_scores(&state.teacher, batch, is_ibot)?;
    let n_patches = state
        .teacher
        .encoder
        .n_patches(state.teacher.encoder.input_size);
    let targets = targets_from(
        &t_scores,
        t_patches.as_ref(),
        objective.teacher_temp,
        None,
        n_patches,
    );

    let mode = if objective.method == Method::Msn {
        MaskMode::Drop
    } else {
        MaskMode::Replace
    };
    let mut g = Graph::new();
    let pass = student_forward(
        &mut g,
        &state.student,
        batch,
        mode,
        Some((seed, state.step)),
        is_ibot,
    )?;

    let (patch_scores, masks) = if is_ibot {
        let mut rows = Vec::new();
        let mut masks = Vec::with_capacity(batch.len());
        for (b, vs) in batch.iter().enumerate() {
            let pair = [0, 1].map(|v| {
                vs.mask(v)
                    .cloned()
                    .unwrap_or_else(|| PatchMask::none(n_patches))
            });
            for (v, m) in pair.iter().enumerate() {
                for &p in &m.masked_indices {
                    rows.push(pass.large.encoder.patch_row(2 * b + v, p).ok_or_else(|| {
                        RobError::contract("masked patch missing from student tokens")
                    })?);
                }
            }
            masks.push(pair);
        }
        let ps = pass.large.patch_scores.expect("requested above");
        let gathered = (!rows.is_empty()).then(|| g.gather_rows(ps, rows));
        (gathered, Some(masks))
    } else {
        (None, None)
    };

    let loss = distill_loss_graph(
        &mut g,
        objective,
        pass.scores,
        n,
        patch_scores,
        &targets,
        masks.as_deref(),
    )?;
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(RobError::contract(format!(
            "non-finite loss at step {}",
            state.step
        )));
    }
    let collapse = {
        let first: Vec<usize> = (0..batch.len()).map(|b| b * n).collect();
        let s = g.value(pass.scores).select_rows(&first);
        mean_pairwise_cosine(&softmax_rows(&s.scale(1.0 / objective.student_temp)))
    };
    let grads = g.backward(loss);
    let grads = g.param_grads(&grads);
    let grad_norm = optimizer_step(
        optim,
        &mut state.optim,
        &mut state.student.params,
        &grads,
        lr,
        wd,
    )?;
    state.step += 1;
    Ok(StepMetrics {
        loss: loss_value,
        grad_norm,
        collapse,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSslConfig {
    pub ema_momentum: ScheduleSpec,
    pub center_momentum: f64,
    pub teacher_temp: f64,
    pub student_temp: f64,
    /// Subtract the running center from teacher logits.
    #[serde(default = "yes")]
    pub centering: bool,
}

fn yes() -> bool {
    true
}

impl BaselineSslConfig {
    pub fn dino(steps: u64) -> Self {
        Self {
            ema_momentum: ScheduleSpec::cosine(0, 0.99, 1.0, steps),
            center_momentum: 0.9,
            teacher_temp: 0.04,
            student_temp: 0.1,
            centering: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ema_momentum.validate()?;
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(RobError::config("center_momentum must lie in [0, 1]"));
        }
        for (n, t) in [
            ("teacher_temp", self.teacher_temp),
            ("student_temp", self.student_temp),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(RobError::config(format!("{n} must be positive, got {t}")));
            }
        }
        Ok(())
    }

    /// The student-side loss: cross-view pairs averaged per pair.
    fn objective(&self) -> DistillObjective {
        DistillObjective {
            method: Method::Dino,
            teacher_temp: self.teacher_temp,
            student_temp: self.student_temp,
            lambda1: 1.0,
            lambda2: 1.0,
            policy: ViewMatchPolicy::Cross,
            anti_collapse_enabled: false,
            normalization: Normalization::PerPair,
            mask_ratio: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineState {
    pub step: u64,
    pub student: ModelBundle,
    /// EMA twin of the student.
    pub teacher: ModelBundle,
    pub center: Vec<f64>,
    pub optim: OptimState,
}

impl BaselineState {
    pub fn new(student: ModelBundle) -> Self {
        let mut teacher = student.clone().into_teacher();
        teacher.params = student.params.clone();
        let k = student.head.n_prototypes;
        Self {
            step: 0,
            student,
            teacher,
            center: vec![0.0; k],
            optim: OptimState::default(),
        }
    }
}

/// `teacher ← m·teacher + (1 − m)·student` over every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, momentum: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(RobError::contract("EMA pair must share one architecture"));
    }
    for (name, e) in student.iter() {
        let t = teacher.value_mut(name).expect("same layout");
        if momentum == 1.0 {
            continue;
        }
        if momentum == 0.0 {
            t.data_mut().copy_from_slice(e.value.data());
            continue;
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(e.value.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}

/// One step of the DINO-style baseline: centered, sharpened EMA-teacher
/// targets on the large views, cross-view student loss, then EMA and center updates.
pub fn baseline_ssl_step(
    state: &mut BaselineState,
    batch: &[ViewSet],
    config: &BaselineSslConfig,
    optim: &OptimSpec,
    seed: u64,
) -> Result<StepMetrics> {
    if !state.teacher.params.same_layout(&state.student.params) {
        return Err(RobError::contract("EMA pair must share one architecture"));
    }
    let lr = optim.lr.value(state.step)?;
    let wd = optim.wd.value(state.step)?;
    let momentum = config.ema_momentum.value(state.step)?;
    let n = n_views_of(batch)?;

    let (t_scores, _) = teacher_scores(&state.teacher, batch, false)?;
    let center = config.centering.then_some(&state.center[..]);
    let targets = targets_from(&t_scores, None, config.teacher_temp, center, 0);
    let collapse = {
        let first: Vec<Vec<f64>> = targets
            .iter()
            .map(|t| t.teacher_dists.row(0).to_vec())
            .collect();
        mean_pairwise_cosine(&Matrix::from_rows(&first)?)
    };

    let mut g = Graph::new();
    let pass = student_forward(
        &mut g,
        &state.student,
        batch,
        MaskMode::Replace,
        Some((seed, state.step)),
        false,
    )?;
    let loss = distill_loss_graph(
        &mut g,
        &config.objective(),
        pass.scores,
        n,
        None,
        &targets,
        None,
    )?;
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(RobError::contract(format!(
            "non-finite loss at step {}",
            state.step
        )));
    }
    let grads = g.backward(loss);
    let grads = g.param_grads(&grads);
    let grad_norm = optimizer_step(
        optim,
        &mut state.optim,
        &mut state.student.params,
        &grads,
        lr,
        wd,
    )?;
    ema_update(&mut state.teacher.params, &state.student.params, momentum)?;
    if config.centering {
        let rows = t_scores.rows() as f64;
        for (k, c) in state.center.iter_mut().enumerate() {
            let mean = (0..t_scores.rows())
                .map(|r| t_scores.get(r, k))
                .sum::<f64>()
                / rows;
            *c = config.center_momentum * *c + (1.0 - config.center_momentum) * mean;
        }
    }
    state.step += 1;
    Ok(StepMetrics {
        loss: loss_value,
        grad_norm,
        collapse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, MultiCropConfig};
    use crate::models::{EncoderConfig, HeadConfig, Role};
    use crate::train::batch::step_batch;

    fn bundle(seed: u64) -> ModelBundle {
        ModelBundle::new(
            EncoderConfig::transformer(1, 16, 2, 4, 16),
            HeadConfig::ssl_default(16, 16, 8, 10),
            seed,
            Role::Student,
        )
        .unwrap()
    }

    #[test]
    fn ema_limits() {
        let a = bundle(1).params;
        let b = bundle(2).params;
        let mut t = a.clone();
        ema_update(&mut t, &b, 1.0).unwrap();
        assert_eq!(t, a);
        ema_update(&mut t, &b, 0.0).unwrap();
        assert_eq!(t.checksum(), b.checksum());
    }

    #[test]
    fn zero_lr_keeps_student_and_teacher_is_untouched() {
        let ds = generate_synthetic_dataset(2, 4, 32, 0).unwrap();
        let mc = MultiCropConfig::with_sizes(16, 8, 2);
        let mut state = DistillState {
            step: 0,
            student: bundle(5),
            teacher: bundle(6).into_teacher(),
            optim: OptimState::default(),
        };
        let mut optim = OptimSpec::adamw(0.0, 0.0, 0.0, 4, 3, 0);
        optim.lr = ScheduleSpec::constant(0.0, 3);
        let before = (state.student.checksum(), state.teacher.checksum());
        for method in Method::ALL {
            let obj = DistillObjective::recipe(method);
            let mut batch = step_batch(&ds, &mc, 0, 0, 4).unwrap();
            state.step = 0;
            let m = distill_step(&mut state, &mut batch, &obj, &optim, 0).unwrap();
            assert!(m.loss.is_finite() && m.loss > 0.0);
        }
        assert_eq!((state.student.checksum(), state.teacher.checksum()), before);
    }

    #[test]
    fn teacher_refuses_small_views() {
        let ds = generate_synthetic_dataset(2, 2, 32, 0).unwrap();
        let mc = MultiCropConfig::with_sizes(16, 8, 2);
        let mut batch = step_batch(&ds, &mc, 0, 0, 2).unwrap();
        for vs in &mut batch {
            vs.views.swap(0, 2);
        }
        assert!(teacher_scores(&bundle(1).into_teacher(), &batch, false).is_err());
    }

    #[test]
    fn msn_masks_every_student_view_and_ibot_only_large_ones() {
        let ds = generate_synthetic_dataset(2, 2, 32, 0).unwrap();
        let mc = MultiCropConfig::with_sizes(16, 8, 2);
        let student = bundle(1);
        let mut batch = step_batch(&ds, &mc, 0, 0, 2).unwrap();
        let mut msn = DistillObjective::recipe(Method::Msn);
        msn.mask_ratio = 0.25;
        attach_masks(&mut batch, &student, &msn, 0, 0).unwrap();
        assert!(batch[0]
            .masks
            .iter()
            .all(|m| m.as_ref().unwrap().n_masked() > 0));
        let ibot = DistillObjective::recipe(Method::Ibot);
        attach_masks(&mut batch, &student, &ibot, 0, 0).unwrap();
        assert!(batch[0].mask(0).is_some() && batch[0].mask(2).is_none());
    }
}
