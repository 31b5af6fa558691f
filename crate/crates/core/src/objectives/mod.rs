//! Distillation losses over teacher/student distributions.
//!
//! The free functions here work on plain probability matrices and are the
//! reference values; [`terms`] builds the same sums as cross-entropy terms
//! for the autograd graph.

pub mod terms;

use rob_tensor::Matrix;
use serde::{Deserialize, Serialize};

use crate::data::PatchMask;
use crate::error::{Result, RobError};

/// Probabilities are clamped at this value before taking the log.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dino,
    Ibot,
    Swav,
    Msn,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dino, Method::Ibot, Method::Swav, Method::Msn];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dino => "dino",
            Method::Ibot => "ibot",
            Method::Swav => "swav",
            Method::Msn => "msn",
        }
    }

    /// Student views are masked: iBOT replaces tokens, MSN drops them.
    pub fn masks_student(self) -> bool {
        matches!(self, Method::Ibot | Method::Msn)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMatchPolicy {
    /// Large student view i targets teacher view i.
    #[default]
    Identical,
    /// Large student view i targets teacher view 1 - i.
    Cross,
}

impl ViewMatchPolicy {
    pub fn name(self) -> &'static str {
        match self {
            ViewMatchPolicy::Identical => "identical",
            ViewMatchPolicy::Cross => "cross",
        }
    }
}

/// How the summed cross-entropy terms are scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the number of views N.
    #[default]
    ByViews,
    /// Divide by the number of (teacher, student) pairs.
    PerPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillObjective {
    pub method: Method,
    pub teacher_temp: f64,
    pub student_temp: f64,
    #[serde(default = "one")]
    pub lambda1: f64,
    #[serde(default = "one")]
    pub lambda2: f64,
    #[serde(default)]
    pub policy: ViewMatchPolicy,
    #[serde(default)]
    pub anti_collapse_enabled: bool,
    #[serde(default)]
    pub normalization: Normalization,
    /// Fraction of student patches masked (iBOT, MSN).
    #[serde(default)]
    pub mask_ratio: f64,
}

fn one() -> f64 {
    1.0
}

impl DistillObjective {
    /// Temperatures and masking of each method's published recipe.
    pub fn recipe(method: Method) -> Self {
        let (teacher_temp, student_temp, mask_ratio) = match method {
            Method::Dino => (0.07, 0.1, 0.0),
            Method::Ibot => (0.07, 0.1, 0.3),
            Method::Swav => (0.03, 0.1, 0.0),
            Method::Msn => (0.1, 0.1, 0.05),
        };
        Self {
            method,
            teacher_temp,
            student_temp,
            lambda1: 1.0,
            lambda2: 1.0,
            policy: ViewMatchPolicy::Identical,
            anti_collapse_enabled: false,
            normalization: Normalization::ByViews,
            mask_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("teacher_temp", self.teacher_temp),
            ("student_temp", self.student_temp),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(RobError::config(format!(
                    "{name} must be positive, got {t}"
                )));
            }
        }
        if self.anti_collapse_enabled {
            return Err(RobError::config(format!(
                "anti_collapse_enabled must be false for {} distillation",
                self.method.name()
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(RobError::config(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !self.method.masks_student() && self.mask_ratio != 0.0 {
            return Err(RobError::config(format!(
                "{} does not mask student views",
                self.method.name()
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(RobError::config("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// Dispatches to the method's loss. `masks` are the two large-view masks (iBOT only).
    pub fn loss(
        &self,
        targets: &DistillTargets,
        student: &StudentOutputs,
        masks: Option<&[PatchMask; 2]>,
    ) -> Result<f64> {
        match self.method {
            Method::Dino => rob_dino_loss_with(targets, student, self.policy, self.normalization),
            Method::Msn => rob_msn_loss_with(targets, student, self.policy, self.normalization),
            Method::Swav => {
                rob_swav_loss(targets, student, self.policy, self.anti_collapse_enabled)?;
                rob_dino_loss_with(targets, student, self.policy, self.normalization)
            }
            Method::Ibot => {
                let masks = masks
                    .ok_or_else(|| RobError::contract("ibot loss needs the large-view masks"))?;
                rob_ibot_loss_with(
                    targets,
                    student,
                    masks,
                    self.lambda1,
                    self.lambda2,
                    self.policy,
                    self.normalization,
                )
            }
        }
    }
}

/// Frozen-teacher distributions for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTargets {
    /// `2 × K`, one row per large view.
    pub teacher_dists: Matrix,
    /// Per large view, `n_patches × K` (iBOT only).
    pub teacher_patch_dists: Option<[Matrix; 2]>,
}

/// Student distributions for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentOutputs {
    /// `N × K`, one row per view.
    pub dists: Matrix,
    /// Per large view, one row per masked patch in `masked_indices` order (iBOT only).
    pub patch_dists: Option<[Matrix; 2]>,
}

pub fn cross_entropy(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(RobError::contract(format!(
            "cross-entropy dimension mismatch: {} vs {}",
            target.len(),
            pred.len()
        )));
    }
    Ok(-target
        .iter()
        .zip(pred)
        .map(|(t, p)| t * p.max(LOG_EPS).ln())
        .sum::<f64>())
}

/// `(teacher_view, student_view)` pairs. Small views pair with both large teacher views.
pub fn view_pairs(
    n_large: usize,
    n_small: usize,
    policy: ViewMatchPolicy,
) -> Result<Vec<(usize, usize)>> {
    if n_large != 2 {
        return Err(RobError::contract(format!(
            "n_large must be 2, got {n_large}"
        )));
    }
    let mut pairs = match policy {
        ViewMatchPolicy::Identical => vec![(0, 0), (1, 1)],
        ViewMatchPolicy::Cross => vec![(1, 0), (0, 1)],
    };
    for i in 2..2 + n_small {
        pairs.push((0, i));
        pairs.push((1, i));
    }
    Ok(pairs)
}

pub fn normalizer(normalization: Normalization, n_views: usize, n_pairs: usize) -> f64 {
    match normalization {
        Normalization::ByViews => 1.0 / n_views as f64,
        Normalization::PerPair => 1.0 / n_pairs as f64,
    }
}

fn check_shapes(targets: &DistillTargets, student: &StudentOutputs) -> Result<usize> {
    let (tr, tk) = targets.teacher_dists.shape();
    let (n, sk) = student.dists.shape();
    if tr != 2 {
        return Err(RobError::contract(format!(
            "expected 2 teacher rows, got {tr}"
        )));
    }
    if n < 2 {
        return Err(RobError::contract(format!(
            "expected at least 2 student rows, got {n}"
        )));
    }
    if tk != sk {
        return Err(RobError::contract(format!(
            "teacher K={tk} differs from student K={sk}"
        )));
    }
    Ok(n)
}

pub fn rob_dino_loss(
    targets: &DistillTargets,
    student: &StudentOutputs,
    policy: ViewMatchPolicy,
) -> Result<f64> {
    rob_dino_loss_with(targets, student, policy, Normalization::ByViews)
}

pub fn rob_dino_loss_with(
    targets: &DistillTargets,
    student: &StudentOutputs,
    policy: ViewMatchPolicy,
    normalization: Normalization,
) -> Result<f64> {
    let n = check_shapes(targets, student)?;
    let pairs = view_pairs(2, n - 2, policy)?;
    let mut total = 0.0;
    for &(t, s) in &pairs {
        total += cross_entropy(targets.teacher_dists.row(t), student.dists.row(s))?;
    }
    Ok(total * normalizer(normalization, n, pairs.len()))
}

/// Same formula as DINO; the masking happened when the student views were encoded.
pub fn rob_msn_loss(
    targets: &DistillTargets,
    student: &StudentOutputs,
    policy: ViewMatchPolicy,
) -> Result<f64> {
    rob_dino_loss(targets, student, policy)
}

pub fn rob_msn_loss_with(
    targets: &DistillTargets,
    student: &StudentOutputs,
    policy: ViewMatchPolicy,
    normalization: Normalization,
) -> Result<f64> {
    rob_dino_loss_with(targets, student, policy, normalization)
}

/// Without Sinkhorn-Knopp the SwAV loss is the DINO loss.
pub fn rob_swav_loss(
    targets: &DistillTargets,
    student: &StudentOutputs,
    policy: ViewMatchPolicy,
    anti_collapse_enabled: bool,
) -> Result<f64> {
    if anti_collapse_enabled {
        return Err(RobError::config(
            "swav distillation runs without Sinkhorn-Knopp",
        ));
    }
    rob_dino_loss(targets, student, policy)
}

/// Masked-patch count shared by both large views.
pub fn common_mask_count(masks: &[PatchMask; 2]) -> Result<usize> {
    if masks[0].n_masked() != masks[1].n_masked() {
        return Err(RobError::contract(format!(
            "large views mask {} and {} patches; counts must match",
            masks[0].n_masked(),
            masks[1].n_masked()
        )));
    }
    Ok(masks[0].n_masked())
}

pub fn rob_ibot_loss(
    targets: &DistillTargets,
    student: &StudentOutputs,
    masks: &[PatchMask; 2],
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    rob_ibot_loss_with(
        targets,
        student,
        masks,
        lambda1,
        lambda2,
        ViewMatchPolicy::Identical,
        Normalization::ByViews,
    )
}

pub fn rob_ibot_loss_with(
    targets: &DistillTargets,
    student: &StudentOutputs,
    masks: &[PatchMask; 2],
    lambda1: f64,
    lambda2: f64,
    policy: ViewMatchPolicy,
    normalization: Normalization,
) -> Result<f64> {
    let global = rob_dino_loss_with(targets, student, policy, normalization)?;
    let n_mask = common_mask_count(masks)?;
    if n_mask == 0 {
        return Ok(lambda1 * global);
    }
    let (Some(tp), Some(sp)) = (&targets.teacher_patch_dists, &student.patch_dists) else {
        return Err(RobError::contract(
            "ibot loss needs teacher and student patch distributions",
        ));
    };
    let mut patch = 0.0;
    for i in 0..2 {
        if sp[i].rows() != masks[i].n_masked() {
            return Err(RobError::contract(format!(
                "view {i}: {} student patch rows for {} masked patches",
                sp[i].rows(),
                masks[i].n_masked()
            )));
        }
        if tp[i].rows() != masks[i].n_patches {
            return Err(RobError::contract(format!(
                "view {i}: {} teacher patch rows for {} patches",
                tp[i].rows(),
                masks[i].n_patches
            )));
        }
        for (j, &p) in masks[i].masked_indices.iter().enumerate() {
            patch += cross_entropy(tp[i].row(p), sp[i].row(j))?;
        }
    }
    Ok(lambda1 * global + lambda2 / (2.0 * n_mask as f64) * patch)
}

/// Mean entropy of the teacher rows; the value of the identical-policy DINO
/// loss when each student row equals its teacher row and there are no small views.
pub fn mean_entropy(dists: &Matrix) -> f64 {
    let total: f64 = (0..dists.rows())
        .map(|r| cross_entropy(dists.row(r), dists.row(r)).expect("same length"))
        .sum();
    total / dists.rows() as f64
}

/// `KL(t ‖ s)` per row pair, averaged.
pub fn mean_kl(teacher: &Matrix, student: &Matrix) -> f64 {
    let mut total = 0.0;
    for r in 0..teacher.rows() {
        for (t, s) in teacher.row(r).iter().zip(student.row(r)) {
            if *t > 0.0 {
                total += t * (t.ln() - s.max(LOG_EPS).ln());
            }
        }
    }
    total / teacher.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn uniform(rows: usize, k: usize) -> Matrix {
        Matrix::filled(rows, k, 1.0 / k as f64)
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-15);
        assert!((cross_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-15);
        let oracle = -0.7 * 0.6f64.ln() - 0.3 * 0.4f64.ln();
        assert!((cross_entropy(&[0.7, 0.3], &[0.6, 0.4]).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 0.632_47).abs() < 1e-5);
        assert!(cross_entropy(&[1.0], &[0.5, 0.5]).is_err());
        // clamp keeps the value finite
        assert!((cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn pair_enumeration() {
        let p = view_pairs(2, 8, ViewMatchPolicy::Identical).unwrap();
        assert_eq!(p.len(), 18);
        assert_eq!(&p[..2], &[(0, 0), (1, 1)]);
        let mut hand = vec![(0, 0), (1, 1)];
        for i in 2..10 {
            hand.extend([(0, i), (1, i)]);
        }
        assert_eq!(p, hand);
        assert_eq!(
            view_pairs(2, 0, ViewMatchPolicy::Cross).unwrap(),
            vec![(1, 0), (0, 1)]
        );
        let c = view_pairs(2, 4, ViewMatchPolicy::Cross).unwrap();
        let i = view_pairs(2, 4, ViewMatchPolicy::Identical).unwrap();
        assert_eq!(c[2..], i[2..]);
        assert!(view_pairs(3, 1, ViewMatchPolicy::Identical).is_err());
    }

    #[test]
    fn uniform_instances() {
        let t = DistillTargets {
            teacher_dists: uniform(2, 2),
            teacher_patch_dists: Some([uniform(16, 2), uniform(16, 2)]),
        };
        let s = StudentOutputs {
            dists: uniform(3, 2),
            patch_dists: Some([uniform(3, 2), uniform(3, 2)]),
        };
        let dino = rob_dino_loss(&t, &s, ViewMatchPolicy::Identical).unwrap();
        assert!((dino - 4.0 / 3.0 * LN_2).abs() < 1e-9);
        let masks = [
            PatchMask::from_masked(16, vec![0, 4, 7]).unwrap(),
            PatchMask::from_masked(16, vec![1, 2, 15]).unwrap(),
        ];
        let ibot = rob_ibot_loss(&t, &s, &masks, 0.0, 1.0).unwrap();
        assert!((ibot - LN_2).abs() < 1e-9);
        let only_global = rob_ibot_loss(&t, &s, &masks, 1.0, 0.0).unwrap();
        assert_eq!(only_global, dino);
        assert_eq!(
            rob_swav_loss(&t, &s, ViewMatchPolicy::Identical, false).unwrap(),
            dino
        );
        assert!(rob_swav_loss(&t, &s, ViewMatchPolicy::Identical, true).is_err());
    }

    #[test]
    fn objective_validation() {
        let mut o = DistillObjective::recipe(Method::Swav);
        assert_eq!((o.teacher_temp, o.student_temp), (0.03, 0.1));
        o.anti_collapse_enabled = true;
        assert!(o.validate().is_err());
        let mut o = DistillObjective::recipe(Method::Dino);
        o.mask_ratio = 0.1;
        assert!(o.validate().is_err());
        assert!(DistillObjective::recipe(Method::Msn).validate().is_ok());
    }
}
