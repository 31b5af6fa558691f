//! Graph form of the distillation losses, averaged over a batch of images.

use rob_tensor::{CeTerm, Graph, Matrix, Var};

use super::{
    common_mask_count, normalizer, view_pairs, DistillObjective, DistillTargets, Method, LOG_EPS,
};
use crate::data::PatchMask;
use crate::error::{Result, RobError};

/// Cross-entropy terms of the global loss. Student rows are image-major
/// (`b * n_views + v`), teacher rows are `b * 2 + j`.
pub fn global_terms(
    objective: &DistillObjective,
    batch: usize,
    n_views: usize,
    weight: f64,
) -> Result<Vec<CeTerm>> {
    if n_views < 2 {
        return Err(RobError::contract(
            "at least two views per image are required",
        ));
    }
    let pairs = view_pairs(2, n_views - 2, objective.policy)?;
    let w = weight * normalizer(objective.normalization, n_views, pairs.len());
    let mut terms = Vec::with_capacity(batch * pairs.len());
    for b in 0..batch {
        for &(t, s) in &pairs {
            terms.push(CeTerm {
                target_row: b * 2 + t,
                pred_row: b * n_views + s,
                weight: w,
            });
        }
    }
    Ok(terms)
}

/// Batch-mean distillation loss as a `1 × 1` graph node.
///
/// `student_scores` holds temperature-free head scores for every view,
/// image-major. For iBOT, `patch_scores` holds one row per masked patch,
/// ordered by image, then large view, then `masked_indices`.
pub fn distill_loss_graph(
    g: &mut Graph,
    objective: &DistillObjective,
    student_scores: Var,
    n_views: usize,
    patch_scores: Option<Var>,
    targets: &[DistillTargets],
    masks: Option<&[[PatchMask; 2]]>,
) -> Result<Var> {
    let batch = targets.len();
    if batch == 0 {
        return Err(RobError::contract("empty batch"));
    }
    if g.value(student_scores).rows() != batch * n_views {
        return Err(RobError::contract(format!(
            "{} student rows for {batch} images of {n_views} views",
            g.value(student_scores).rows()
        )));
    }
    if objective.method == Method::Swav && objective.anti_collapse_enabled {
        return Err(RobError::config(
            "swav distillation runs without Sinkhorn-Knopp",
        ));
    }
    let k = g.value(student_scores).cols();
    let mut teacher = Matrix::zeros(batch * 2, k);
    for (b, t) in targets.iter().enumerate() {
        if t.teacher_dists.shape() != (2, k) {
            return Err(RobError::contract(format!(
                "teacher targets have shape {:?}, expected (2, {k})",
                t.teacher_dists.shape()
            )));
        }
        teacher
            .row_mut(2 * b)
            .copy_from_slice(t.teacher_dists.row(0));
        teacher
            .row_mut(2 * b + 1)
            .copy_from_slice(t.teacher_dists.row(1));
    }
    let global_weight = if objective.method == Method::Ibot {
        objective.lambda1
    } else {
        1.0
    };
    let floor = LOG_EPS.ln();
    let scaled = g.scale(student_scores, 1.0 / objective.student_temp);
    let logp = g.log_softmax_clamped(scaled, floor);
    let terms = global_terms(objective, batch, n_views, global_weight / batch as f64)?;
    let global = g.weighted_cross_entropy(logp, teacher, terms);

    if objective.method != Method::Ibot {
        return Ok(global);
    }
    let masks = masks.ok_or_else(|| RobError::contract("ibot loss needs the large-view masks"))?;
    if masks.len() != batch {
        return Err(RobError::contract("one mask pair per image is required"));
    }
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for (b, (t, m)) in targets.iter().zip(masks).enumerate() {
        let n_mask = common_mask_count(m)?;
        if n_mask == 0 {
            continue;
        }
        let tp = t.teacher_patch_dists.as_ref().ok_or_else(|| {
            RobError::contract(format!("image {b}: missing teacher patch targets"))
        })?;
        let w = objective.lambda2 / (2.0 * n_mask as f64) / batch as f64;
        for i in 0..2 {
            for &p in &m[i].masked_indices {
                rows.push(tp[i].row(p).to_vec());
                weights.push(w);
            }
        }
    }
    if rows.is_empty() {
        return Ok(global);
    }
    let patch_scores =
        patch_scores.ok_or_else(|| RobError::contract("ibot loss needs student patch scores"))?;
    if g.value(patch_scores).rows() != rows.len() {
        return Err(RobError::contract(format!(
            "{} student patch rows for {} masked patches",
            g.value(patch_scores).rows(),
            rows.len()
        )));
    }
    let patch_targets = Matrix::from_rows(&rows)?;
    let terms = weights
        .into_iter()
        .enumerate()
        .map(|(r, weight)| CeTerm {
            target_row: r,
            pred_row: r,
            weight,
        })
        .collect();
    let scaled = g.scale(patch_scores, 1.0 / objective.student_temp);
    let plogp = g.log_softmax_clamped(scaled, floor);
    let patch = g.weighted_cross_entropy(plogp, patch_targets, terms);
    Ok(g.add(global, patch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::StudentOutputs;
    use rob_tensor::softmax_rows;

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
            })
            .collect()
    }

    #[test]
    fn graph_matches_reference_for_every_method() {
        let (k, n_views, batch) = (5, 4, 2);
        for method in Method::ALL {
            let mut obj = DistillObjective::recipe(method);
            obj.lambda1 = 0.7;
            obj.lambda2 = 1.3;
            let scores = Matrix::from_vec(batch * n_views, k, lcg(batch * n_views * k, 3)).unwrap();
            let probs = softmax_rows(&scores.scale(1.0 / obj.student_temp));
            let masks = [
                PatchMask::from_masked(4, vec![1, 3]).unwrap(),
                PatchMask::from_masked(4, vec![0, 2]).unwrap(),
            ];
            let patch_scores = Matrix::from_vec(batch * 4, k, lcg(batch * 4 * k, 9)).unwrap();
            let patch_probs = softmax_rows(&patch_scores.scale(1.0 / obj.student_temp));
            let mut targets = Vec::new();
            let mut reference = 0.0;
            for b in 0..batch {
                let t = DistillTargets {
                    teacher_dists: softmax_rows(
                        &Matrix::from_vec(2, k, lcg(2 * k, 20 + b as u64)).unwrap(),
                    ),
                    teacher_patch_dists: Some([
                        softmax_rows(&Matrix::from_vec(4, k, lcg(4 * k, 40 + b as u64)).unwrap()),
                        softmax_rows(&Matrix::from_vec(4, k, lcg(4 * k, 60 + b as u64)).unwrap()),
                    ]),
                };
                let s = StudentOutputs {
                    dists: probs.select_rows(&(b * n_views..(b + 1) * n_views).collect::<Vec<_>>()),
                    patch_dists: Some([
                        patch_probs.select_rows(&[b * 4, b * 4 + 1]),
                        patch_probs.select_rows(&[b * 4 + 2, b * 4 + 3]),
                    ]),
                };
                reference += obj.loss(&t, &s, Some(&masks)).unwrap() / batch as f64;
                targets.push(t);
            }
            let mut g = Graph::new();
            let sv = g.constant(scores);
            let pv = g.constant(patch_scores);
            let all_masks = vec![masks.clone(); batch];
            let loss = distill_loss_graph(
                &mut g,
                &obj,
                sv,
                n_views,
                Some(pv),
                &targets,
                Some(&all_masks),
            )
            .unwrap();
            let got = g.value(loss).item();
            assert!(
                (got - reference).abs() <= 1e-12 * reference.abs(),
                "{method:?}: {got} vs {reference}"
            );
        }
    }
}
