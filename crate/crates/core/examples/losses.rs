//! Evaluates the four distillation losses on a small hand-built instance.
//!
//! cargo run --release --example losses

use rob::data::PatchMask;
use rob::objectives::{
    mean_entropy, rob_dino_loss, rob_ibot_loss, rob_msn_loss, rob_swav_loss, DistillTargets,
    StudentOutputs, ViewMatchPolicy,
};
use rob_tensor::{softmax_rows, Matrix};

fn dists(rows: usize, k: usize, shift: f64) -> Matrix {
    let logits: Vec<f64> = (0..rows * k)
        .map(|i| ((i as f64 + shift) * 0.7).sin() * 2.0)
        .collect();
    softmax_rows(&Matrix::from_vec(rows, k, logits).expect("shape"))
}

fn main() -> rob::Result<()> {
    let (k, n_views, n_patches) = (4, 4, 4);
    let targets = DistillTargets {
        teacher_dists: dists(2, k, 0.0),
        teacher_patch_dists: Some([dists(n_patches, k, 1.0), dists(n_patches, k, 2.0)]),
    };
    let student = StudentOutputs {
        dists: dists(n_views, k, 3.0),
        patch_dists: Some([dists(2, k, 4.0), dists(2, k, 5.0)]),
    };
    let masks = [
        PatchMask::from_masked(n_patches, vec![0, 3])?,
        PatchMask::from_masked(n_patches, vec![1, 2])?,
    ];

    for policy in [ViewMatchPolicy::Identical, ViewMatchPolicy::Cross] {
        println!("{} policy", policy.name());
        println!("  dino {:.6}", rob_dino_loss(&targets, &student, policy)?);
        println!("  msn  {:.6}", rob_msn_loss(&targets, &student, policy)?);
        println!(
            "  swav {:.6}",
            rob_swav_loss(&targets, &student, policy, false)?
        );
    }
    println!(
        "ibot (λ1=1, λ2=1) {:.6}",
        rob_ibot_loss(&targets, &student, &masks, 1.0, 1.0)?
    );

    // A student that reproduces the teacher on the two large views sits at the minimum.
    let copy = StudentOutputs {
        dists: targets.teacher_dists.clone(),
        patch_dists: None,
    };
    println!(
        "copied student: loss {:.6} = teacher entropy {:.6}",
        rob_dino_loss(&targets, &copy, ViewMatchPolicy::Identical)?,
        mean_entropy(&targets.teacher_dists)
    );
    Ok(())
}
