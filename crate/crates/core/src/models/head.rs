//! Projection heads mapping encoder features to a distribution over K prototypes.

use rob_tensor::{softmax_rows, Graph, Matrix, Var};
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamStore};
use crate::error::{Result, RobError};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// MLP, bottleneck projection, L2 normalization, cosine with learned prototypes.
    SslDefault,
    /// Plain MLP emitting K logits.
    Mlp,
    /// Like `SslDefault`, with the prototype matrix copied from the teacher and frozen.
    Partial,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 3] = [
        HeadVariant::SslDefault,
        HeadVariant::Mlp,
        HeadVariant::Partial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::SslDefault => "ssl_default",
            HeadVariant::Mlp => "mlp",
            HeadVariant::Partial => "partial",
        }
    }

    pub fn has_prototypes(self) -> bool {
        self != HeadVariant::Mlp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub in_dim: usize,
    /// Widths of the hidden MLP layers (GELU after each).
    pub hidden_dims: Vec<usize>,
    /// Projection size before normalization; unused by `Mlp`.
    pub bottleneck_dim: usize,
    pub n_prototypes: usize,
}

impl HeadConfig {
    pub fn ssl_default(
        in_dim: usize,
        hidden: usize,
        bottleneck_dim: usize,
        n_prototypes: usize,
    ) -> Self {
        Self {
            variant: HeadVariant::SslDefault,
            in_dim,
            hidden_dims: vec![hidden, hidden],
            bottleneck_dim,
            n_prototypes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.n_prototypes == 0 || self.hidden_dims.contains(&0) {
            return Err(RobError::config("head dimensions must be positive"));
        }
        if self.variant.has_prototypes() && self.bottleneck_dim == 0 {
            return Err(RobError::config("bottleneck_dim must be positive"));
        }
        if self.variant == HeadVariant::Mlp && self.hidden_dims.len() > 2 {
            return Err(RobError::config(format!(
                "mlp head depth must lie in 1..=3, got {}",
                self.hidden_dims.len() + 1
            )));
        }
        Ok(())
    }

    /// (in, out) of every linear layer, in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let last = if self.variant.has_prototypes() {
            self.bottleneck_dim
        } else {
            self.n_prototypes
        };
        let mut dims = Vec::new();
        let mut prev = self.in_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, last));
        dims
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64, prefix: &str) {
        for (i, (din, dout)) in self.layer_dims().into_iter().enumerate() {
            store.init(
                seed,
                &format!("{prefix}.mlp.{i}.weight"),
                din,
                dout,
                Init::TruncNormal(0.02),
            );
            store.init(
                seed,
                &format!("{prefix}.mlp.{i}.bias"),
                1,
                dout,
                Init::Zeros,
            );
        }
        if self.variant.has_prototypes() {
            store.init(
                seed,
                &format!("{prefix}.prototypes"),
                self.n_prototypes,
                self.bottleneck_dim,
                Init::TruncNormal(1.0),
            );
        }
    }
}

/// Temperature-free scores: cosine similarities to the prototypes, or raw MLP logits.
pub fn head_scores(
    cfg: &HeadConfig,
    store: &ParamStore,
    prefix: &str,
    g: &mut Graph,
    x: Var,
    train: bool,
) -> Var {
    let n_layers = cfg.layer_dims().len();
    let mut h = x;
    for i in 0..n_layers {
        let w = store.leaf(g, &format!("{prefix}.mlp.{i}.weight"), train);
        let b = store.leaf(g, &format!("{prefix}.mlp.{i}.bias"), train);
        let y = g.matmul(h, w);
        h = g.add_row(y, b);
        if i + 1 < n_layers {
            h = g.gelu(h);
        }
    }
    if !cfg.variant.has_prototypes() {
        return h;
    }
    let z = g.l2_normalize(h, NORM_EPS);
    let protos = store.leaf(g, &format!("{prefix}.prototypes"), train);
    let protos = g.l2_normalize(protos, NORM_EPS);
    g.matmul_nt(z, protos)
}

pub fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(RobError::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// Row-wise probabilities `softmax(scores / temperature)` for a batch of features.
pub fn head_forward(
    cfg: &HeadConfig,
    store: &ParamStore,
    prefix: &str,
    features: &Matrix,
    temperature: f64,
) -> Result<Matrix> {
    check_temperature(temperature)?;
    if features.cols() != cfg.in_dim {
        return Err(RobError::contract(format!(
            "head expects {} input features, got {}",
            cfg.in_dim,
            features.cols()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let s = head_scores(cfg, store, prefix, &mut g, x, false);
    Ok(softmax_rows(&g.value(s).scale(1.0 / temperature)))
}

/// Student head config derived from the teacher's. `mlp_depth` counts linear
/// layers and only matters for the `Mlp` variant.
pub fn build_student_head(
    teacher: &HeadConfig,
    variant: HeadVariant,
    student_width: usize,
    mlp_depth: usize,
) -> Result<HeadConfig> {
    if variant == HeadVariant::Partial && !teacher.variant.has_prototypes() {
        return Err(RobError::config(
            "partial student head needs a teacher head with prototypes",
        ));
    }
    let cfg = match variant {
        HeadVariant::SslDefault | HeadVariant::Partial => HeadConfig {
            variant,
            in_dim: student_width,
            ..teacher.clone()
        },
        HeadVariant::Mlp => {
            if !(1..=3).contains(&mlp_depth) {
                return Err(RobError::config(format!(
                    "mlp head depth must lie in 1..=3, got {mlp_depth}"
                )));
            }
            let hidden = teacher
                .hidden_dims
                .first()
                .copied()
                .unwrap_or(student_width);
            HeadConfig {
                variant,
                in_dim: student_width,
                hidden_dims: vec![hidden; mlp_depth - 1],
                bottleneck_dim: 0,
                n_prototypes: teacher.n_prototypes,
            }
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax_oracle(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn projection_on_a_prototype() {
        // single linear layer 3 -> 3 set to the identity; prototypes are the basis
        let cfg = HeadConfig {
            variant: HeadVariant::SslDefault,
            in_dim: 3,
            hidden_dims: vec![],
            bottleneck_dim: 3,
            n_prototypes: 3,
        };
        let mut store = ParamStore::new();
        cfg.init(&mut store, 0, "head");
        let eye = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        *store.value_mut("head.mlp.0.weight").unwrap() = eye.clone();
        *store.value_mut("head.prototypes").unwrap() = eye.scale(2.5);
        let x = Matrix::from_rows(&[vec![4.0, 0.0, 0.0]]).unwrap();
        let p = head_forward(&cfg, &store, "head", &x, 0.1).unwrap();
        let want = softmax_oracle(&[10.0, 0.0, 0.0]);
        for k in 0..3 {
            assert!((p.get(0, k) - want[k]).abs() < 1e-12);
        }
        assert!((p.get(0, 0) - 0.999_909).abs() < 1e-6);
    }

    #[test]
    fn large_temperature_is_near_uniform() {
        let cfg = HeadConfig::ssl_default(8, 16, 4, 10);
        let mut store = ParamStore::new();
        cfg.init(&mut store, 1, "head");
        let x = Matrix::from_vec(2, 8, (0..16).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let p = head_forward(&cfg, &store, "head", &x, 1e6).unwrap();
        let (lo, hi) = p
            .data()
            .iter()
            .fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi - lo < 1e-5);
        assert!(head_forward(&cfg, &store, "head", &x, 0.0).is_err());
        assert!(head_forward(&cfg, &store, "head", &x, -1.0).is_err());
    }

    #[test]
    fn student_heads() {
        let teacher = HeadConfig::ssl_default(256, 128, 64, 3000);
        let mlp = build_student_head(&teacher, HeadVariant::Mlp, 192, 2).unwrap();
        assert_eq!(mlp.layer_dims().last().unwrap().1, 3000);
        assert_eq!(mlp.layer_dims().len(), 2);
        let ssl = build_student_head(&teacher, HeadVariant::SslDefault, 192, 2).unwrap();
        assert_eq!(ssl.layer_dims()[0].0, 192);
        assert_eq!(ssl.hidden_dims, teacher.hidden_dims);
        assert!(build_student_head(&mlp, HeadVariant::Partial, 64, 2).is_err());
        assert!(build_student_head(&teacher, HeadVariant::Mlp, 64, 4).is_err());
    }
}
