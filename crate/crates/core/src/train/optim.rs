use std::collections::BTreeMap;

use rob_tensor::Matrix;
use serde::{Deserialize, Serialize};

use super::schedule::ScheduleSpec;
use crate::error::{Result, RobError};
use crate::models::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Adamw,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSpec {
    pub algorithm: Algorithm,
    pub lr: ScheduleSpec,
    pub wd: ScheduleSpec,
    pub batch_size: usize,
    /// Optimizer steps; schedules are stretched to this length.
    pub steps: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Recipe-only metadata, e.g. the LARS settings of a published recipe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe_note: Option<String>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_momentum() -> f64 {
    0.9
}

const ADAM_EPS: f64 = 1e-8;

impl OptimSpec {
    pub fn adamw(
        peak_lr: f64,
        wd_start: f64,
        wd_end: f64,
        batch_size: usize,
        steps: u64,
        warmup: u64,
    ) -> Self {
        Self {
            algorithm: Algorithm::Adamw,
            lr: ScheduleSpec::cosine(warmup, peak_lr, 0.0, steps),
            wd: ScheduleSpec::cosine(0, wd_start, wd_end, steps),
            batch_size,
            steps,
            grad_clip: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
            momentum: default_momentum(),
            recipe_note: None,
        }
    }

    /// The same recipe over a different number of steps.
    pub fn with_steps(&self, steps: u64) -> Self {
        Self {
            lr: self.lr.with_total(steps),
            wd: self.wd.with_total(steps),
            steps,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(RobError::config("optimization.steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(RobError::config("optimization.batch_size must be positive"));
        }
        self.lr.validate()?;
        self.wd.validate()?;
        if self.lr.total_steps != self.steps || self.wd.total_steps != self.steps {
            return Err(RobError::config(format!(
                "lr/wd schedules must span optimization.steps = {}",
                self.steps
            )));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(RobError::config("grad_clip must be positive"));
        }
        for (n, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(RobError::config(format!("{n} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Decay applies to multi-row matrices only; biases, norm gains and single
/// tokens are exempt.
pub fn decays(value: &Matrix) -> bool {
    value.rows() > 1
}

/// Moment buffers, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub t: u64,
    pub first: BTreeMap<String, Matrix>,
    pub second: BTreeMap<String, Matrix>,
}

pub fn global_norm(grads: &BTreeMap<String, Matrix>) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// One update of every parameter that has a gradient. Returns the gradient
/// norm before clipping.
pub fn optimizer_step(
    spec: &OptimSpec,
    state: &mut OptimState,
    params: &mut ParamStore,
    grads: &BTreeMap<String, Matrix>,
    lr: f64,
    wd: f64,
) -> Result<f64> {
    let norm = global_norm(grads);
    let clip = match spec.grad_clip {
        Some(c) if norm > c => c / (norm + 1e-6),
        _ => 1.0,
    };
    state.t += 1;
    let t = state.t as f64;
    for (name, grad) in grads {
        if !params.is_trainable(name) {
            return Err(RobError::contract(format!(
                "gradient for frozen parameter {name}"
            )));
        }
        let value = params.value_mut(name).expect("checked above");
        if value.shape() != grad.shape() {
            return Err(RobError::contract(format!(
                "gradient shape mismatch for {name}"
            )));
        }
        let decay = if decays(value) { wd } else { 0.0 };
        match spec.algorithm {
            Algorithm::Adamw => {
                let m = state
                    .first
                    .entry(name.clone())
                    .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                let v = state
                    .second
                    .entry(name.clone())
                    .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                let bc1 = 1.0 - spec.beta1.powf(t);
                let bc2 = 1.0 - spec.beta2.powf(t);
                for i in 0..grad.len() {
                    let gi = grad.data()[i] * clip;
                    let mi = spec.beta1 * m.data()[i] + (1.0 - spec.beta1) * gi;
                    let vi = spec.beta2 * v.data()[i] + (1.0 - spec.beta2) * gi * gi;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let w = &mut value.data_mut()[i];
                    *w -= lr * decay * *w;
                    *w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                }
            }
            Algorithm::SgdMomentum => {
                let buf = state
                    .first
                    .entry(name.clone())
                    .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                for i in 0..grad.len() {
                    let w = value.data()[i];
                    let gi = grad.data()[i] * clip + decay * w;
                    let b = spec.momentum * buf.data()[i] + gi;
                    buf.data_mut()[i] = b;
                    value.data_mut()[i] = w - lr * b;
                }
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Init;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.init(0, "w.weight", 3, 2, Init::TruncNormal(1.0));
        s.init(0, "w.bias", 1, 2, Init::TruncNormal(1.0));
        s
    }

    fn grads(s: &ParamStore) -> BTreeMap<String, Matrix> {
        s.iter()
            .map(|(n, e)| (n.clone(), e.value.scale(2.0)))
            .collect()
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let spec = OptimSpec::adamw(1e-3, 0.04, 0.4, 4, 10, 2);
        let mut s = store();
        let before = s.clone();
        let g = grads(&s);
        optimizer_step(&spec, &mut OptimState::default(), &mut s, &g, 0.0, 0.4).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // with bias correction the first update is lr * sign(g) (up to eps)
        let spec = OptimSpec::adamw(1e-3, 0.0, 0.0, 4, 10, 0);
        let mut s = store();
        let before = s.clone();
        let g = grads(&s);
        optimizer_step(&spec, &mut OptimState::default(), &mut s, &g, 0.01, 0.0).unwrap();
        for (name, e) in s.iter() {
            let b = before.get(name).unwrap();
            for (x, y) in e.value.data().iter().zip(b.data()) {
                assert!(((y - x).abs() - 0.01).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decay_skips_vectors() {
        let spec = OptimSpec::adamw(1e-3, 0.0, 0.0, 4, 10, 0);
        let mut s = store();
        let before = s.clone();
        let zero: BTreeMap<String, Matrix> = s
            .iter()
            .map(|(n, e)| (n.clone(), Matrix::zeros(e.value.rows(), e.value.cols())))
            .collect();
        optimizer_step(&spec, &mut OptimState::default(), &mut s, &zero, 0.1, 0.5).unwrap();
        assert_eq!(s.get("w.bias"), before.get("w.bias"));
        let w = s.get("w.weight").unwrap();
        let expect = before.get("w.weight").unwrap().scale(1.0 - 0.05);
        for (x, y) in w.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_parameters_reject_gradients() {
        let spec = OptimSpec::adamw(1e-3, 0.0, 0.0, 4, 10, 0);
        let mut s = store();
        s.set_trainable("w.bias", false);
        let g = grads(&s);
        assert!(optimizer_step(&spec, &mut OptimState::default(), &mut s, &g, 0.1, 0.0).is_err());
    }
}
