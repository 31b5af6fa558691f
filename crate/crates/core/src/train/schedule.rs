use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RobError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    CosineWithWarmup,
    Constant,
}

/// A scalar schedule over `total_steps` steps: linear warmup from
/// `start_value` to `peak_value`, then a half cosine to `end_value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default)]
    pub start_value: f64,
    pub peak_value: f64,
    #[serde(default)]
    pub end_value: f64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn constant(value: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            warmup_steps: 0,
            start_value: value,
            peak_value: value,
            end_value: value,
            total_steps,
        }
    }

    pub fn cosine(warmup_steps: u64, peak_value: f64, end_value: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::CosineWithWarmup,
            warmup_steps,
            start_value: 0.0,
            peak_value,
            end_value,
            total_steps,
        }
    }

    /// Same shape stretched over a new number of steps; warmup keeps its fraction.
    pub fn with_total(&self, total_steps: u64) -> Self {
        let warmup_steps = if self.total_steps == 0 {
            0
        } else {
            (self.warmup_steps as u128 * total_steps as u128 / self.total_steps as u128) as u64
        };
        Self {
            warmup_steps,
            total_steps,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(RobError::config("schedule total_steps must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(RobError::config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if ![self.start_value, self.peak_value, self.end_value]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(RobError::config("schedule values must be finite"));
        }
        Ok(())
    }

    pub fn value(&self, step: u64) -> Result<f64> {
        schedule_value(self, step)
    }
}

pub fn schedule_value(spec: &ScheduleSpec, step: u64) -> Result<f64> {
    if step >= spec.total_steps {
        return Err(RobError::contract(format!(
            "step {step} outside schedule of {} steps",
            spec.total_steps
        )));
    }
    match spec.kind {
        ScheduleKind::Constant => Ok(spec.peak_value),
        ScheduleKind::CosineWithWarmup => {
            if step < spec.warmup_steps {
                let t = step as f64 / spec.warmup_steps as f64;
                return Ok(spec.start_value + (spec.peak_value - spec.start_value) * t);
            }
            let span = spec.total_steps - spec.warmup_steps;
            if span <= 1 {
                return Ok(spec.peak_value);
            }
            // reaches end_value exactly on the last step
            let t = (step - spec.warmup_steps) as f64 / (span - 1) as f64;
            Ok(spec.peak_value + (spec.end_value - spec.peak_value) * 0.5 * (1.0 - (PI * t).cos()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn warmup_boundary_and_ends() {
        let lr = ScheduleSpec::cosine(100, 2e-3, 0.0, 1000);
        assert_eq!(lr.value(0).unwrap(), 0.0);
        assert_eq!(lr.value(100).unwrap(), 2e-3);
        assert_eq!(lr.value(50).unwrap(), 1e-3);
        assert!(lr.value(999).unwrap().abs() < 1e-18);
        assert!(lr.value(1000).is_err());
        let wd = ScheduleSpec::cosine(0, 0.04, 0.4, 1000);
        assert!((wd.value(999).unwrap() - 0.4).abs() < 1e-6);
        assert_eq!(wd.value(0).unwrap(), 0.04);
        assert_eq!(ScheduleSpec::constant(0.3, 5).value(4).unwrap(), 0.3);
    }

    proptest! {
        #[test]
        fn warmup_is_monotone_and_cosine_bounded(
            warmup in 1u64..200,
            extra in 2u64..500,
            peak in 1e-5f64..1.0,
            end in 0.0f64..1.0,
        ) {
            let s = ScheduleSpec::cosine(warmup, peak, end, warmup + extra);
            let mut prev = s.value(0).unwrap();
            for step in 1..=warmup {
                let v = s.value(step).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
            prop_assert_eq!(s.value(warmup).unwrap(), peak);
            let (lo, hi) = (peak.min(end), peak.max(end));
            for step in warmup..warmup + extra {
                let v = s.value(step).unwrap();
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
