//! Resumable training state. Random streams are keyed by (seed, step), so
//! the step counter and the seed stand in for generator state.

use std::collections::BTreeMap;
use std::path::Path;

use rob_tensor::Matrix;
use serde::{Deserialize, Serialize};

use super::optim::OptimState;
use super::step::{BaselineState, DistillState};
use crate::error::{Result, RobError};
use crate::models::checkpoint::{read_arrays, write_arrays};
use crate::models::ParamStore;

pub const STATE_MAGIC: &[u8; 8] = b"ROBSTATE";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Distill,
    Baseline,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: StateKind,
    step: u64,
    seed: u64,
    optim_t: u64,
}

struct Collected<'a> {
    arrays: Vec<(String, &'a Matrix)>,
}

impl<'a> Collected<'a> {
    fn params(&mut self, prefix: &str, store: &'a ParamStore) {
        for (n, e) in store.iter() {
            self.arrays.push((format!("{prefix}/{n}"), &e.value));
        }
    }

    fn moments(&mut self, prefix: &str, map: &'a BTreeMap<String, Matrix>) {
        for (n, m) in map {
            self.arrays.push((format!("{prefix}/{n}"), m));
        }
    }
}

fn write(
    path: &Path,
    kind: StateKind,
    step: u64,
    seed: u64,
    optim: &OptimState,
    c: Collected<'_>,
    extra: Option<(&str, &Matrix)>,
) -> Result<String> {
    let meta = serde_json::to_value(StateMeta {
        kind,
        step,
        seed,
        optim_t: optim.t,
    })
    .expect("meta serializes");
    let mut arrays: Vec<(&str, &Matrix)> = c.arrays.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    if let Some(e) = extra {
        arrays.push(e);
    }
    write_arrays(path, STATE_MAGIC, meta, &arrays)
}

pub fn save_distill_state(path: &Path, state: &DistillState, seed: u64) -> Result<String> {
    let mut c = Collected { arrays: Vec::new() };
    c.params("student", &state.student.params);
    c.moments("m", &state.optim.first);
    c.moments("v", &state.optim.second);
    write(
        path,
        StateKind::Distill,
        state.step,
        seed,
        &state.optim,
        c,
        None,
    )
}

pub fn save_baseline_state(path: &Path, state: &BaselineState, seed: u64) -> Result<String> {
    let mut c = Collected { arrays: Vec::new() };
    c.params("student", &state.student.params);
    c.params("teacher", &state.teacher.params);
    c.moments("m", &state.optim.first);
    c.moments("v", &state.optim.second);
    let center = Matrix::row_vector(&state.center);
    write(
        path,
        StateKind::Baseline,
        state.step,
        seed,
        &state.optim,
        c,
        Some(("center", &center)),
    )
}

struct Loaded {
    meta: StateMeta,
    groups: BTreeMap<String, BTreeMap<String, Matrix>>,
}

fn load(path: &Path, kind: StateKind, seed: u64) -> Result<Loaded> {
    let (meta, arrays, _) = read_arrays(path, STATE_MAGIC, "training state")?;
    let meta: StateMeta = serde_json::from_value(meta).map_err(|e| RobError::Format {
        what: "training state",
        reason: e.to_string(),
    })?;
    if meta.kind != kind {
        return Err(RobError::contract(format!(
            "state file holds {:?} state, expected {kind:?}",
            meta.kind
        )));
    }
    if meta.seed != seed {
        return Err(RobError::contract(format!(
            "state was written with seed {}, run uses {seed}",
            meta.seed
        )));
    }
    let mut groups: BTreeMap<String, BTreeMap<String, Matrix>> = BTreeMap::new();
    for (name, m) in arrays {
        let (group, rest) = name.split_once('/').unwrap_or(("", name.as_str()));
        groups
            .entry(group.to_string())
            .or_default()
            .insert(rest.to_string(), m);
    }
    Ok(Loaded { meta, groups })
}

fn restore_params(store: &mut ParamStore, values: Option<&BTreeMap<String, Matrix>>) -> Result<()> {
    let values = values.ok_or_else(|| RobError::contract("state file lacks parameters"))?;
    if values.len() != store.len() {
        return Err(RobError::contract(
            "state parameters do not match the model",
        ));
    }
    for (name, m) in values {
        let dst = store
            .value_mut(name)
            .ok_or_else(|| RobError::contract(format!("state has unknown parameter {name}")))?;
        if dst.shape() != m.shape() {
            return Err(RobError::contract(format!("shape mismatch for {name}")));
        }
        *dst = m.clone();
    }
    Ok(())
}

fn restore_optim(optim: &mut OptimState, l: &mut Loaded) {
    optim.t = l.meta.optim_t;
    optim.first = l.groups.remove("m").unwrap_or_default();
    optim.second = l.groups.remove("v").unwrap_or_default();
}

pub fn restore_distill_state(path: &Path, state: &mut DistillState, seed: u64) -> Result<()> {
    let mut l = load(path, StateKind::Distill, seed)?;
    restore_params(&mut state.student.params, l.groups.get("student"))?;
    restore_optim(&mut state.optim, &mut l);
    state.step = l.meta.step;
    Ok(())
}

pub fn restore_baseline_state(path: &Path, state: &mut BaselineState, seed: u64) -> Result<()> {
    let mut l = load(path, StateKind::Baseline, seed)?;
    restore_params(&mut state.student.params, l.groups.get("student"))?;
    restore_params(&mut state.teacher.params, l.groups.get("teacher"))?;
    let center = l
        .groups
        .get("")
        .and_then(|g| g.get("center"))
        .ok_or_else(|| RobError::contract("state file lacks the center"))?;
    if center.len() != state.center.len() {
        return Err(RobError::contract("center length does not match the head"));
    }
    state.center = center.data().to_vec();
    restore_optim(&mut state.optim, &mut l);
    state.step = l.meta.step;
    Ok(())
}
