use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng as _;
use rob_tensor::{Graph, Matrix, Var};
use sha2::{Digest, Sha256};

use crate::error::{Result, RobError};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Matrix,
    pub trainable: bool,
}

/// Named parameter matrices of one model, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

/// Initialization schemes. Each parameter draws from its own stream keyed
/// by (seed, name), so values do not depend on creation order.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) truncated to ±2 std.
    TruncNormal(f64),
    /// Normal(0, sqrt(2 / fan_in)).
    KaimingNormal {
        fan_in: usize,
    },
}

fn name_tag(name: &str) -> u64 {
    let h = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

fn standard_normal(r: &mut rng::Rng) -> f64 {
    let u1: f64 = r.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(&mut self, seed: u64, name: &str, rows: usize, cols: usize, init: Init) {
        let mut r = rng::stream(seed, &[rng::tag::INIT, name_tag(name)]);
        let mut m = Matrix::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Ones => m.data_mut().fill(1.0),
            Init::TruncNormal(std) => {
                for v in m.data_mut() {
                    let mut z = standard_normal(&mut r);
                    while z.abs() > 2.0 {
                        z = standard_normal(&mut r);
                    }
                    *v = z * std;
                }
            }
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                for v in m.data_mut() {
                    *v = standard_normal(&mut r) * std;
                }
            }
        }
        self.insert(name, m, true);
    }

    pub fn insert(&mut self, name: &str, value: Matrix, trainable: bool) {
        self.entries
            .insert(name.to_string(), ParamEntry { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| RobError::NotFound(format!("parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(e) = self.entries.get_mut(name) {
            e.trainable = trainable;
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes, trainability and raw bytes.
    pub fn checksum(&self) -> String {
        self.checksum_filtered(|_| true)
    }

    pub fn checksum_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, e) in self.entries.iter().filter(|(n, _)| keep(n)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update([e.trainable as u8]);
            h.update((e.value.rows() as u64).to_le_bytes());
            h.update((e.value.cols() as u64).to_le_bytes());
            h.update(e.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Leaf node for `name`: a registered trainable parameter when `train`
    /// is set and the entry is trainable, a constant otherwise.
    pub fn leaf(&self, g: &mut Graph, name: &str, train: bool) -> Var {
        let e = self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"));
        if train && e.trainable {
            g.param(name, &e.value)
        } else {
            g.constant(e.value.clone())
        }
    }

    /// Copies every value of `other` whose name and shape match.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            let src = other
                .entries
                .get(name)
                .ok_or_else(|| RobError::contract(format!("parameter {name} missing in source")))?;
            if src.value.shape() != e.value.shape() {
                return Err(RobError::contract(format!("shape mismatch for {name}")));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.value.shape() == b.value.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent_and_seeded() {
        let mut a = ParamStore::new();
        a.init(3, "x", 4, 4, Init::TruncNormal(0.02));
        a.init(3, "y", 2, 2, Init::KaimingNormal { fan_in: 8 });
        let mut b = ParamStore::new();
        b.init(3, "y", 2, 2, Init::KaimingNormal { fan_in: 8 });
        b.init(3, "x", 4, 4, Init::TruncNormal(0.02));
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let mut c = ParamStore::new();
        c.init(4, "x", 4, 4, Init::TruncNormal(0.02));
        assert_ne!(a.get("x"), c.get("x"));
        assert!(a.get("x").unwrap().max_abs() <= 0.04);
    }

    #[test]
    fn checksum_sees_every_bit() {
        let mut a = ParamStore::new();
        a.init(0, "w", 3, 3, Init::TruncNormal(1.0));
        let before = a.checksum();
        let v = a.value_mut("w").unwrap();
        let bits = v.data()[4].to_bits() ^ 1;
        v.data_mut()[4] = f64::from_bits(bits);
        assert_ne!(before, a.checksum());
    }
}
