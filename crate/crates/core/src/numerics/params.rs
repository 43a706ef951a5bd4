use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use super::{NumericsError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<(), NumericsError> {
        if self.entries.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), NumericsError> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    /// Overwrites a parameter's value, keeping its shape. Frozen entries are refused.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut [f64])) -> Result<(), NumericsError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        if !p.trainable {
            return Err(NumericsError::FrozenParam(name.to_string()));
        }
        f(p.value.data_mut());
        if !p.value.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "update".into(),
                location: name.to_string(),
            });
        }
        Ok(())
    }

    /// Sets a single entry regardless of the trainable flag; used for finite differences.
    pub(crate) fn poke(&mut self, name: &str, index: usize, value: f64) {
        if let Some(p) = self.entries.get_mut(name) {
            p.value.data_mut()[index] = value;
        }
    }

    /// SHA-256 over names, shapes and values; equal hashes mean identical stores.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) initialization.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}
