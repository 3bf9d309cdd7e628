//! Named parameter storage with group labels and checksums.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the model a tensor belongs to. Group labels drive the
/// freeze/train selectors during fine-tuning and the pruning/perturbation
/// surgeries during verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Vision,
    Projector,
    Embedding,
    Attention,
    Mlp,
    Head,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Vision,
        Group::Projector,
        Group::Embedding,
        Group::Attention,
        Group::Mlp,
        Group::Head,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Vision => "vision",
            Group::Projector => "projector",
            Group::Embedding => "embedding",
            Group::Attention => "attention",
            Group::Mlp => "mlp",
            Group::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Result<Group> {
        match s {
            "vision" => Ok(Group::Vision),
            "projector" => Ok(Group::Projector),
            "embedding" => Ok(Group::Embedding),
            "attention" => Ok(Group::Attention),
            "mlp" => Ok(Group::Mlp),
            "head" => Ok(Group::Head),
            other => Err(Error::InvalidConfig(format!("unknown group \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entry {
    pub tensor: Tensor,
    pub group: Group,
}

/// Map from gradient/update name to tensor, as produced by a backward pass.
pub type GradMap = BTreeMap<String, Tensor>;

/// Registry of every learnable tensor of a model, keyed by hierarchical
/// name (e.g. `decoder.block0.attn.wq`). Name order is lexicographic, which
/// fixes a stable enumeration order for everything downstream.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: Group, tensor: Tensor) {
        self.entries
            .insert(name.to_string(), Entry { tensor, group });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn group_of(&self, name: &str) -> Result<Group> {
        self.entries
            .get(name)
            .map(|e| e.group)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iterates in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// SHA-256 over names, shapes and exact value bytes. Two stores compare
    /// equal under this checksum iff they are bit-identical.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, entry) in &self.entries {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            hasher.update(entry.group.as_str().as_bytes());
            hasher.update([0u8]);
            for &d in entry.tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            hasher.update([0u8]);
            for &v in entry.tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// In-place `value + scale * delta` for every named delta. Validates every
    /// name and shape before touching anything.
    pub fn apply_update(&mut self, deltas: &GradMap, scale: f64) -> Result<()> {
        for (name, delta) in deltas {
            let current = self.get(name)?;
            if !current.same_shape(delta) {
                return Err(Error::ShapeMismatch(format!(
                    "update for {name}: param {:?} vs delta {:?}",
                    current.shape(),
                    delta.shape()
                )));
            }
        }
        for (name, delta) in deltas {
            let tensor = self.get_mut(name)?;
            for (v, d) in tensor.data_mut().iter_mut().zip(delta.data()) {
                *v += scale * d;
            }
        }
        Ok(())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "w",
            Group::Mlp,
            Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(),
        );
        s.insert(
            "b",
            Group::Mlp,
            Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
        );
        s
    }

    #[test]
    fn apply_update_examples() {
        let mut s = store();
        let mut deltas = GradMap::new();
        deltas.insert(
            "w".to_string(),
            Tensor::new(vec![2], vec![2.0, -2.0]).unwrap(),
        );
        s.apply_update(&deltas, 0.5).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[2.0, 0.0]);
        // entries absent from deltas are untouched
        assert_eq!(s.get("b").unwrap().data(), &[0.5, -0.5]);
    }

    #[test]
    fn zero_scale_is_identity() {
        let mut s = store();
        let before = s.checksum();
        let mut deltas = GradMap::new();
        deltas.insert(
            "w".to_string(),
            Tensor::new(vec![2], vec![123.0, -7.0]).unwrap(),
        );
        s.apply_update(&deltas, 0.0).unwrap();
        assert_eq!(s.checksum(), before);
    }

    #[test]
    fn ascent_then_descent_restores() {
        let mut s = store();
        let mut deltas = GradMap::new();
        deltas.insert(
            "w".to_string(),
            Tensor::new(vec![2], vec![0.137, -0.901]).unwrap(),
        );
        let beta = 1e-4;
        s.apply_update(&deltas, beta).unwrap();
        s.apply_update(&deltas, -beta).unwrap();
        for (&v, want) in s.get("w").unwrap().data().iter().zip([1.0, 1.0]) {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected_before_mutation() {
        let mut s = store();
        let before = s.checksum();
        let mut deltas = GradMap::new();
        // first name in order ("b") is fine, second ("w") mismatches; nothing
        // may be mutated
        deltas.insert(
            "b".to_string(),
            Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(),
        );
        deltas.insert("w".to_string(), Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        assert!(s.apply_update(&deltas, 1.0).is_err());
        assert_eq!(s.checksum(), before);
    }

    #[test]
    fn clone_is_independent() {
        let s = store();
        let mut c = s.clone();
        let source_sum = s.checksum();
        c.get_mut("w").unwrap().data_mut()[0] = 42.0;
        assert_eq!(s.checksum(), source_sum);
        assert_ne!(c.checksum(), source_sum);
    }

    #[test]
    fn unknown_delta_name_rejected() {
        let mut s = store();
        let mut deltas = GradMap::new();
        deltas.insert("nope".to_string(), Tensor::zeros(vec![2]));
        assert!(s.apply_update(&deltas, 1.0).is_err());
    }
}
