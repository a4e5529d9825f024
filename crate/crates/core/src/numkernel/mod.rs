//! Dense-tensor arithmetic with reverse-mode differentiation, an Adam
//! optimizer, named random streams, and the binary checkpoint format. Every
//! trainable module and every guidance gradient in the crate is built on this.

mod checkpoint;
pub mod fdcheck;
mod mlp;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointHeader, CHECKPOINT_MAGIC};
pub use mlp::{Activation, Mlp, MlpSpec};
pub use optim::{Adam, AdamConfig};
pub use rng::StreamRng;
pub use tape::{matmul_raw, sigmoid, Backward, Graph, ValueId};
pub use tensor::Tensor;

use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch { context: &'static str, expected: String, got: String },
    #[error("non-finite value at {context}")]
    NonFiniteInput { context: &'static str },
    #[error("value handle does not belong to this tape")]
    NotOnTape,
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("no gradient supplied for parameter `{0}`")]
    MissingGrad(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` changed shape: had {had:?}, got {got:?}")]
    ShapeChanged { name: String, had: Vec<usize>, got: Vec<usize> },
}

/// Named map of trainable tensors. Names are unique; shapes are stable for
/// the lifetime of a training run.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<(), KernelError> {
        if let Some(prev) = self.entries.get(name) {
            if prev.shape() != t.shape() {
                return Err(KernelError::ShapeChanged {
                    name: name.to_string(),
                    had: prev.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, KernelError> {
        self.entries.get(name).ok_or_else(|| KernelError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
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

    /// Merge another set under a prefix, e.g. `merge("decoder.", &dec_params)`.
    pub fn merge(&mut self, prefix: &str, other: &ParamSet) -> Result<(), KernelError> {
        for (name, t) in other.iter() {
            self.insert(&format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Extract the sub-set under a prefix, stripping it.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.entries.insert(rest.to_string(), t.clone());
            }
        }
        out
    }

    /// Keep only entries whose name starts with `prefix` (names unchanged).
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            if name.starts_with(prefix) {
                out.entries.insert(name.clone(), t.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_stable_across_a_run() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        p.insert("w", Tensor::vector(vec![3.0, 4.0]).unwrap()).unwrap();
        assert!(matches!(
            p.insert("w", Tensor::vector(vec![1.0]).unwrap()),
            Err(KernelError::ShapeChanged { .. })
        ));
    }
}
