//! Named, ordered parameter storage. Order is fixed at construction time
//! and shared by gradients, optimizer state and checkpoints.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replace tensors by name, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(CoreError::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for i in 0..self.len() {
            let (name, tensor) = (&other.entries[i].0, &other.entries[i].1);
            if &self.entries[i].0 != name {
                return Err(CoreError::Checkpoint(format!(
                    "parameter name mismatch at {i}: {} vs {}",
                    self.entries[i].0, name
                )));
            }
            if self.entries[i].1.shape() != tensor.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    self.entries[i].1.shape(),
                    tensor.shape()
                )));
            }
            self.entries[i].1 = tensor.clone();
        }
        Ok(())
    }
}
