//! Ordered, named parameter collections and a plain SGD updater.

use crate::error::{Error, Result};
use crate::tensor::{load_named, save_named, Tensor};
use std::path::Path;

/// Named tensors in a fixed order. The order is part of the contract: it
/// determines checkpoint bytes and gradient slot numbering.
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

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn at(&self, slot: usize) -> &Tensor {
        &self.entries[slot].1
    }

    pub fn at_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].1
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_named(path, &self.entries)
    }

    /// Loads a checkpoint and checks it against `template` (same names, same
    /// shapes, same order).
    pub fn load_into(path: &Path, template: &ParamSet) -> Result<ParamSet> {
        let entries = load_named(path)?;
        if entries.len() != template.len() {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                detail: format!(
                    "expected {} tensors, found {}",
                    template.len(),
                    entries.len()
                ),
            });
        }
        for ((name, tensor), (want_name, want)) in entries.iter().zip(template.entries()) {
            if name != want_name || tensor.shape() != want.shape() {
                return Err(Error::Malformed {
                    path: path.display().to_string(),
                    detail: format!(
                        "tensor {}{:?} does not match expected {}{:?}",
                        name,
                        tensor.shape(),
                        want_name,
                        want.shape()
                    ),
                });
            }
        }
        Ok(ParamSet { entries })
    }
}

/// SGD with classical momentum.
pub struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Adjusts the step size; velocity carries over.
    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// Applies one update to parameter `slot`.
    pub fn step(&mut self, slot: usize, param: &mut Tensor, grad: &[f32]) {
        while self.velocity.len() <= slot {
            self.velocity.push(Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != grad.len() {
            *v = vec![0.0; grad.len()];
        }
        let data = param.data_mut();
        for ((w, v), g) in data.iter_mut().zip(v.iter_mut()).zip(grad) {
            *v = self.momentum * *v + g;
            *w -= self.lr * *v;
        }
    }
}
