//! Named parameter collections and the SGD-with-momentum update.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use num_traits::Float;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, uniquely named collection of tensors. Iteration order is the
/// insertion order, which makes every traversal deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamError {
    DuplicateName(String),
    MissingEntry(String),
    /// A trainable entry had no gradient when the optimizer ran.
    MissingGrad(String),
    ShapeMismatch { name: String, detail: String },
}

impl fmt::Display for ParamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamError::DuplicateName(n) => write!(f, "duplicate parameter name {n}"),
            ParamError::MissingEntry(n) => write!(f, "no parameter named {n}"),
            ParamError::MissingGrad(n) => write!(f, "trainable parameter {n} has no gradient"),
            ParamError::ShapeMismatch { name, detail } => {
                write!(f, "shape mismatch on {name}: {detail}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ParamError {}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<(), ParamError> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        self.entries.push(ParamEntry { name: name.to_string(), tensor, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    /// Marks every entry trainable or frozen.
    pub fn set_trainable(&mut self, trainable: bool) {
        for e in self.entries.iter_mut() {
            e.trainable = trainable;
        }
    }

    /// A copy with every tensor value zeroed and gradients cleared.
    pub fn zeros_like(&self) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|e| ParamEntry {
                name: e.name.clone(),
                tensor: Tensor::zeros(e.tensor.shape.clone()),
                trainable: e.trainable,
            })
            .collect();
        ParamSet { entries }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.tensor.zero_grad();
        }
    }

    /// True when the two sets have identical names and shapes in order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|(a, b)| a.name == b.name && a.tensor.shape == b.tensor.shape)
    }

    /// Entrywise `self + other` as a fresh set (layouts must match).
    pub fn entrywise_sum(&self, other: &ParamSet) -> Result<ParamSet, ParamError> {
        if !self.same_layout(other) {
            return Err(ParamError::ShapeMismatch {
                name: "<set>".to_string(),
                detail: format!("{} vs {} entries or differing layout", self.len(), other.len()),
            });
        }
        let entries = self
            .entries
            .iter()
            .zip(other.entries.iter())
            .map(|(a, b)| {
                let values: Vec<f64> =
                    a.tensor.values.iter().zip(&b.tensor.values).map(|(x, y)| x + y).collect();
                ParamEntry {
                    name: a.name.clone(),
                    tensor: Tensor { shape: a.tensor.shape.clone(), values, grad: None },
                    trainable: a.trainable,
                }
            })
            .collect();
        Ok(ParamSet { entries })
    }

    /// Sum of |v| over all entries.
    pub fn l1_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.values.iter())
            .map(|v| v.abs())
            .sum()
    }

    /// Euclidean norm over the concatenation of all entries.
    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// One SGD step with momentum and (coupled) weight decay over the
/// trainable entries:
/// `v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v`.
/// Gradients are zeroed afterwards.
pub fn sgd_momentum_step(
    params: &mut ParamSet,
    velocity: &mut ParamSet,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), ParamError> {
    for entry in params.entries.iter_mut().filter(|e| e.trainable) {
        let vel = velocity
            .get_mut(&entry.name)
            .ok_or_else(|| ParamError::MissingEntry(entry.name.clone()))?;
        if vel.tensor.shape != entry.tensor.shape {
            return Err(ParamError::ShapeMismatch {
                name: entry.name.clone(),
                detail: format!("velocity {:?} vs param {:?}", vel.tensor.shape, entry.tensor.shape),
            });
        }
        let grad = entry
            .tensor
            .grad
            .as_ref()
            .ok_or_else(|| ParamError::MissingGrad(entry.name.clone()))?;
        for ((p, g), v) in entry
            .tensor
            .values
            .iter_mut()
            .zip(grad.iter())
            .zip(vel.tensor.values.iter_mut())
        {
            *v = momentum * *v + (g + weight_decay * *p);
            *p -= lr * *v;
        }
    }
    params.zero_grads();
    Ok(())
}
