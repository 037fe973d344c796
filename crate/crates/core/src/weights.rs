//! Named parameter tensors and their validation against a [`ModelSpec`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::tensor::Tensor;

/// Map from tensor name to tensor. Every stored tensor is finite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightSet {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a tensor, rejecting non-finite values.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        tensor.ensure_finite(&name)?;
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub(crate) fn require_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensors in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Moves every tensor of `other` into `self`, overwriting equal names.
    pub fn extend(&mut self, other: WeightSet) {
        self.tensors.extend(other.tensors);
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Ok,
    Missing,
    WrongShape,
}

/// Outcome for one required tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub layer: String,
    pub tensor: String,
    pub expected: Vec<usize>,
    pub found: Option<Vec<usize>>,
    pub trainable: bool,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<TensorCheck>,
    /// Tensors present in the set but not used by the model.
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Ok)
    }

    /// True when every frozen (non-trainable) tensor is present and correct.
    pub fn backbone_passed(&self) -> bool {
        self.checks
            .iter()
            .filter(|c| !c.trainable)
            .all(|c| c.status == CheckStatus::Ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.checks.iter().filter(|c| c.status != CheckStatus::Ok)
    }

    fn describe_failures<'a>(checks: impl Iterator<Item = &'a TensorCheck>) -> String {
        let parts: Vec<String> = checks
            .map(|c| match &c.found {
                None => format!("{} missing (expected {:?})", c.tensor, c.expected),
                Some(shape) => format!("{} has shape {:?}, expected {:?}", c.tensor, shape, c.expected),
            })
            .collect();
        parts.join("; ")
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::Validation(Self::describe_failures(self.failures())))
        }
    }

    pub fn into_backbone_result(self) -> Result<()> {
        if self.backbone_passed() {
            Ok(())
        } else {
            Err(Error::Validation(Self::describe_failures(
                self.failures().filter(|c| !c.trainable),
            )))
        }
    }
}

/// Checks that `set` carries every tensor `spec` needs with the exact shape.
/// Extra tensors only produce warnings.
pub fn validate_against(spec: &ModelSpec, set: &WeightSet) -> ValidationReport {
    let mut checks = Vec::new();
    let mut used = BTreeMap::new();
    for p in spec.parameters() {
        used.insert(p.tensor.clone(), ());
        let found = set.get(&p.tensor).map(|t| t.shape().to_vec());
        let status = match &found {
            None => CheckStatus::Missing,
            Some(shape) if *shape == p.shape => CheckStatus::Ok,
            Some(_) => CheckStatus::WrongShape,
        };
        checks.push(TensorCheck {
            layer: p.layer,
            tensor: p.tensor,
            expected: p.shape,
            found,
            trainable: p.trainable,
            status,
        });
    }
    let warnings = set
        .names()
        .filter(|n| !used.contains_key(*n))
        .map(|n| format!("unused tensor `{n}`"))
        .collect();
    ValidationReport { checks, warnings }
}
