//! Named parameter tensors and the canonical enumeration contract.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named real tensor in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::mismatch(
                expected,
                data.len(),
                format!("tensor `{name}`"),
            ));
        }
        Ok(Self { name, shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Static description of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

/// Ordered, named parameter enumeration.
///
/// The order returned by [`Parameterized::param_specs`] is the canonical
/// serialization order used on the wire, and the order of every gradient
/// vector produced by the models.
pub trait Parameterized {
    fn param_specs(&self) -> Vec<ParamSpec>;
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn export(&self) -> Vec<NamedTensor> {
        self.param_specs()
            .into_iter()
            .zip(self.param_slices())
            .map(|(spec, values)| NamedTensor {
                name: spec.name,
                shape: spec.shape,
                data: values.to_vec(),
            })
            .collect()
    }

    /// Replaces every parameter. Names, order and shapes must match exactly.
    fn import(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let specs = self.param_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Protocol(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(tensors) {
            if spec.name != t.name
                || spec.shape != t.shape
                || t.data.len() != t.shape.iter().product::<usize>()
            {
                return Err(Error::Protocol(format!(
                    "tensor mismatch: expected `{}` {:?}, got `{}` {:?}",
                    spec.name, spec.shape, t.name, t.shape
                )));
            }
        }
        for (slot, t) in self.param_slices_mut().into_iter().zip(tensors) {
            slot.copy_from_slice(&t.data);
        }
        Ok(())
    }

    fn flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(Error::mismatch(total, flat.len(), "flat parameter vector"));
        }
        let mut offset = 0;
        for slot in self.param_slices_mut() {
            let n = slot.len();
            slot.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Writes tensors as a JSON checkpoint. Values keep full precision.
pub fn save_checkpoint(tensors: &[NamedTensor], path: &Path) -> Result<()> {
    let text = serde_json::to_string(tensors).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let text = std::fs::read_to_string(path)?;
    let tensors: Vec<NamedTensor> = serde_json::from_str(&text)
        .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
    for t in &tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Serialization(format!(
                "tensor `{}` shape does not match its data",
                t.name
            )));
        }
    }
    Ok(tensors)
}

/// Checks that two tensor lists agree in names, order and shapes.
pub fn check_same_layout(reference: &[NamedTensor], other: &[NamedTensor]) -> Result<()> {
    if reference.len() != other.len() {
        return Err(Error::Protocol(format!(
            "tensor count {} differs from {}",
            other.len(),
            reference.len()
        )));
    }
    for (a, b) in reference.iter().zip(other) {
        if a.name != b.name || a.shape != b.shape {
            return Err(Error::Protocol(format!(
                "tensor `{}` {:?} does not match `{}` {:?}",
                b.name, b.shape, a.name, a.shape
            )));
        }
    }
    Ok(())
}
