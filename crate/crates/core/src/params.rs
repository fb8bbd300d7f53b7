//! Named, ordered parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::ParamError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self, ParamError> {
        let name = name.into();
        if shape.contains(&0) {
            return Err(ParamError::ZeroDim { name });
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(ParamError::ShapeMismatch {
                name,
                expected,
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ParamError::NonFinite { name, index });
        }
        Ok(Self { name, shape, values })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            values: vec![0.0; len],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access to the values; the shape is fixed.
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn same_layout(&self, other: &Tensor) -> bool {
        self.name == other.name && self.shape == other.shape
    }
}

/// The unit of aggregation, checkpointing and wire transfer.
///
/// Entry order is part of the value: two sets with the same tensors in a
/// different order are different sets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self, ParamError> {
        let mut set = Self::new();
        for t in tensors {
            set.push_tensor(t)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<(), ParamError> {
        self.push_tensor(Tensor::new(name, shape, values)?)
    }

    fn push_tensor(&mut self, tensor: Tensor) -> Result<(), ParamError> {
        if self.get(&tensor.name).is_some() {
            return Err(ParamError::DuplicateName(tensor.name));
        }
        self.entries.push(tensor);
        Ok(())
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Tensor] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all entries.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(Tensor::len).sum()
    }

    /// All values, entry by entry.
    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.entries.iter().flat_map(|t| t.values.iter().copied())
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.same_layout(b))
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<(), ParamError> {
        if self.entries.len() != other.entries.len() {
            return Err(ParamError::LayoutMismatch(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if !a.same_layout(b) {
                return Err(ParamError::LayoutMismatch(format!(
                    "{}{:?} vs {}{:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    /// Equality of layout and of every value's bit pattern.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.same_layout(other)
            && self
                .values()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f32::is_finite)
    }

    /// Build a set with this layout from flat 64-bit buffers, one per entry.
    pub(crate) fn with_values_f64(&self, buffers: &[Vec<f64>]) -> ParamSet {
        debug_assert_eq!(buffers.len(), self.entries.len());
        ParamSet {
            entries: self
                .entries
                .iter()
                .zip(buffers)
                .map(|(t, buf)| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: buf.iter().map(|&v| v as f32).collect(),
                })
                .collect(),
        }
    }
}
