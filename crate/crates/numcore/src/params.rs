use indexmap::IndexMap;

use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Named parameters in insertion order. Iteration order is part of the
/// checkpoint format and of optimizer determinism, so it never changes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: IndexMap<String, Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Result<&Param<F>> {
        self.params
            .get(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param<F>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    /// Overwrites a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(NumError::Shape {
                op: "ParamStore::set",
                detail: format!("`{name}`: {:?} vs {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Adds `delta` into the named gradient.
    pub fn accumulate_grad(&mut self, name: &str, delta: &[F]) -> Result<()> {
        let p = self.param_mut(name)?;
        if p.grad.numel() != delta.len() {
            return Err(NumError::Shape {
                op: "accumulate_grad",
                detail: format!("`{name}`: {} vs {}", p.grad.numel(), delta.len()),
            });
        }
        for (g, &d) in p.grad.data_mut().iter_mut().zip(delta) {
            *g = *g + d;
        }
        Ok(())
    }

    /// Converts every value to another element type; gradients reset to zero.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (name, p) in self.iter() {
            out.insert(name, p.value.cast())
                .expect("names are unique in the source store");
        }
        out
    }

    /// Bitwise comparison of names, order, and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.value.bit_eq(&b.value))
    }
}
