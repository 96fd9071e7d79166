use std::collections::HashMap;

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<F> {
    name: String,
    value: Tensor<F>,
    grad: Tensor<F>,
}

/// Named trainable tensors with matching gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<F> {
    entries: Vec<Entry<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Integrity(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value, grad });
        Ok(ParamId(id))
    }

    /// Glorot-uniform weight matrix of shape `fan_in x fan_out`.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| F::from_f64(rng.gen_range(-limit..=limit)))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].grad
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<F>, &Tensor<F>) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar coordinates over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Replaces every value with the same-named tensor from `other`.
    ///
    /// Both stores must hold exactly the same names and shapes.
    pub fn load_from(&mut self, other: &ParameterStore<F>) -> Result<()> {
        self.check_compatible(other)?;
        for e in &mut self.entries {
            let src = other.value(other.id(&e.name).expect("checked above"));
            e.value = src.clone();
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParameterStore<F>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for e in &self.entries {
            let Some(oid) = other.id(&e.name) else {
                return Err(Error::Checkpoint(format!("missing parameter `{}`", e.name)));
            };
            let oshape = other.value(oid).shape();
            if oshape != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    oshape,
                    e.value.shape()
                )));
            }
        }
        Ok(())
    }
}
