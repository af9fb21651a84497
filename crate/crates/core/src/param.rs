//! Named parameters and their gradients.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Buffers such as batch-norm running statistics are stored alongside
    /// parameters but never receive gradients or optimizer updates.
    pub trainable: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, ParamError> {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
    ) -> Result<ParamId, ParamError> {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> Result<ParamId, ParamError> {
        if self.by_name.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Replaces a value by name, checking the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        let id = self
            .find(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(ParamError::Shape {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

/// Fan-in scaled uniform (He) initialization for kernels feeding ReLU units.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

pub fn glorot_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros([2])).unwrap();
        assert_eq!(
            store.add("w", Tensor::zeros([3])),
            Err(ParamError::Duplicate("w".into()))
        );
    }

    #[test]
    fn gradient_shape_follows_value() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros([2, 5])).unwrap();
        assert_eq!(store.grad(id).shape(), &[2, 5]);
    }

    #[test]
    fn buffers_do_not_count_as_trainable() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros([4])).unwrap();
        store.add_buffer("running_mean", Tensor::zeros([3])).unwrap();
        assert_eq!(store.num_trainable(), 4);
        assert_eq!(store.trainable_ids().len(), 1);
    }
}
