use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<E = f32> {
    tensors: BTreeMap<String, Tensor<E>>,
}

/// Parameter initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// He-normal with the given fan-in.
    He { fan_in: usize },
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        dims: impl Into<Vec<usize>>,
        init: Init,
        rng: &mut R,
    ) {
        let dims = dims.into();
        let tensor = match init {
            Init::Zeros => Tensor::zeros(dims),
            Init::Ones => Tensor::full(dims, E::one()),
            Init::Constant(v) => Tensor::full(dims, E::lit(v)),
            Init::He { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
                Tensor::from_fn(dims, |_| E::lit(normal.sample(rng)))
            }
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).unwrap();
                Tensor::from_fn(dims, |_| E::lit(normal.sample(rng)))
            }
            Init::Uniform(bound) => {
                Tensor::from_fn(dims, |_| E::lit(rng.random_range(-bound..=bound)))
            }
        };
        self.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<E>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalar count over tensors whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Copies every tensor of `other` into `self`, replacing same-named entries.
    pub fn extend_from(&mut self, other: &ParamStore<E>) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }
}
