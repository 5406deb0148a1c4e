use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to one named tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// True when both sets have identical names and shapes in the same order.
    pub fn same_layout<G: Scalar>(&self, other: &ParamSet<G>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in taken from the first dimension.
    FanIn,
}

/// Registers parameters under a hierarchical name prefix.
pub struct ParamBuilder<'a, F: Scalar, R: Rng> {
    params: &'a mut ParamSet<F>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, F: Scalar, R: Rng> ParamBuilder<'a, F, R> {
    pub fn new(params: &'a mut ParamSet<F>, rng: &'a mut R) -> Self {
        Self {
            params,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_, F, R>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut child = ParamBuilder {
            params: self.params,
            rng: self.rng,
            prefix,
        };
        f(&mut child)
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n)
                    .map(|_| F::from_f64_lossy(dist.sample(self.rng)))
                    .collect()
            }
            Init::FanIn => {
                let fan_in = shape.first().copied().unwrap_or(1).max(1) as f64;
                let bound = 1.0 / fan_in.sqrt();
                (0..n)
                    .map(|_| F::from_f64_lossy(self.rng.random_range(-bound..bound)))
                    .collect()
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.params.insert(full, Tensor::new(shape, data)?)
    }
}
