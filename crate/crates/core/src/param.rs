//! Named trainable parameters.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::tensor::{numel, Dims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamTensor<T> {
    pub name: String,
    /// Logical shape (rank 1..=4) as written to checkpoints.
    pub shape: Vec<usize>,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Pads a logical shape on the left to rank 4.
pub fn shape_to_dims(shape: &[usize]) -> Result<Dims> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::invalid("param", format!("unsupported rank {}", shape.len())));
    }
    let mut dims = [1usize; 4];
    dims[4 - shape.len()..].copy_from_slice(shape);
    Ok(dims)
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<ParamTensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid("param", format!("duplicate name {name}")));
        }
        let dims = shape_to_dims(shape)?;
        let value = Tensor::from_vec(dims, data)?;
        let id = ParamId(self.params.len());
        self.params.push(ParamTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: Tensor::zeros(dims),
            value,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.params.iter_mut()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }
}

/// Parameter initializer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan {
        fan_in: usize,
        gain: f64,
    },
    /// All zeros except a 1 at the spatial center of each (depthwise) kernel.
    DiracDepthwise,
}

/// Creates parameters under a hierarchical name prefix with seeded initialization.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `scope` appended to the name prefix.
    pub fn scoped<R>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let saved = self.prefix.clone();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(scope);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let count = numel(shape_to_dims(shape)?);
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); count],
            Init::Constant(c) => vec![lit(c); count],
            Init::Fan { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..count).map(|_| lit(normal.sample(&mut *self.rng))).collect()
            }
            Init::DiracDepthwise => {
                let k = *shape.last().unwrap();
                let plane = k * k;
                let mut v = vec![T::zero(); count];
                for ch in 0..count / plane {
                    v[ch * plane + (k / 2) * k + k / 2] = T::one();
                }
                v
            }
        };
        self.store.insert(&full, shape, data)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// Adds `N(0, std)` noise to every parameter (verification helper that wakes
/// zero-initialized branches so every gradient path is exercised).
pub fn perturb_all<T: Real>(store: &mut ParamStore<T>, std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("finite std");
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = *v + lit(normal.sample(rng));
        }
    }
}
