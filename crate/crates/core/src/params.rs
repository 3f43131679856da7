//! Named trainable parameters.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{GmaError, Result};
use crate::rng::{chacha, derive_seed};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.dims());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Ordered collection of parameters addressable by name or [`ParamId`].
///
/// Initial values depend only on `(seed, name, dims)`, so two models that share
/// a parameter name start from identical values regardless of what else they
/// register.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(GmaError::contract(
                "ParamStore::insert",
                format!("duplicate parameter name {}", param.name),
            ));
        }
        let id = self.params.len();
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    /// Registers a weight matrix with Glorot-uniform values,
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = chacha(derive_seed(seed, name));
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        self.insert(Parameter::new(name, Tensor::new(vec![fan_in, fan_out], data)?))
    }

    /// Registers a zero-initialised bias vector.
    pub fn bias(&mut self, name: &str, len: usize) -> Result<ParamId> {
        self.insert(Parameter::new(name, Tensor::zeros(&[len])))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.dims() != grad.dims() {
            return Err(GmaError::shape("accumulate_grad", p.grad.dims(), grad.dims()));
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
        Ok(())
    }

    /// Plain SGD update `value -= lr * grad` on every parameter.
    pub fn sgd_step(&mut self, lr: f64) {
        if lr == 0.0 {
            return;
        }
        for p in &mut self.params {
            let grad = p.grad.data().to_vec();
            for (v, g) in p.value.data_mut().iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
    }

    /// Sum of squared gradient entries across all parameters.
    pub fn grad_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum()
    }
}
