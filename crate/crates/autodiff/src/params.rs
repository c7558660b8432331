use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::{Real, Tape, Tensor, Var};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Gradients keyed by parameter name.
pub type GradSet<T> = BTreeMap<String, Vec<T>>;

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Parameters of one forward pass, recorded as tape leaves.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Records every parameter of `params` whose name starts with `prefix`.
    /// Leaves require gradients iff `trainable`.
    pub fn bind<T: Real>(&mut self, tape: &mut Tape<T>, params: &ParamSet<T>, prefix: &str, trainable: bool) {
        for (name, t) in params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let v = tape.leaf(t.clone().with_requires_grad(trainable));
            self.vars.insert(name.to_string(), v);
        }
    }

    /// Binds `name` to an existing tape variable.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(&v) => Ok(v),
            None => invalid("params", format!("missing parameter `{name}`")),
        }
    }

    /// Collects leaf gradients for every bound trainable parameter.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> GradSet<T> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }
}
