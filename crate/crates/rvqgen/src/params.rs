//! Named parameter blocks, kept outside any tape.
//!
//! Each training step binds every block as a fresh leaf; gradients are read
//! back by name after the backward pass. Iteration order is lexicographic
//! everywhere, which keeps checkpoints and update order deterministic.

use std::collections::BTreeMap;

use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Ordered map of named parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Scalar> {
    map: BTreeMap<String, Tensor<E>>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    /// Registers a new block. Double registration is a programming error.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<E>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), t);
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn get(&self, name: &str) -> &Tensor<E> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<E> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Blocks in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.map.iter_mut()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<T>()))
                .collect(),
        }
    }
}

/// Tape leaves for every block of a store, addressable by name.
pub struct TapeBinding {
    vars: BTreeMap<String, Var>,
}

impl TapeBinding {
    /// Binds all blocks of `store` as differentiable leaves on `tape`.
    pub fn bind<E: Scalar>(tape: &mut Tape<E>, store: &ParamStore<E>) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in store.iter() {
            vars.insert(name.to_string(), tape.leaf(tensor.clone()));
        }
        TapeBinding { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradients by name after `backward`; blocks untouched by the loss get
    /// explicit zeros so the optimizer sees every block every step.
    pub fn collect_grads<E: Scalar>(
        &self,
        tape: &Tape<E>,
        store: &ParamStore<E>,
    ) -> BTreeMap<String, Tensor<E>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let g = match tape.grad(*var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(name).shape()),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}
