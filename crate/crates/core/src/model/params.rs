use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::TensorId;
use crate::{Tape, Tensor};

/// One named parameter. `decay` marks it for weight decay (matrices and
/// embeddings yes, biases and LayerNorm affines no).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub decay: bool,
}

/// Ordered, name-addressable parameter store. Order is insertion order and
/// is part of the deterministic contract (the optimizer walks it).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let idx = self.params.len();
        self.index.insert(name.clone(), idx);
        self.params.push(Param {
            name,
            tensor: tensor.with_grad(),
            decay,
        });
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Result<&Param> {
        self.index_of(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn total_elems(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}

/// Per-tape cache of leaf bindings so every forward pass in a batch shares
/// one leaf node per parameter (gradients then accumulate across samples).
pub struct ParamBinder {
    ids: Vec<Option<TensorId>>,
}

impl ParamBinder {
    pub fn new(params: &ParamSet) -> Self {
        ParamBinder {
            ids: vec![None; params.len()],
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, params: &ParamSet, idx: usize) -> TensorId {
        if let Some(id) = self.ids[idx] {
            return id;
        }
        let id = tape.leaf(&params.get(idx).tensor);
        self.ids[idx] = Some(id);
        id
    }

    /// Copy accumulated tape gradients back into the parameter tensors.
    pub fn write_back_grads(&self, tape: &Tape, params: &mut ParamSet) {
        for (idx, id) in self.ids.iter().enumerate() {
            if let Some(id) = id {
                tape.write_grad_into(*id, &mut params.get_mut(idx).tensor);
            }
        }
    }
}
