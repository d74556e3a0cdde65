use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Grads;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Frozen weights and buffers receive no gradient.
    pub trainable: bool,
    /// Non-learned state such as batch-norm running statistics.
    pub buffer: bool,
}

/// Named parameter table owned by a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a learnable tensor. Panics on a duplicate name (a model-construction bug).
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    /// Register non-learned state that is still checkpointed.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    fn insert(&mut self, name: String, value: Tensor<T>, buffer: bool) -> ParamId {
        let id = ParamId(self.params.len());
        let previous = self.by_name.insert(name.clone(), id);
        assert!(previous.is_none(), "duplicate parameter name `{name}`");
        self.params.push(Param {
            name,
            value,
            grad: None,
            trainable: !buffer,
            buffer,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) {
        let p = &mut self.params[id.0];
        assert_eq!(p.value.shape(), value.shape(), "set_value on `{}`", p.name);
        p.value = value;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Freeze or unfreeze every weight; buffers are never trainable.
    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| !p.buffer) {
            p.trainable = trainable;
            p.grad = None;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add the parameter-leaf gradients of one backward pass into the table.
    pub fn accumulate(&mut self, grads: &Grads<T>) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            match p.grad.as_mut() {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
    }

    /// Global L2 norm of all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale gradients so their global norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::lit(max_norm / norm);
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    /// Replace values from `(name, tensor)` pairs; every stored parameter must be present.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter `{name}`")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "`{name}` has shape {:?}, checkpoint has {:?}",
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(TensorError::Checkpoint(format!(
                "missing parameter `{}`",
                self.params[missing].name
            )));
        }
        Ok(())
    }
}
