//! Named trainable tensors with gradient slots.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One trainable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// How a new parameter's values are drawn.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` over the two trailing axes.
    Glorot,
    /// Uniform in `±0.1` (embedding tables).
    Embedding,
    Zero,
}

/// Ordered collection of all trainable tensors. Iteration order is
/// insertion order, which keeps every downstream loop deterministic.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
    /// Set by `backward`, consumed by the optimizer step.
    pub(crate) grads_ready: bool,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            index: HashMap::new(),
            grads_ready: false,
        }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zero => vec![0.0; numel],
            Init::Embedding => (0..numel).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            Init::Glorot => {
                let (fan_in, fan_out) = match shape.len() {
                    2 => (shape[1], shape[0]),
                    1 => (shape[0], shape[0]),
                    _ => (numel, numel),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value: Tensor::new(shape.clone(), data).expect("parameter shape"),
            grad: Tensor::zeros(shape),
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
        self.grads_ready = false;
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let g = self.params[id.0].grad.data_mut();
        debug_assert_eq!(g.len(), grad.len());
        for (gi, &d) in g.iter_mut().zip(grad) {
            *gi += d;
        }
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elems(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scale all gradients so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let sq: f64 = self
            .params
            .iter()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &mut self.params {
                for g in p.grad.data_mut() {
                    *g *= scale;
                }
            }
        }
    }

    pub fn any_grad_nonfinite(&self) -> bool {
        self.params
            .iter()
            .any(|p| p.grad.data().iter().any(|g| !g.is_finite()))
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Overwrite a parameter's value, checking shape compatibility.
pub fn set_value(store: &mut ParameterStore, id: ParamId, value: Tensor) -> Result<()> {
    let p = store.get_mut(id);
    if p.value.shape() != value.shape() {
        return Err(Error::shape(
            "set_value",
            format!("{}: have {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
        ));
    }
    p.value = value;
    Ok(())
}
