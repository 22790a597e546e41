use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Gradients, Scalar, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter, used by the optimizer's freeze rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
}

impl ParamKind {
    /// Biases and layer-norm parameters, the group excluded from updates
    /// when freezing is on.
    pub fn is_norm_or_bias(self) -> bool {
        matches!(self, Self::Bias | Self::NormGain | Self::NormBias)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    name: String,
    kind: ParamKind,
    value: Arc<Tensor<T>>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }
}

/// Named, ordered collection of learnable tensors plus accumulated gradients.
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

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.params.push(Param {
            name,
            kind,
            value: Arc::new(value),
            grad: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    /// Mutable access; copies the buffer first if a tape still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the parameter gradients of one backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a = *a + v;
                    }
                }
                None => p.grad = Some(g.to_vec()),
            }
        }
    }

    /// Copies values into another element type; gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: Arc::new(p.value.cast()),
                    grad: None,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
