//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every executed operation in order. Calling
//! [`Graph::backward`] walks the tape in exact reverse order, accumulates
//! gradients into the trainable entries of a [`ParamStore`], and returns the
//! gradients of any leaf inputs created with [`Graph::input_with_grad`].
//!
//! One graph is single-threaded. Independent graphs (e.g. one per patch) may
//! run concurrently since they share nothing but an immutable `ParamStore`.

mod conv;
mod elementwise;
mod loss;
mod norm;
mod pool;
mod shape;
mod wavelet_ops;

pub use conv::Conv3dOptions;
pub use norm::BatchNormOutput;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// A named tensor with a same-shaped gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, name-addressable parameter collection.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            trainable,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "param_set",
                format!("`{}` has shape {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reverse rule of a recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; implementations may
/// return `None` for inputs that do not.
pub(crate) trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>>;
}

struct Node {
    name: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

/// Gradients of leaf inputs after [`Graph::backward`].
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf("input", value, None, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.leaf("input", value, None, true)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.leaf("param", p.value.clone(), Some(id), p.trainable)
    }

    fn leaf(&mut self, name: &'static str, value: Tensor, param: Option<ParamId>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            name,
            value,
            inputs: Vec::new(),
            op: None,
            param,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            name,
            value,
            inputs: inputs.to_vec(),
            op: Some(Box::new(op)),
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Every recorded node as `(op name, value, inputs)`, in execution order.
    pub fn nodes(&self) -> impl Iterator<Item = (&'static str, &Tensor, &[Var])> {
        self.nodes.iter().map(|n| (n.name, &n.value, n.inputs.as_slice()))
    }

    /// Queues a non-trainable buffer overwrite (batch-norm running stats).
    pub fn defer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    /// Applies queued buffer updates to the store.
    pub fn commit_updates(&mut self, store: &mut ParamStore) -> Result<()> {
        for (id, value) in self.buffer_updates.drain(..) {
            store.set(id, value)?;
        }
        Ok(())
    }

    /// The first node, in execution order, whose value contains NaN or Inf.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.name))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Trainable parameter leaves add their gradient into `store`; callers
    /// zero the store first when they want plain gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let out = &self.nodes[loss.0];
        if out.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(out.value.shape(), 1.0));
        let mut leaves = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(grad) = grads[idx].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                None => {
                    if let Some(pid) = node.param {
                        store.get_mut(pid).grad.add_assign(&grad);
                    } else {
                        leaves.insert(idx, grad);
                    }
                }
                Some(op) => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.name);
                    for (v, g) in node.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !self.nodes[v.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "grad shape from {}", node.name);
                        match &mut grads[v.0] {
                            Some(acc) => acc.add_assign(&g),
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }
}
