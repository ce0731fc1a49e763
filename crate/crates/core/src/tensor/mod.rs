//! Dense f32 tensors with tape-free reverse-mode autodiff.
//!
//! Every op output that depends on a tensor with `requires_grad` carries a
//! link to the node that produced it. `backward` walks those links from a
//! scalar loss in reverse topological order and accumulates gradients into
//! the reachable leaves. Intermediate gradients are kept in a scratch map and
//! never stored on the tensors themselves.

mod lstm;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use lstm::{lstm_cell, LstmWeights};
pub use ops::{forward_op, OpAttrs, OpKind, Padding};

type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>>>;

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` without recording graph nodes on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|g| g.replace(true));
    let out = f();
    NO_GRAD.with(|g| g.set(prev));
    out
}

pub(crate) struct Node {
    kind: OpKind,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    node: RefCell<Option<Node>>,
    consumed: Cell<bool>,
}

/// Reference-counted handle to a tensor. Cloning is cheap and aliases the
/// same storage.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if data.len() <= 16 {
            d.field("values", &&data[..]);
        }
        d.field("requires_grad", &self.0.requires_grad);
        if let Some(node) = self.0.node.borrow().as_ref() {
            d.field("op", &node.kind);
        }
        d.finish()
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node: RefCell::new(None),
            consumed: Cell::new(false),
        }))
    }

    fn validate(shape: &[usize], data: &[f32]) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid_shape("tensor", shape, "extents must be positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid_shape(
                "tensor",
                shape,
                format!("expected {n} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "tensor",
                what: "initial values".into(),
            });
        }
        Ok(())
    }

    /// A constant leaf (no gradient).
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        Self::validate(shape, &data)?;
        Ok(Self::from_parts(shape.to_vec(), data, false))
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        Self::validate(shape, &data)?;
        Ok(Self::from_parts(shape.to_vec(), data, true))
    }

    pub fn leaf(shape: &[usize], data: Vec<f32>, requires_grad: bool) -> Result<Tensor> {
        Self::validate(shape, &data)?;
        Ok(Self::from_parts(shape.to_vec(), data, requires_grad))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zero tensor with positive extents")
    }

    pub fn scalar(value: f32) -> Tensor {
        Self::from_parts(vec![1], vec![value], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.borrow().is_none()
    }

    /// The op that produced this tensor, if a graph node is attached.
    pub fn op_kind(&self) -> Option<OpKind> {
        self.0.node.borrow().as_ref().map(|n| n.kind)
    }

    pub fn values(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite the values of a leaf in place. Used by optimizers and
    /// checkpoint loading; rejected on graph outputs.
    pub fn set_values(&self, values: &[f32]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::arg("set_values on a non-leaf tensor"));
        }
        if values.len() != self.numel() {
            return Err(Error::shape("set_values", &self.0.shape, &[values.len()]));
        }
        self.0.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Mutable access to a leaf's values.
    pub fn update_values(&self, f: impl FnOnce(&mut [f32])) {
        debug_assert!(self.is_leaf());
        f(&mut self.0.data.borrow_mut());
    }

    /// Fresh leaf holding a copy of the values, detached from any graph.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.0.shape.clone(), self.to_vec(), false)
    }

    /// Deep copy with an explicit gradient flag.
    pub fn deep_copy(&self, requires_grad: bool) -> Tensor {
        Self::from_parts(self.0.shape.clone(), self.to_vec(), requires_grad)
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Inner {
        Rc::as_ptr(&self.0)
    }

    /// Build an op output. The node is only recorded when some input
    /// requires a gradient.
    pub(crate) fn from_op(
        kind: OpKind,
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: &[&Tensor],
        backward: impl Fn(&[f32]) -> Vec<Option<Vec<f32>>> + 'static,
    ) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: kind.name(),
                what: "output".into(),
            });
        }
        let track = !NO_GRAD.with(|g| g.get()) && inputs.iter().any(|t| t.requires_grad());
        let out = Self::from_parts(shape, data, track);
        if track {
            *out.0.node.borrow_mut() = Some(Node {
                kind,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                backward: Box::new(backward),
            });
        }
        Ok(out)
    }

    /// Backpropagate from this scalar and release the graph. A second call
    /// on the same loss is rejected.
    pub fn backward(&self) -> Result<()> {
        self.run_backward(false)
    }

    /// Backpropagate but keep the graph so that another `backward` may follow.
    pub fn backward_retained(&self) -> Result<()> {
        self.run_backward(true)
    }

    fn run_backward(&self, retain: bool) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if self.0.consumed.get() {
            return Err(Error::Graph(
                "graph already consumed by a previous backward; run forward again".into(),
            ));
        }
        if self.is_leaf() {
            return Err(Error::Graph("loss was not produced by a recorded graph".into()));
        }

        let order = self.topo_order();
        let mut grads: HashMap<*const Inner, Vec<f32>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            let node_ref = t.0.node.borrow();
            let node = node_ref.as_ref().expect("topo order only holds graph nodes");
            let input_grads = (node.backward)(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                if input.is_leaf() {
                    let mut slot = input.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        None => *slot = Some(ig),
                    }
                } else {
                    match grads.get_mut(&input.key()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(input.key(), ig);
                        }
                    }
                }
            }
        }

        if !retain {
            for t in &order {
                t.0.node.borrow_mut().take();
                t.0.consumed.set(true);
            }
        }
        Ok(())
    }

    /// Graph nodes reachable from `self`, in topological (post-DFS) order.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((t, idx)) = stack.pop() {
            let next = {
                let node = t.0.node.borrow();
                node.as_ref().and_then(|n| n.inputs.get(idx).cloned())
            };
            match next {
                Some(child) => {
                    stack.push((t, idx + 1));
                    if !child.is_leaf() && visited.insert(child.key()) {
                        stack.push((child, 0));
                    }
                }
                None => order.push(t),
            }
        }
        order
    }
}

/// Global L2 norm of a set of gradient buffers, accumulated in f64.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a [f32]>) -> f64 {
    grads
        .into_iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}
