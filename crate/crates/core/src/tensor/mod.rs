//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; each
//! node owns its value (behind an `Arc`, so parameters are never copied in)
//! and an optional backward closure. [`Tape::backward`] walks the list in
//! reverse once, handing each node's accumulated output gradient to its
//! closure. The tape is single-use: build, run forward, call `backward`,
//! read gradients, drop.
//!
//! [`Session`] is the thin layer models are written against: it binds named
//! [`Param`]s onto a tape (tracked when training, constant when not) and maps
//! leaf gradients back to parameter names afterwards.

mod conv;
mod ops;

pub use conv::{
    avg_pool2, block_sum, col2im, conv2d_bwd, conv2d_fwd, conv_out_len, depth_to_space, im2col,
    space_to_depth, upsample_nearest,
};

use crate::scalar::Scalar;
use ndarray::ArrayD;
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

type BackwardFn<S> = Box<dyn FnOnce(ArrayD<S>, &mut GradStore<S>)>;

struct Node<S: Scalar> {
    value: Arc<ArrayD<S>>,
    /// True when a gradient can flow to this node from the loss.
    tracked: bool,
    backward: Option<BackwardFn<S>>,
}

/// Recording of one forward pass.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<S>, tracked: bool, backward: Option<BackwardFn<S>>) -> Var<'_, S> {
        self.push_arc(Arc::new(value), tracked, backward)
    }

    fn push_arc(
        &self,
        value: Arc<ArrayD<S>>,
        tracked: bool,
        backward: Option<BackwardFn<S>>,
    ) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, tracked, backward });
        Var { tape: self, id }
    }

    /// Leaf that gradients flow into (a parameter or a differentiated input).
    pub fn leaf(&self, value: ArrayD<S>) -> Var<'_, S> {
        self.push(value, true, None)
    }

    pub fn leaf_shared(&self, value: Arc<ArrayD<S>>) -> Var<'_, S> {
        self.push_arc(value, true, None)
    }

    /// Leaf that gradients ignore.
    pub fn constant(&self, value: ArrayD<S>) -> Var<'_, S> {
        self.push(value, false, None)
    }

    pub fn constant_shared(&self, value: Arc<ArrayD<S>>) -> Var<'_, S> {
        self.push_arc(value, false, None)
    }

    /// Runs the backward pass from `root`, seeding its gradient with ones.
    /// Consumes the recorded closures; a tape can only be differentiated once.
    pub fn backward(&self, root: Var<'_, S>) -> GradStore<S> {
        assert!(std::ptr::eq(root.tape, self), "root var belongs to a different tape");
        let mut nodes = self.nodes.borrow_mut();
        let mut store = GradStore { grads: vec![None; nodes.len()] };
        let seed = ArrayD::ones(nodes[root.id].value.shape());
        store.grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            if store.grads[id].is_none() {
                continue;
            }
            if let Some(bw) = nodes[id].backward.take() {
                let g = store.grads[id].take().expect("gradient present");
                bw(g, &mut store);
            }
        }
        store
    }
}

/// Handle to a node on a tape. Cheap to copy; all tensor ops live on it
/// (see the `ops` module).
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<S: Scalar> Copy for Var<'_, S> {}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to the node's value.
    pub fn value(&self) -> Arc<ArrayD<S>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// The scalar held by a single-element node.
    pub fn item(&self) -> S {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a node with {} elements", v.len());
        *v.iter().next().expect("non-empty")
    }

    pub(crate) fn tape(&self) -> &'t Tape<S> {
        self.tape
    }
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
pub struct GradStore<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> GradStore<S> {
    pub fn accumulate(&mut self, id: usize, g: ArrayD<S>) {
        match &mut self.grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: usize) -> Option<&ArrayD<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: usize) -> Option<ArrayD<S>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Named trainable tensor. The value sits behind an `Arc` so binding it to a
/// tape is free; the optimizer mutates it through [`Param::value_mut`].
#[derive(Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    value: Arc<ArrayD<S>>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: ArrayD<S>) -> Self {
        Param { name: name.into(), value: Arc::new(value) }
    }

    pub fn value(&self) -> &ArrayD<S> {
        &self.value
    }

    pub fn shared(&self) -> Arc<ArrayD<S>> {
        self.value.clone()
    }

    /// Mutable access for optimizer updates and checkpoint restore. Clones
    /// the storage only if a tape still holds the old value.
    pub fn value_mut(&mut self) -> &mut ArrayD<S> {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: ArrayD<S>) {
        self.value = Arc::new(value);
    }
}

/// One model evaluation on one tape. Records which tape node each parameter
/// was bound to so gradients can be read back by name.
pub struct Session<'t, S: Scalar> {
    tape: &'t Tape<S>,
    train: bool,
    bound: RefCell<Vec<(String, usize)>>,
}

impl<'t, S: Scalar> Session<'t, S> {
    pub fn new(tape: &'t Tape<S>, train: bool) -> Self {
        Session { tape, train, bound: RefCell::new(Vec::new()) }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    /// Binds a parameter. In training sessions the node is tracked and the
    /// binding is recorded; in inference sessions it is a plain constant.
    pub fn param(&self, p: &Param<S>) -> Var<'t, S> {
        if self.train {
            let v = self.tape.leaf_shared(p.shared());
            self.bound.borrow_mut().push((p.name.clone(), v.id));
            v
        } else {
            self.tape.constant_shared(p.shared())
        }
    }

    /// Tracked input leaf: gradients with respect to it can be read from the
    /// store by id. Used for the data-consistency gradient.
    pub fn input(&self, value: ArrayD<S>) -> Var<'t, S> {
        self.tape.leaf(value)
    }

    pub fn constant(&self, value: ArrayD<S>) -> Var<'t, S> {
        self.tape.constant(value)
    }

    pub fn constant_shared(&self, value: Arc<ArrayD<S>>) -> Var<'t, S> {
        self.tape.constant_shared(value)
    }

    /// Drains parameter gradients from `store` into a name-keyed map,
    /// summing over repeated bindings of the same parameter.
    pub fn grads_by_name(&self, store: &mut GradStore<S>) -> HashMap<String, ArrayD<S>> {
        let mut out: HashMap<String, ArrayD<S>> = HashMap::new();
        for (name, id) in self.bound.borrow().iter() {
            if let Some(g) = store.take(*id) {
                match out.get_mut(name) {
                    Some(acc) => *acc += &g,
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
