//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! Every backward rule is written in terms of differentiable [`Var`]
//! operations, so gradients can themselves be differentiated when
//! [`grad`] is called with `create_graph = true`. The critic's gradient
//! penalty relies on this.
//!
//! Graphs are built on the current thread and are not `Send`; parameters
//! live outside the graph as plain arrays and are bound as leaves for each
//! forward pass.

mod conv;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

pub use conv::ConvGeometry;
pub(crate) use ops::Op;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.0));
    }
}

fn set_grad_mode(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
    GradModeGuard(prev)
}

/// Runs `f` without recording any operations.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = set_grad_mode(false);
    f()
}

/// Runs `f` with recording switched on, even inside [`no_grad`].
pub fn enable_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = set_grad_mode(true);
    f()
}

pub(crate) struct Node<T: Scalar> {
    id: u64,
    value: ArrayD<T>,
    requires_grad: bool,
    op: Op<T>,
    parents: Vec<Var<T>>,
}

/// A node in the computation graph. Cloning is cheap (reference counted).
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// A leaf that never receives gradients.
    pub fn constant(value: ArrayD<T>) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(value: ArrayD<T>) -> Self {
        Self::leaf(value, true)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn leaf(value: ArrayD<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value: ops::standard(value),
            requires_grad,
            op: Op::Leaf,
            parents: Vec::new(),
        }))
    }

    pub(crate) fn from_op(value: ArrayD<T>, op: Op<T>, parents: Vec<Var<T>>) -> Self {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Var(Rc::new(Node {
                id: next_id(),
                value: ops::standard(value),
                requires_grad: true,
                op,
                parents,
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &ArrayD<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn into_value(self) -> ArrayD<T> {
        match Rc::try_unwrap(self.0) {
            Ok(node) => node.value,
            Err(rc) => rc.value.clone(),
        }
    }

    fn id(&self) -> u64 {
        self.0.id
    }
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// Inputs that `output` does not depend on get a zero gradient. With
/// `create_graph`, the returned gradients are themselves differentiable.
pub fn grad<T: Scalar>(output: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(output.len(), 1, "grad() needs a scalar output, got {:?}", output.shape());
    let _guard = set_grad_mode(create_graph);

    let order = topo_order(output);
    // Only nodes with a path to some requested input need gradients.
    let targets: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let mut relevant: HashSet<u64> = HashSet::new();
    for node in &order {
        if targets.contains(&node.id()) || node.0.parents.iter().any(|p| relevant.contains(&p.id())) {
            relevant.insert(node.id());
        }
    }
    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    if output.requires_grad() {
        grads.insert(
            output.id(),
            Var::constant(ArrayD::from_elem(output.value().raw_dim(), T::one())),
        );
    }

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if matches!(node.0.op, Op::Leaf) {
            grads.insert(node.id(), g);
            continue;
        }
        let needs: Vec<bool> = node.0.parents.iter().map(|p| relevant.contains(&p.id())).collect();
        let parent_grads = ops::backward(&node.0.op, &node.0.parents, node, &g, &needs);
        for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
            if let Some(pg) = pg {
                debug_assert_eq!(pg.shape(), parent.shape());
                let acc = match grads.remove(&parent.id()) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(parent.id(), acc);
            }
        }
    }

    wrt.iter()
        .map(|v| {
            grads
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(ArrayD::zeros(v.value().raw_dim())))
        })
        .collect()
}

/// Post-order of all gradient-carrying nodes reachable from `root`.
fn topo_order<T: Scalar>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut visited = HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in v.0.parents.iter().rev() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}
