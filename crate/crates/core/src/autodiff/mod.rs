//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every backward rule is itself written with differentiable tensor ops, so
//! gradients can be differentiated again (`grad(.., create_graph = true)`).
//! The GAN penalties (R1, path length) rely on this.
//!
//! Graph nodes carry a monotonically increasing id. A node's inputs always
//! have smaller ids than the node, so visiting nodes in descending id order
//! is a valid reverse topological order and gradient accumulation happens in
//! a fixed order regardless of hashing.

mod index;
mod ops;

pub use index::IndexMap;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

pub(crate) trait Op {
    /// Gradients for each input given the gradient of the output. Entries may
    /// be `None` for inputs that do not require gradients.
    fn backward(&self, inputs: &[Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct GradFn {
    inputs: Vec<Tensor>,
    op: Box<dyn Op>,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// Shared handle to an immutable tensor value and its position in the graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            numel(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad_fn: None,
        }))
    }

    /// A leaf that gradients are taken with respect to.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        let mut t = Self::from_vec(data, shape);
        Rc::get_mut(&mut t.0).expect("fresh node").requires_grad = true;
        t
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(vec![0.0; numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::from_vec(vec![1.0; numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_vec(vec![v; numel(shape)], shape)
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: &[usize], inputs: Vec<Tensor>, op: impl Op + 'static) -> Self {
        debug_assert_eq!(data.len(), numel(shape));
        let track = is_grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        let grad_fn = track.then(|| GradFn {
            inputs,
            op: Box::new(op),
        });
        Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            requires_grad: track,
            grad_fn,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        if !self.requires_grad() {
            return self.clone();
        }
        Self::from_vec(self.0.data.clone(), &self.0.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Mutable access to a leaf's values (used by optimizers). Clones the
    /// storage when other handles still reference it.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        assert!(self.is_leaf(), "data_mut on a non-leaf tensor");
        if Rc::get_mut(&mut self.0).is_none() {
            let fresh = Node {
                id: next_id(),
                shape: self.0.shape.clone(),
                data: self.0.data.clone(),
                requires_grad: self.0.requires_grad,
                grad_fn: None,
            };
            self.0 = Rc::new(fresh);
        }
        &mut Rc::get_mut(&mut self.0).expect("unique after clone").data
    }
}

/// Gradients of a scalar `output` with respect to each tensor in `wrt`.
///
/// `wrt` may name leaves or intermediate nodes. Tensors the output does not
/// depend on receive zeros. With `create_graph` the returned gradients are
/// themselves part of the graph and can be differentiated again.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.numel(), 1, "grad() needs a scalar output, got {:?}", output.shape());
    let _guard = (!create_graph).then(no_grad);

    let wanted: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();

    let mut nodes: Vec<Tensor> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    if output.requires_grad() {
        let mut stack = vec![output.clone()];
        seen.insert(output.id());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.0.grad_fn {
                for inp in &gf.inputs {
                    if inp.requires_grad() && seen.insert(inp.id()) {
                        stack.push(inp.clone());
                    }
                }
            }
            nodes.push(t);
        }
    }
    nodes.sort_by_key(Tensor::id);

    // A node is relevant when some wanted tensor is reachable from it.
    let mut relevant: HashSet<u64> = HashSet::new();
    for t in &nodes {
        let hit = wanted.contains(&t.id())
            || t.0
                .grad_fn
                .as_ref()
                .is_some_and(|gf| gf.inputs.iter().any(|i| relevant.contains(&i.id())));
        if hit {
            relevant.insert(t.id());
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    let mut found: HashMap<u64, Tensor> = HashMap::new();
    if relevant.contains(&output.id()) {
        grads.insert(output.id(), Tensor::ones(output.shape()));
    }
    for t in nodes.iter().rev() {
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        if wanted.contains(&t.id()) {
            found.insert(t.id(), g.clone());
        }
        let Some(gf) = &t.0.grad_fn else {
            continue;
        };
        let input_grads = gf.op.backward(&gf.inputs, t, &g);
        debug_assert_eq!(input_grads.len(), gf.inputs.len());
        for (inp, ig) in gf.inputs.iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            if !relevant.contains(&inp.id()) {
                continue;
            }
            debug_assert_eq!(ig.shape(), inp.shape(), "gradient shape mismatch");
            let acc = match grads.remove(&inp.id()) {
                Some(prev) => prev.add(&ig),
                None => ig,
            };
            grads.insert(inp.id(), acc);
        }
    }

    wrt.iter()
        .map(|t| found.get(&t.id()).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}
