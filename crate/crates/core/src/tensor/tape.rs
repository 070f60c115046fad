use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, Primitive, SavedInput};
use super::{NodeRef, ParamId, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a named leaf: a model parameter or an external input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LeafKey {
    Param(ParamId),
    Input(u64),
}

enum NodeKind {
    Leaf(Option<LeafKey>),
    Op { prim: Primitive, saved: Vec<SavedInput>, out: Arc<Vec<f64>>, aux: Vec<f64> },
}

struct Node {
    inputs: Vec<Option<usize>>,
    len: usize,
    kind: NodeKind,
}

/// Records primitive applications for reverse-mode differentiation.
///
/// A tape is single-threaded; use one tape per training item.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    keyed: RefCell<HashMap<LeafKey, Tensor>>,
    op_nodes: Cell<usize>,
    counters: RefCell<BTreeMap<&'static str, usize>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            keyed: RefCell::new(HashMap::new()),
            op_nodes: Cell::new(0),
            counters: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    /// Sets the recording mode and returns the previous one.
    pub fn set_recording(&self, on: bool) -> bool {
        self.recording.replace(on)
    }

    /// Disables recording until the guard is dropped.
    pub fn no_grad(&self) -> NoGradGuard<'_> {
        let previous = self.set_recording(false);
        NoGradGuard { tape: self, previous }
    }

    /// Number of recorded primitive applications (leaves excluded).
    pub fn node_count(&self) -> usize {
        self.op_nodes.get()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.borrow().len() - self.op_nodes.get()
    }

    /// Increments a named counter. Used to count taped layer applications.
    pub fn bump(&self, tag: &'static str) {
        *self.counters.borrow_mut().entry(tag).or_insert(0) += 1;
    }

    pub fn counter(&self, tag: &str) -> usize {
        self.counters.borrow().get(tag).copied().unwrap_or(0)
    }

    fn push_leaf(&self, value: &Tensor, key: Option<LeafKey>) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { inputs: Vec::new(), len: value.numel(), kind: NodeKind::Leaf(key) });
        Tensor::from_parts(
            value.shape().to_vec(),
            Arc::clone(value.data_arc()),
            Some(NodeRef { tape: self.id, index }),
        )
    }

    /// Anonymous differentiable leaf. Returns a constant when not recording.
    pub fn variable(&self, value: Tensor) -> Tensor {
        if !self.is_recording() {
            return value.detach();
        }
        self.push_leaf(&value, None)
    }

    /// Leaf registered under `key`. Repeated calls return the same leaf, so
    /// a parameter used in several places accumulates a single gradient.
    pub fn leaf(&self, key: LeafKey, value: &Tensor) -> Tensor {
        if let Some(t) = self.keyed.borrow().get(&key) {
            return t.clone();
        }
        if !self.is_recording() {
            return value.detach();
        }
        let t = self.push_leaf(value, Some(key));
        self.keyed.borrow_mut().insert(key, t.clone());
        t
    }

    pub fn param(&self, id: ParamId, value: &Tensor) -> Tensor {
        self.leaf(LeafKey::Param(id), value)
    }

    /// The leaf registered under `key`, if any.
    pub fn keyed_leaf(&self, key: LeafKey) -> Option<Tensor> {
        self.keyed.borrow().get(&key).cloned()
    }

    fn check_owner(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(node) if node.tape == self.id => Ok(Some(node.index)),
            Some(_) => Err(TensorError::ForeignTape),
        }
    }

    /// Applies `kind` to `inputs`, recording a node when recording is on and
    /// at least one input is tracked.
    pub fn apply(&self, kind: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        let fwd = kernels::forward(&kind, inputs)?;
        let input_nodes = inputs.iter().map(|t| self.check_owner(t)).collect::<Result<Vec<_>>>()?;
        let data = Arc::new(fwd.data);
        if !self.is_recording() || input_nodes.iter().all(Option::is_none) {
            return Ok(Tensor::from_parts(fwd.shape, data, None));
        }
        let saved = inputs
            .iter()
            .map(|t| SavedInput { shape: t.shape().to_vec(), data: Arc::clone(t.data_arc()) })
            .collect();
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            inputs: input_nodes,
            len: data.len(),
            kind: NodeKind::Op { prim: kind, saved, out: Arc::clone(&data), aux: fwd.aux },
        });
        self.op_nodes.set(self.op_nodes.get() + 1);
        Ok(Tensor::from_parts(fwd.shape, data, Some(NodeRef { tape: self.id, index })))
    }

    /// Gradients of a scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        self.vjp(&[(loss, &[1.0])])
    }

    /// Vector-Jacobian product: pulls the given output cotangents back to
    /// every leaf. Untracked outputs contribute nothing.
    pub fn vjp(&self, seeds: &[(&Tensor, &[f64])]) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let mut top = 0;
        for (t, cot) in seeds {
            if cot.len() != t.numel() {
                return Err(TensorError::Shape {
                    op: "vjp",
                    shapes: vec![t.shape().to_vec(), vec![cot.len()]],
                });
            }
            if let Some(i) = self.check_owner(t)? {
                accumulate(&mut grads[i], cot);
                top = top.max(i + 1);
            }
        }
        for i in (0..top).rev() {
            let node = &nodes[i];
            let NodeKind::Op { prim, saved, out, aux } = &node.kind else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = kernels::backward(prim, saved, out, aux, &g, &needs);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(j), Some(ig)) = (input, ig) {
                    accumulate(&mut grads[*j], &ig);
                }
            }
        }
        let mut by_node = HashMap::new();
        let mut keys = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let NodeKind::Leaf(key) = &node.kind {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.len]);
                if let Some(key) = key {
                    keys.insert(*key, i);
                }
                by_node.insert(i, g);
            }
        }
        let shapes = self
            .keyed
            .borrow()
            .iter()
            .map(|(k, t)| (*k, t.shape().to_vec()))
            .collect();
        Ok(Gradients { tape: self.id, by_node, keys, shapes })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Restores the previous recording mode on drop.
pub struct NoGradGuard<'a> {
    tape: &'a Tape,
    previous: bool,
}

impl Drop for NoGradGuard<'_> {
    fn drop(&mut self) {
        self.tape.set_recording(self.previous);
    }
}

/// Leaf gradients produced by [`Tape::backward`] or [`Tape::vjp`].
pub struct Gradients {
    tape: u64,
    by_node: HashMap<usize, Vec<f64>>,
    keys: BTreeMap<LeafKey, usize>,
    shapes: HashMap<LeafKey, Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a leaf tensor; zeros for constants or
    /// tensors from another tape.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        let g = t
            .node()
            .filter(|n| n.tape == self.tape)
            .and_then(|n| self.by_node.get(&n.index))
            .cloned()
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        Tensor::new(t.shape().to_vec(), g).expect("gradient length matches leaf")
    }

    /// Gradient for a keyed leaf, or `None` if the key was never registered.
    pub fn get(&self, key: LeafKey) -> Option<Tensor> {
        let node = self.keys.get(&key)?;
        let shape = self.shapes.get(&key)?.clone();
        Tensor::new(shape, self.by_node[node].clone()).ok()
    }

    /// Gradients of every keyed leaf on the tape.
    pub fn keyed(&self) -> BTreeMap<LeafKey, Tensor> {
        self.keys.keys().filter_map(|k| self.get(*k).map(|g| (*k, g))).collect()
    }

    /// Gradients of every parameter leaf on the tape, ordered by id.
    pub fn params(&self) -> BTreeMap<ParamId, Tensor> {
        self.keys
            .keys()
            .filter_map(|k| match k {
                LeafKey::Param(id) => self.get(*k).map(|g| (*id, g)),
                LeafKey::Input(_) => None,
            })
            .collect()
    }
}

macro_rules! unary_ops {
    ($($name:ident => $prim:expr),* $(,)?) => {
        impl Tape {
            $(
                pub fn $name(&self, a: &Tensor) -> Result<Tensor> {
                    self.apply($prim, &[a])
                }
            )*
        }
    };
}

macro_rules! binary_ops {
    ($($name:ident => $prim:expr),* $(,)?) => {
        impl Tape {
            $(
                pub fn $name(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
                    self.apply($prim, &[a, b])
                }
            )*
        }
    };
}

unary_ops! {
    transpose => Primitive::Transpose,
    relu => Primitive::Relu,
    gelu => Primitive::Gelu,
    tanh => Primitive::Tanh,
    sigmoid => Primitive::Sigmoid,
    log_sigmoid => Primitive::LogSigmoid,
    log => Primitive::Log,
    exp => Primitive::Exp,
    sin => Primitive::Sin,
    cos => Primitive::Cos,
    abs => Primitive::Abs,
    sum => Primitive::Sum { axis: None },
    mean => Primitive::Mean { axis: None },
}

binary_ops! {
    add => Primitive::Add,
    sub => Primitive::Sub,
    mul => Primitive::Mul,
    div => Primitive::Div,
    maximum => Primitive::Maximum,
    minimum => Primitive::Minimum,
    matmul => Primitive::MatMul,
    bilinear_sample => Primitive::BilinearSample,
}

impl Tape {
    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn shift(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.apply(Primitive::Shift(c), &[a])
    }

    pub fn pow_scalar(&self, a: &Tensor, p: f64) -> Result<Tensor> {
        self.apply(Primitive::PowScalar(p), &[a])
    }

    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.apply(Primitive::Softmax { axis }, &[a])
    }

    pub fn sum_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.apply(Primitive::Sum { axis: Some(axis) }, &[a])
    }

    pub fn mean_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.apply(Primitive::Mean { axis: Some(axis) }, &[a])
    }

    pub fn layer_norm(&self, a: &Tensor, eps: f64) -> Result<Tensor> {
        self.apply(Primitive::LayerNorm { eps }, &[a])
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn index_select(&self, a: &Tensor, indices: Vec<usize>) -> Result<Tensor> {
        self.apply(Primitive::IndexSelect { indices: Arc::new(indices) }, &[a])
    }

    /// `x * w + b` for `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Linear, &[x, w, b])
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let p = self.mul(a, b)?;
        self.sum(&p)
    }
}
