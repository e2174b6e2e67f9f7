//! Minimal reverse-mode differentiable arrays.
//!
//! A [`Tape`] records every primitive applied to at least one tracked input.
//! Arrays created without a tape are constants: operations on constants only
//! compute values, so the same model code serves training (tracked) and
//! evaluation (untracked) without duplication.
//!
//! Node ids grow monotonically, so the tape is always in topological order and
//! the backward pass is a single reverse sweep.

mod matmul;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

pub use ops::differentiable_median;
pub(crate) use ops::log_sum_exp;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: value {value} outside domain ({domain})")]
    Domain {
        op: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward requires a root recorded on a tape")]
    UntrackedRoot,
    #[error("{0}: operands were recorded on different tapes")]
    TapeMismatch(&'static str),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

type BackwardFn = Box<dyn Fn(&[f64], &mut GradBuffer)>;

struct Node {
    op: &'static str,
    len: usize,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Ordered record of primitive operations.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable leaf.
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>) -> Result<DiffArray> {
        check_len("leaf", shape, values.len())?;
        let id = self.push("leaf", values.len(), Vec::new(), None);
        Ok(DiffArray {
            shape: shape.to_vec(),
            values: values.into(),
            node: Some(NodeRef { tape: self.clone(), id }),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Operation names in recording order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    /// Parent ids of every node; each parent id is smaller than its child's.
    pub fn parent_links(&self) -> Vec<Vec<usize>> {
        self.nodes.borrow().iter().map(|n| n.parents.clone()).collect()
    }

    fn push(&self, op: &'static str, len: usize, parents: Vec<usize>, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            len,
            parents,
            backward,
        });
        nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// Multi-dimensional f64 array, row-major, optionally linked into a [`Tape`].
#[derive(Clone)]
pub struct DiffArray {
    shape: Vec<usize>,
    values: Rc<[f64]>,
    node: Option<NodeRef>,
}

impl fmt::Debug for DiffArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffArray")
            .field("shape", &self.shape)
            .field("values", &&self.values[..])
            .field("tracked", &self.is_tracked())
            .finish()
    }
}

impl DiffArray {
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        check_len("constant", shape, values.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            values: values.into(),
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value].into(),
            node: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values: values.into(),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n].into(),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on array of shape {:?}", self.shape);
        self.values[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Copy with the tape link removed.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.clone(),
            node: None,
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self) -> Result<Gradients> {
        if !self.is_scalar() {
            return Err(TensorError::NonScalarRoot(self.shape.clone()));
        }
        let node = self.node.as_ref().ok_or(TensorError::UntrackedRoot)?;
        let nodes = node.tape.nodes.borrow();
        let mut buf = GradBuffer {
            slots: (0..nodes.len()).map(|_| None).collect(),
            lens: nodes.iter().map(|n| n.len).collect(),
        };
        buf.slots[node.id] = Some(vec![1.0]);
        for id in (0..=node.id).rev() {
            let Some(grad) = buf.slots[id].take() else {
                continue;
            };
            match &nodes[id].backward {
                Some(backward) => backward(&grad, &mut buf),
                None => buf.slots[id] = Some(grad),
            }
        }
        Ok(Gradients {
            tape: node.tape.clone(),
            slots: buf.slots,
        })
    }

    fn node_id_on(&self, tape: &Tape) -> Option<usize> {
        self.node.as_ref().filter(|n| n.tape.same(tape)).map(|n| n.id)
    }
}

/// Leaf gradients produced by [`DiffArray::backward`].
pub struct Gradients {
    tape: Tape,
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros if the root does not depend on it
    /// or if it is not a leaf of this tape.
    pub fn wrt(&self, leaf: &DiffArray) -> Vec<f64> {
        leaf.node_id_on(&self.tape)
            .and_then(|id| self.slots.get(id).cloned().flatten())
            .unwrap_or_else(|| vec![0.0; leaf.len()])
    }

    /// True when the root depends on `leaf`.
    pub fn reached(&self, leaf: &DiffArray) -> bool {
        leaf.node_id_on(&self.tape)
            .and_then(|id| self.slots.get(id))
            .is_some_and(|s| s.is_some())
    }
}

pub(crate) struct GradBuffer {
    slots: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl GradBuffer {
    /// Adds into the gradient slot of `id`, allocating zeros on first use.
    pub(crate) fn accumulate(&mut self, id: Option<usize>, f: impl FnOnce(&mut [f64])) {
        if let Some(id) = id {
            let len = self.lens[id];
            let slot = self.slots[id].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(TensorError::Invalid {
            op,
            detail: format!("shape {shape:?} needs {expected} values, got {len}"),
        });
    }
    Ok(())
}

/// Tape shared by the tracked operands, if any.
fn common_tape(op: &'static str, inputs: &[&DiffArray]) -> Result<Option<Tape>> {
    let mut tape: Option<&Tape> = None;
    for x in inputs {
        if let Some(node) = &x.node {
            match tape {
                None => tape = Some(&node.tape),
                Some(t) if t.same(&node.tape) => {}
                Some(_) => return Err(TensorError::TapeMismatch(op)),
            }
        }
    }
    Ok(tape.cloned())
}

/// Builds the output array, recording a node when a tape is involved.
fn record<F>(
    op: &'static str,
    tape: Option<Tape>,
    shape: Vec<usize>,
    values: Rc<[f64]>,
    parents: &[&DiffArray],
    backward: F,
) -> DiffArray
where
    F: Fn(&[f64], &[Option<usize>], &mut GradBuffer) + 'static,
{
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    let node = tape.map(|tape| {
        let ids: Vec<Option<usize>> = parents.iter().map(|p| p.node_id_on(&tape)).collect();
        let parent_ids = ids.iter().flatten().copied().collect();
        let id = tape.push(
            op,
            values.len(),
            parent_ids,
            Some(Box::new(move |g: &[f64], buf: &mut GradBuffer| backward(g, &ids, buf))),
        );
        NodeRef { tape, id }
    });
    DiffArray { shape, values, node }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_rejects_wrong_length() {
        assert!(DiffArray::constant(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_and_untracked() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert_eq!(x.backward().err(), Some(TensorError::NonScalarRoot(vec![2])));
        let c = DiffArray::scalar(1.0);
        assert_eq!(c.backward().err(), Some(TensorError::UntrackedRoot));
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let y = x.square().mul(&x.relu()).unwrap().sum();
        let _ = y.backward().unwrap();
        for (id, parents) in tape.parent_links().iter().enumerate() {
            assert!(parents.iter().all(|&p| p < id));
        }
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let a = Tape::new().leaf(&[1], vec![1.0]).unwrap();
        let b = Tape::new().leaf(&[1], vec![1.0]).unwrap();
        assert_eq!(a.add(&b).err(), Some(TensorError::TapeMismatch("add")));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let unused = tape.leaf(&[3], vec![0.0; 3]).unwrap();
        let g = x.sum().backward().unwrap();
        assert!(!g.reached(&unused));
        assert_eq!(g.wrt(&unused), vec![0.0; 3]);
    }
}
