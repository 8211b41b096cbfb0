use std::cell::RefCell;
use std::fmt::Write as _;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::ops::Op;
use crate::tensor::Tensor;

/// Index of a node on its tape. Ids are assigned in recording order, so every
/// input id of a node is smaller than the node's own id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub value: Rc<[f64]>,
    pub generation: u32,
}

#[derive(Debug, Default)]
pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    /// Number of backward passes run over this tape.
    pub generation: u32,
    /// Generation stamped on newly recorded nodes (0 for forward recording).
    pub active: u32,
}

/// Append-only operation record shared by every tensor computed on it.
///
/// A tape is single-threaded; independent tapes may live on different threads.
#[derive(Clone, Default)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("generation", &inner.generation)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        self.push_node(Op::Leaf, Vec::new(), value.shape().to_vec(), value.shared_data())
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: &Tensor) -> Tensor {
        self.push_node(Op::Const, Vec::new(), value.shape().to_vec(), value.shared_data())
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of backward passes that have run over this tape.
    pub fn generation(&self) -> u32 {
        self.inner.borrow().generation
    }

    /// Number of nodes recorded while differentiating (i.e. by a backward pass
    /// with `create_graph` set). Nonzero means gradients-of-gradients are live.
    pub fn backward_recorded_nodes(&self) -> usize {
        self.inner
            .borrow()
            .nodes
            .iter()
            .filter(|n| n.generation > 0)
            .count()
    }

    pub(crate) fn push_node(
        &self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        value: Rc<[f64]>,
    ) -> Tensor {
        let id = {
            let mut inner = self.inner.borrow_mut();
            let id = NodeId(inner.nodes.len());
            debug_assert!(inputs.iter().all(|i| *i < id));
            let generation = inner.active;
            inner.nodes.push(Node {
                op,
                inputs,
                shape: shape.clone(),
                value: value.clone(),
                generation,
            });
            id
        };
        Tensor::from_parts(shape, value, Some((self.clone(), id)))
    }

    pub(crate) fn tensor_at(&self, id: NodeId) -> Tensor {
        let inner = self.inner.borrow();
        let n = &inner.nodes[id.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone(), Some((self.clone(), id)))
    }

    pub(crate) fn detached_at(&self, id: NodeId) -> Tensor {
        let inner = self.inner.borrow();
        let n = &inner.nodes[id.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone(), None)
    }

    /// Whether `node` (transitively) depends on `ancestor`.
    pub fn depends_on(&self, node: NodeId, ancestor: NodeId) -> bool {
        if ancestor > node {
            return false;
        }
        let inner = self.inner.borrow();
        let mut reach = vec![false; node.0 + 1];
        reach[ancestor.0] = true;
        for i in ancestor.0 + 1..=node.0 {
            reach[i] = inner.nodes[i].inputs.iter().any(|j| reach[j.0]);
        }
        reach[node.0]
    }

    pub(crate) fn begin_pass(&self, record: bool) -> Result<PassGuard> {
        let mut inner = self.inner.borrow_mut();
        let generation = inner
            .generation
            .checked_add(1)
            .ok_or(AutodiffError::GenerationOverflow)?;
        inner.generation = generation;
        let previous = inner.active;
        if record {
            inner.active = generation;
        }
        Ok(PassGuard {
            tape: self.clone(),
            previous,
        })
    }

    #[cfg(test)]
    pub(crate) fn set_generation(&self, g: u32) {
        self.inner.borrow_mut().generation = g;
    }

    /// Text edge list, one node per line:
    /// `<id> <op> <- <input ids> shape=<shape> gen=<generation>`.
    pub fn dump(&self) -> String {
        let inner = self.inner.borrow();
        let mut out = String::new();
        for (i, n) in inner.nodes.iter().enumerate() {
            let ins: Vec<String> = n.inputs.iter().map(|j| j.0.to_string()).collect();
            let _ = writeln!(
                out,
                "{i} {} <- [{}] shape={:?} gen={}",
                n.op.describe(),
                ins.join(","),
                n.shape,
                n.generation
            );
        }
        out
    }
}

pub(crate) struct PassGuard {
    tape: Tape,
    previous: u32,
}

impl Drop for PassGuard {
    fn drop(&mut self) {
        self.tape.inner.borrow_mut().active = self.previous;
    }
}
