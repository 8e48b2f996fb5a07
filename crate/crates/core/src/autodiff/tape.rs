use crate::error::{contract, Error, Result};
use crate::linalg::Matrix;

/// Epsilon added to the variance inside the square root of `layernorm_rows`.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag together with whatever the backward rule needs cached.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul,
    /// `a · bᵀ`
    MatMulNt,
    Add,
    /// Elementwise product.
    Mul,
    /// Adds a `1 x c` row vector to every row.
    AddRowVector,
    /// Multiplies every row elementwise by a `1 x c` row vector.
    MulRowVector,
    Relu,
    Gelu,
    SoftmaxRows,
    /// Normalises each row to zero mean, unit variance (no affine part).
    LayerNormRows {
        inv_std: Vec<f64>,
    },
    Scale(f64),
    Dropout {
        mask: Matrix,
    },
    /// Mean negative log-likelihood of integer targets under row softmax.
    CrossEntropyMean {
        probs: Matrix,
        targets: Vec<usize>,
    },
    Mean,
    /// Gathers rows by index (repeats allowed); doubles as embedding lookup.
    SelectRows(Vec<usize>),
    SliceBlock {
        r0: usize,
        c0: usize,
    },
    /// Writes each parent into a zero matrix at its `(row, col)` offset.
    Assemble(Vec<(usize, usize)>),
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) value: Matrix,
    pub(crate) op: Op,
    pub(crate) parents: Vec<NodeId>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Default, Debug)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients of a scalar loss, keyed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Nodes that hold a gradient.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| NodeId(i))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input: a leaf that never requires a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.rows() != 1 || v.cols() != 1 {
            return Err(contract(format!("expected scalar node, got {}", v.shape())));
        }
        Ok(v[(0, 0)])
    }

    pub(crate) fn push(&mut self, value: Matrix, op: Op, parents: Vec<NodeId>) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse pass from a `1 x 1` loss. Only nodes that require a gradient
    /// and lie on a path from the loss receive one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let wants: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            self.accumulate_local(idx, &upstream, &wants, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}
