//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes one
//! node whose inputs already exist, so insertion order is a topological
//! order and the backward pass simply walks the list in reverse.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Clamp(NodeId, f64, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Clamp(..) => "clamp",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceCols(a, _, _)
            | Op::Clamp(a, _, _) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node of a graph.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, zero-filled when the node is disconnected.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Inputs, parameters and constants all enter the graph as leaves.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{} at node {}", op.name(), self.nodes.len()),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    /// Adds a `1 × k` (or length-`k`) row to every row of an `n × k` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let rv = self.value(row);
        av.require_rank2("add_row")?;
        let k = av.cols();
        if rv.len() != k {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(k.max(1)) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let v = Tensor::from_raw(av.shape().to_vec(), data);
        self.push(Op::AddRow(a, row), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::Offset(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    /// `ln(1 + e^a)`, evaluated without overflow.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            v.require_rank2("concat_cols")?;
            if v.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {rows} vs {}", v.rows()),
                ));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_values(r));
            }
        }
        let v = Tensor::from_raw(vec![rows, total], data);
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        t.require_rank2("slice_cols")?;
        if start >= end || end > t.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {:?}", t.shape()),
            ));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.row_values(r)[start..end]);
        }
        let v = Tensor::from_raw(vec![rows, end - start], data);
        self.push(Op::SliceCols(a, start, end), v)
    }

    /// Elementwise clamp; gradient passes only where `lo <= a <= hi`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            for input in node.op.inputs() {
                if input.0 >= idx {
                    return Err(Error::Cycle(idx));
                }
            }
            for (input, g) in self.local_grads(node, &upstream) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, node: &Node, up: &Tensor) -> Vec<(NodeId, Tensor)> {
        let val = |id: NodeId| self.value(id);
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (*a, gemm(up, false, val(*b), true)),
                (*b, gemm(val(*a), true, up, false)),
            ],
            Op::AddRow(a, row) => {
                let k = up.cols();
                let mut db = vec![0.0; k];
                for chunk in up.data().chunks(k.max(1)) {
                    for (acc, g) in db.iter_mut().zip(chunk) {
                        *acc += g;
                    }
                }
                vec![
                    (*a, up.clone()),
                    (*row, Tensor::from_raw(val(*row).shape().to_vec(), db)),
                ]
            }
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Sub(a, b) => vec![(*a, up.clone()), (*b, up.map(|g| -g))],
            Op::Mul(a, b) => vec![
                (*a, up.zip_map(val(*b), |g, y| g * y)),
                (*b, up.zip_map(val(*a), |g, x| g * x)),
            ],
            Op::Div(a, b) => {
                let bv = val(*b);
                let da = up.zip_map(bv, |g, y| g / y);
                let db = up
                    .zip_map(&node.value, |g, q| g * q)
                    .zip_map(bv, |gq, y| -gq / y);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, up.map(|g| g * c))],
            Op::Offset(a) => vec![(*a, up.clone())],
            Op::Relu(a) => vec![(
                *a,
                up.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            )],
            Op::Sigmoid(a) => vec![(*a, up.zip_map(&node.value, |g, s| g * s * (1.0 - s)))],
            Op::Softplus(a) => vec![(*a, up.zip_map(val(*a), |g, x| g * sigmoid(x)))],
            Op::Exp(a) => vec![(*a, up.zip_map(&node.value, |g, e| g * e))],
            Op::Log(a) => vec![(*a, up.zip_map(val(*a), |g, x| g / x))],
            Op::Square(a) => vec![(*a, up.zip_map(val(*a), |g, x| 2.0 * g * x))],
            Op::Sum(a) => {
                let g = up.data()[0];
                vec![(*a, Tensor::full(val(*a).shape(), g))]
            }
            Op::Mean(a) => {
                let av = val(*a);
                let g = up.data()[0] / av.len() as f64;
                vec![(*a, Tensor::full(av.shape(), g))]
            }
            Op::ConcatCols(parts) => {
                let rows = up.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&up.row_values(r)[offset..offset + w]);
                    }
                    out.push((p, Tensor::from_raw(vec![rows, w], data)));
                    offset += w;
                }
                out
            }
            Op::SliceCols(a, start, end) => {
                let av = val(*a);
                let (rows, cols) = (av.rows(), av.cols());
                let w = end - start;
                let mut data = vec![0.0; rows * cols];
                for r in 0..rows {
                    data[r * cols + start..r * cols + end]
                        .copy_from_slice(&up.data()[r * w..(r + 1) * w]);
                }
                vec![(*a, Tensor::from_raw(vec![rows, cols], data))]
            }
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                up.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
            )],
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
