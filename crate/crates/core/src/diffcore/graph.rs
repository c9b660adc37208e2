//! Recorded computation graphs.
//!
//! A [`Graph`] is an append-only list of primitive ops; node ids are
//! indices, so insertion order is a topological order. Shapes are not fixed
//! at construction: they are checked when the graph is evaluated against a
//! set of leaf bindings, which lets one graph serve every batch size.
//!
//! Forward-mode derivatives are obtained with [`Graph::push_jvp`], which
//! appends the tangent computation as ordinary nodes. Reverse mode over the
//! extended graph then yields gradients of losses that contain JVPs.

use std::collections::HashMap;

use super::tensor::{matmul_t, Tensor};
use crate::error::{KklError, Result};
use crate::scalar::Scalar;

/// Leaf name to value map used to evaluate a graph.
pub type Bindings<S> = HashMap<String, Tensor<S>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op<S> {
    Leaf(String),
    Const(Tensor<S>),
    /// `[m,k] x [k,n]`.
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    /// `scale * x + shift`, elementwise.
    Affine { x: NodeId, scale: S, shift: S },
    /// `[m,n] + [1,n]` with the row repeated down every row.
    AddRow(NodeId, NodeId),
    /// Tensor times a one-element tensor.
    MulScalar(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize, len: usize },
    Reshape { x: NodeId, shape: Vec<usize> },
    Sum(NodeId),
    /// Sum of all entries divided by the leading extent.
    BatchMean(NodeId),
    SqNorm(NodeId),
    /// Per-row vector-matrix product: `x: [n,p]`, `m: [n, p*q]` holding a
    /// row-major `p x q` matrix per row, result `[n,q]`.
    RowVecMat { x: NodeId, m: NodeId },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::ConcatCols(a, b)
            | Op::RowVecMat { x: a, m: b } => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::SliceCols { x, .. }
            | Op::Reshape { x, .. }
            | Op::Sum(x)
            | Op::BatchMean(x)
            | Op::SqNorm(x) => vec![*x],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::AddRow(..) => "add_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape { .. } => "reshape",
            Op::Sum(_) => "sum",
            Op::BatchMean(_) => "batch_mean",
            Op::SqNorm(_) => "sq_norm",
            Op::RowVecMat { .. } => "row_vec_mat",
        }
    }
}

/// Append-only computation graph.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Op<S>>,
    leaves: HashMap<String, NodeId>,
    output: Option<NodeId>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: HashMap::new(),
            output: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op<S> {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op<S>) -> NodeId {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// Named free input. Requesting an existing name returns the same node.
    pub fn leaf(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf(name.to_string()));
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Names of all leaves, in creation order.
    pub fn leaf_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Leaf(n) => Some(n.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, scale: S, shift: S) -> NodeId {
        self.push(Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: NodeId, s: S) -> NodeId {
        self.affine(x, s, S::zero())
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -S::one(), S::zero())
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -S::one(), S::one())
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(x, row))
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        self.push(Op::MulScalar(x, s))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        self.push(Op::Reshape {
            x,
            shape: shape.into(),
        })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn batch_mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::BatchMean(x))
    }

    pub fn sq_norm(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SqNorm(x))
    }

    pub fn row_vec_mat(&mut self, x: NodeId, m: NodeId) -> NodeId {
        self.push(Op::RowVecMat { x, m })
    }

    /// Zeros with the runtime shape of `x`.
    pub fn zeros_like(&mut self, x: NodeId) -> NodeId {
        self.affine(x, S::zero(), S::zero())
    }

    /// Mean over rows of the squared row norms: `sum(x*x) / rows`.
    pub fn mean_sq_rows(&mut self, x: NodeId) -> NodeId {
        let sq = self.mul(x, x);
        self.batch_mean(sq)
    }

    fn combine(&mut self, a: Option<NodeId>, b: Option<NodeId>) -> Option<NodeId> {
        match (a, b) {
            (Some(a), Some(b)) => Some(self.add(a, b)),
            (a, None) => a,
            (None, b) => b,
        }
    }

    /// Appends nodes computing the directional derivative of `output` when
    /// each seed leaf moves along its paired direction node. Returns the
    /// tangent node, which has the shape of `output`.
    ///
    /// The emitted nodes are ordinary primitives, so the tangent can be fed
    /// into further computation and differentiated in reverse mode.
    pub fn push_jvp(&mut self, output: NodeId, seeds: &[(NodeId, NodeId)]) -> Result<NodeId> {
        for &(seed, _) in seeds {
            if !matches!(self.nodes[seed.0], Op::Leaf(_)) {
                return Err(KklError::Dimension(format!(
                    "jvp seed {} is not a leaf",
                    seed.0
                )));
            }
        }
        let n = output.0 + 1;
        let mut tan: Vec<Option<NodeId>> = vec![None; n];
        for i in 0..n {
            let op = self.nodes[i].clone();
            let t = match op {
                Op::Leaf(_) => seeds
                    .iter()
                    .find(|(s, _)| s.0 == i)
                    .map(|&(_, dir)| dir),
                Op::Const(_) => None,
                Op::MatMul(a, b) => {
                    let l = tan[a.0].map(|t| self.matmul(t, b));
                    let r = tan[b.0].map(|t| self.matmul(a, t));
                    self.combine(l, r)
                }
                Op::Add(a, b) => {
                    let (ta, tb) = (tan[a.0], tan[b.0]);
                    self.combine(ta, tb)
                }
                Op::Sub(a, b) => match (tan[a.0], tan[b.0]) {
                    (Some(ta), Some(tb)) => Some(self.sub(ta, tb)),
                    (Some(ta), None) => Some(ta),
                    (None, Some(tb)) => Some(self.neg(tb)),
                    (None, None) => None,
                },
                Op::Mul(a, b) => {
                    let l = tan[a.0].map(|t| self.mul(t, b));
                    let r = tan[b.0].map(|t| self.mul(a, t));
                    self.combine(l, r)
                }
                Op::Affine { x, scale, .. } => tan[x.0].map(|t| self.scale(t, scale)),
                Op::AddRow(x, row) => match (tan[x.0], tan[row.0]) {
                    (tx, None) => tx,
                    (tx, Some(tr)) => {
                        let base = match tx {
                            Some(tx) => tx,
                            None => self.zeros_like(x),
                        };
                        Some(self.add_row(base, tr))
                    }
                },
                Op::MulScalar(x, s) => {
                    let l = tan[x.0].map(|t| self.mul_scalar(t, s));
                    let r = tan[s.0].map(|t| self.mul_scalar(x, t));
                    self.combine(l, r)
                }
                Op::Tanh(x) => tan[x.0].map(|t| {
                    let y = NodeId(i);
                    let y2 = self.mul(y, y);
                    let d = self.one_minus(y2);
                    self.mul(d, t)
                }),
                Op::Sigmoid(x) => tan[x.0].map(|t| {
                    let y = NodeId(i);
                    let om = self.one_minus(y);
                    let d = self.mul(y, om);
                    self.mul(d, t)
                }),
                Op::ConcatCols(a, b) => match (tan[a.0], tan[b.0]) {
                    (None, None) => None,
                    (ta, tb) => {
                        let ta = ta.unwrap_or_else(|| self.zeros_like(a));
                        let tb = tb.unwrap_or_else(|| self.zeros_like(b));
                        Some(self.concat_cols(ta, tb))
                    }
                },
                Op::SliceCols { x, start, len } => {
                    tan[x.0].map(|t| self.slice_cols(t, start, len))
                }
                Op::Reshape { x, shape } => tan[x.0].map(|t| self.reshape(t, shape)),
                Op::Sum(x) => tan[x.0].map(|t| self.sum(t)),
                Op::BatchMean(x) => tan[x.0].map(|t| self.batch_mean(t)),
                Op::SqNorm(x) => tan[x.0].map(|t| {
                    let p = self.mul(x, t);
                    let s = self.sum(p);
                    self.scale(s, S::lit(2.0))
                }),
                Op::RowVecMat { x, m } => {
                    let l = tan[x.0].map(|t| self.row_vec_mat(t, m));
                    let r = tan[m.0].map(|t| self.row_vec_mat(x, t));
                    self.combine(l, r)
                }
            };
            tan[i] = t;
        }
        Ok(match tan[output.0] {
            Some(t) => t,
            None => self.zeros_like(output),
        })
    }

    /// Evaluates every node needed for `outputs`.
    pub fn forward<'a>(
        &'a self,
        bindings: &[&'a Bindings<S>],
        outputs: &[NodeId],
    ) -> Result<Execution<'a, S>> {
        let n = outputs.iter().map(|o| o.0 + 1).max().unwrap_or(0);
        let mut needed = vec![false; n];
        for o in outputs {
            needed[o.0] = true;
        }
        for i in (0..n).rev() {
            if needed[i] {
                for inp in self.nodes[i].inputs() {
                    needed[inp.0] = true;
                }
            }
        }
        let mut exec = Execution {
            graph: self,
            leaves: vec![None; n],
            values: vec![None; n],
        };
        for i in 0..n {
            if !needed[i] {
                continue;
            }
            match &self.nodes[i] {
                Op::Leaf(name) => {
                    let t = bindings
                        .iter()
                        .find_map(|b| b.get(name))
                        .ok_or_else(|| KklError::UnboundLeaf(name.clone()))?;
                    exec.leaves[i] = Some(t);
                }
                Op::Const(_) => {}
                op => {
                    let v = exec.eval_op(op)?;
                    if !v.is_finite() {
                        return Err(KklError::NonFinite(format!("node {i} ({})", op.name())));
                    }
                    exec.values[i] = Some(v);
                }
            }
        }
        Ok(exec)
    }
}

/// Node values from one forward pass.
pub struct Execution<'a, S> {
    graph: &'a Graph<S>,
    leaves: Vec<Option<&'a Tensor<S>>>,
    values: Vec<Option<Tensor<S>>>,
}

fn shape_err<T>(context: &str, expected: &[usize], got: &[usize]) -> Result<T> {
    Err(KklError::ShapeMismatch {
        context: context.to_string(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    })
}

impl<'a, S: Scalar> Execution<'a, S> {
    /// Value of a node computed by this pass.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        self.try_value(id).expect("node was not evaluated")
    }

    fn try_value(&self, id: NodeId) -> Option<&Tensor<S>> {
        if let Op::Const(t) = &self.graph.nodes[id.0] {
            return Some(t);
        }
        self.leaves
            .get(id.0)
            .copied()
            .flatten()
            .or_else(|| self.values.get(id.0).and_then(|v| v.as_ref()))
    }

    fn eval_op(&self, op: &Op<S>) -> Result<Tensor<S>> {
        let v = |id: &NodeId| self.value(*id);
        Ok(match op {
            Op::Leaf(_) | Op::Const(_) => unreachable!("handled by caller"),
            Op::MatMul(a, b) => matmul_t(v(a), false, v(b), false)?,
            Op::Add(a, b) => v(a).add(v(b))?,
            Op::Sub(a, b) => v(a).sub(v(b))?,
            Op::Mul(a, b) => v(a).mul(v(b))?,
            Op::Affine { x, scale, shift } => {
                let (s, c) = (*scale, *shift);
                v(x).map(|e| s * e + c)
            }
            Op::AddRow(x, row) => v(x).add_row(v(row))?,
            Op::MulScalar(x, s) => {
                let sv = v(s);
                if sv.numel() != 1 {
                    return shape_err("mul_scalar factor", &[1], sv.shape());
                }
                v(x).scale(sv.item())
            }
            Op::Tanh(x) => v(x).tanh(),
            Op::Sigmoid(x) => v(x).sigmoid(),
            Op::ConcatCols(a, b) => v(a).concat_cols(v(b))?,
            Op::SliceCols { x, start, len } => v(x).slice_cols(*start, *len)?,
            Op::Reshape { x, shape } => v(x).reshape(shape.clone())?,
            Op::Sum(x) => Tensor::scalar(v(x).sum()),
            Op::BatchMean(x) => {
                let xv = v(x);
                let rows = xv.shape().first().copied().unwrap_or(1).max(1);
                Tensor::scalar(xv.sum() / S::from_usize_(rows))
            }
            Op::SqNorm(x) => Tensor::scalar(v(x).sq_norm()),
            Op::RowVecMat { x, m } => v(x).row_vec_mat(v(m))?,
        })
    }

    /// Reverse-mode gradient of a one-element node with respect to `wrt`.
    /// Nodes in `wrt` that the output does not depend on get zero gradients.
    pub fn gradients(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor<S>>> {
        let out_val = self
            .try_value(output)
            .ok_or_else(|| KklError::Dimension("output node not evaluated".into()))?;
        if out_val.numel() != 1 {
            return Err(KklError::NonScalarOutput(out_val.shape().to_vec()));
        }
        let n = output.0 + 1;
        let nodes = &self.graph.nodes;
        // Forward dependency mask: nodes influenced by any wrt node.
        let mut dep = vec![false; n];
        for w in wrt {
            if w.0 < n {
                dep[w.0] = true;
            }
        }
        for i in 0..n {
            if !dep[i] && nodes[i].inputs().iter().any(|j| dep[j.0]) {
                dep[i] = true;
            }
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n];
        if dep[output.0] {
            grads[output.0] = Some(Tensor::full(out_val.shape().to_vec(), S::one()));
        }
        let keep: std::collections::HashSet<usize> = wrt.iter().map(|w| w.0).collect();
        for i in (0..n).rev() {
            if !dep[i] {
                continue;
            }
            let g = if keep.contains(&i) {
                match &grads[i] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backward_op(i, &g, &dep, &mut grads)?;
        }
        Ok(wrt
            .iter()
            .map(|w| {
                grads
                    .get(w.0)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| match self.try_value(*w) {
                        Some(v) => Tensor::zeros(v.shape().to_vec()),
                        None => Tensor::zeros(vec![0]),
                    })
            })
            .collect())
    }

    fn backward_op(
        &self,
        i: usize,
        g: &Tensor<S>,
        dep: &[bool],
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let v = |id: NodeId| self.value(id);
        let mut acc = |id: NodeId, t: Tensor<S>| -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let y = || self.value(NodeId(i));
        match &self.graph.nodes[i] {
            Op::Leaf(_) | Op::Const(_) => {}
            Op::MatMul(a, b) => {
                if dep[a.0] {
                    acc(*a, matmul_t(g, false, v(*b), true)?)?;
                }
                if dep[b.0] {
                    acc(*b, matmul_t(v(*a), true, g, false)?)?;
                }
            }
            Op::Add(a, b) => {
                if dep[a.0] {
                    acc(*a, g.clone())?;
                }
                if dep[b.0] {
                    acc(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if dep[a.0] {
                    acc(*a, g.clone())?;
                }
                if dep[b.0] {
                    acc(*b, g.scale(-S::one()))?;
                }
            }
            Op::Mul(a, b) => {
                if dep[a.0] {
                    acc(*a, g.zip_map(v(*b), |gv, bv| gv * bv)?)?;
                }
                if dep[b.0] {
                    acc(*b, g.zip_map(v(*a), |gv, av| gv * av)?)?;
                }
            }
            Op::Affine { x, scale, .. } => {
                if dep[x.0] {
                    acc(*x, g.scale(*scale))?;
                }
            }
            Op::AddRow(x, row) => {
                if dep[x.0] {
                    acc(*x, g.clone())?;
                }
                if dep[row.0] {
                    let rv = v(*row);
                    let cols = rv.numel();
                    let mut s = vec![S::zero(); cols];
                    for chunk in g.data().chunks(cols) {
                        for (a, &b) in s.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    acc(*row, Tensor::new(rv.shape().to_vec(), s)?)?;
                }
            }
            Op::MulScalar(x, s) => {
                let sv = v(*s);
                if dep[x.0] {
                    acc(*x, g.scale(sv.item()))?;
                }
                if dep[s.0] {
                    let dot: S = g.data().iter().zip(v(*x).data()).map(|(&a, &b)| a * b).sum();
                    acc(*s, Tensor::new(sv.shape().to_vec(), vec![dot])?)?;
                }
            }
            Op::Tanh(x) => {
                if dep[x.0] {
                    acc(*x, g.zip_map(y(), |gv, yv| gv * (S::one() - yv * yv))?)?;
                }
            }
            Op::Sigmoid(x) => {
                if dep[x.0] {
                    acc(*x, g.zip_map(y(), |gv, yv| gv * yv * (S::one() - yv))?)?;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = v(*a).cols();
                let cb = v(*b).cols();
                let rows = g.rows();
                if dep[a.0] {
                    let mut d = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row_slice(r)[..ca]);
                    }
                    acc(*a, Tensor::matrix(rows, ca, d)?)?;
                }
                if dep[b.0] {
                    let mut d = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row_slice(r)[ca..]);
                    }
                    acc(*b, Tensor::matrix(rows, cb, d)?)?;
                }
            }
            Op::SliceCols { x, start, len } => {
                if dep[x.0] {
                    let xv = v(*x);
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let mut d = vec![S::zero(); rows * cols];
                    for r in 0..rows {
                        d[r * cols + start..r * cols + start + len]
                            .copy_from_slice(g.row_slice(r));
                    }
                    acc(*x, Tensor::matrix(rows, cols, d)?)?;
                }
            }
            Op::Reshape { x, .. } => {
                if dep[x.0] {
                    acc(*x, g.reshape(v(*x).shape().to_vec())?)?;
                }
            }
            Op::Sum(x) => {
                if dep[x.0] {
                    acc(*x, Tensor::full(v(*x).shape().to_vec(), g.item()))?;
                }
            }
            Op::BatchMean(x) => {
                if dep[x.0] {
                    let xv = v(*x);
                    let rows = xv.shape().first().copied().unwrap_or(1).max(1);
                    let val = g.item() / S::from_usize_(rows);
                    acc(*x, Tensor::full(xv.shape().to_vec(), val))?;
                }
            }
            Op::SqNorm(x) => {
                if dep[x.0] {
                    let two_g = S::lit(2.0) * g.item();
                    acc(*x, v(*x).scale(two_g))?;
                }
            }
            Op::RowVecMat { x, m } => {
                let (xv, mv) = (v(*x), v(*m));
                let (n, p) = (xv.rows(), xv.cols());
                let q = g.cols();
                if dep[x.0] {
                    let mut d = vec![S::zero(); n * p];
                    for r in 0..n {
                        let gr = g.row_slice(r);
                        let mr = mv.row_slice(r);
                        for i in 0..p {
                            d[r * p + i] = mr[i * q..(i + 1) * q]
                                .iter()
                                .zip(gr)
                                .map(|(&a, &b)| a * b)
                                .sum();
                        }
                    }
                    acc(*x, Tensor::matrix(n, p, d)?)?;
                }
                if dep[m.0] {
                    let mut d = vec![S::zero(); n * p * q];
                    for r in 0..n {
                        let gr = g.row_slice(r);
                        let xr = xv.row_slice(r);
                        for i in 0..p {
                            let o = &mut d[r * p * q + i * q..r * p * q + (i + 1) * q];
                            for (oj, &gj) in o.iter_mut().zip(gr) {
                                *oj = xr[i] * gj;
                            }
                        }
                    }
                    acc(*m, Tensor::matrix(n, p * q, d)?)?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
