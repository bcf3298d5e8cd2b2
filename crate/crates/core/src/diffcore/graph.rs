use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::{Error, Result, Scalar};

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The fixed operation vocabulary. Every kind has a forward rule in
/// [`Op::eval`] and a matching adjoint in `Graph::backward`.
#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    Leaf,
    /// `[m,k] · [k,n]`.
    Matmul,
    /// Same-shape sum, or `[m,n] + [n]` / `[m,n] + [1,n]` row broadcast.
    Add,
    /// Same-shape elementwise product.
    Mul,
    Scale(T),
    /// Row gather from a `[V,h]` table.
    EmbeddingLookup(Vec<usize>),
    /// `[L,h] -> [1,h]`.
    MeanPoolRows,
    Tanh,
    Exp,
    Log,
    SoftmaxLastdim,
    LogSoftmaxLastdim,
    /// `[n] -> [1]`, `[m,n] -> [m,1]`.
    LogSumExpLastdim,
    /// All elements to `[1]`.
    Sum,
    ConcatLastdim,
    /// Zero-mean unit-variance normalisation of each row, no affine part.
    LayerNormLastdim,
    /// `softmax(q kᵀ / sqrt(d)) v` for `q:[L,d]`, `k:[M,d]`, `v:[M,e]`.
    ScaledDotAttention,
    Transpose,
    Reshape(Vec<usize>),
}

impl<T: Scalar> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::EmbeddingLookup(_) => "embedding_lookup",
            Op::MeanPoolRows => "mean_pool_rows",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::SoftmaxLastdim => "softmax_lastdim",
            Op::LogSoftmaxLastdim => "log_softmax_lastdim",
            Op::LogSumExpLastdim => "logsumexp_lastdim",
            Op::Sum => "sum",
            Op::ConcatLastdim => "concat_lastdim",
            Op::LayerNormLastdim => "layernorm_lastdim",
            Op::ScaledDotAttention => "scaled_dot_attention",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::ConcatLastdim => None,
            Op::Matmul | Op::Add | Op::Mul => Some(2),
            Op::ScaledDotAttention => Some(3),
            _ => Some(1),
        }
    }

    /// Forward rule. Checks the shape signature of `inputs`.
    pub fn eval(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(Error::contract(format!(
                    "{} takes {n} inputs, got {}",
                    self.name(),
                    inputs.len()
                )));
            }
        }
        let shape_err = || {
            Error::contract(format!(
                "{}: incompatible input shapes {:?}",
                self.name(),
                inputs
                    .iter()
                    .map(|t| t.shape().to_vec())
                    .collect::<Vec<_>>()
            ))
        };
        match self {
            Op::Leaf => Err(Error::contract("leaf nodes have no forward rule")),
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                    return Err(shape_err());
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut out = vec![T::zero(); m * n];
                matmul_into(a.data(), b.data(), &mut out, m, k, n);
                Tensor::matrix(m, n, out)
            }
            Op::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() == b.shape() {
                    Ok(a.zip_map(b, |x, y| x + y))
                } else if is_row_broadcast(a, b) {
                    let n = a.cols();
                    let mut out = a.data().to_vec();
                    for row in out.chunks_mut(n) {
                        for (o, &bv) in row.iter_mut().zip(b.data()) {
                            *o += bv;
                        }
                    }
                    Tensor::new(a.shape().to_vec(), out)
                } else {
                    Err(shape_err())
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(shape_err());
                }
                Ok(a.zip_map(b, |x, y| x * y))
            }
            Op::Scale(c) => Ok(inputs[0].map(|x| x * *c)),
            Op::EmbeddingLookup(ids) => {
                let table = inputs[0];
                if table.rank() != 2 || ids.is_empty() {
                    return Err(shape_err());
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= table.rows()) {
                    return Err(Error::contract(format!(
                        "embedding_lookup: id {bad} out of range for table of {} rows",
                        table.rows()
                    )));
                }
                let h = table.cols();
                let mut out = Vec::with_capacity(ids.len() * h);
                for &i in ids {
                    out.extend_from_slice(table.row(i));
                }
                Tensor::matrix(ids.len(), h, out)
            }
            Op::MeanPoolRows => {
                let x = inputs[0];
                if x.rank() != 2 {
                    return Err(shape_err());
                }
                let (l, h) = (x.rows(), x.cols());
                let mut out = vec![T::zero(); h];
                for r in 0..l {
                    for (o, &v) in out.iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                let inv = T::one() / T::c(l as f64);
                out.iter_mut().for_each(|v| *v *= inv);
                Tensor::matrix(1, h, out)
            }
            Op::Tanh => Ok(inputs[0].map(|x| x.tanh())),
            Op::Exp => Ok(inputs[0].map(|x| x.exp())),
            Op::Log => Ok(inputs[0].map(|x| x.ln())),
            Op::SoftmaxLastdim => {
                let x = inputs[0];
                let mut out = x.data().to_vec();
                out.chunks_mut(x.cols()).for_each(softmax_in_place);
                Tensor::new(x.shape().to_vec(), out)
            }
            Op::LogSoftmaxLastdim => {
                let x = inputs[0];
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(x.cols()) {
                    let lse = log_sum_exp(row);
                    row.iter_mut().for_each(|v| *v -= lse);
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Op::LogSumExpLastdim => {
                let x = inputs[0];
                let out: Vec<T> = x.data().chunks(x.cols()).map(log_sum_exp).collect();
                if x.rank() == 1 {
                    Tensor::vector(out)
                } else {
                    Tensor::matrix(x.rows(), 1, out)
                }
            }
            Op::Sum => Ok(Tensor::scalar(inputs[0].sum())),
            Op::ConcatLastdim => {
                let first = inputs.first().ok_or_else(shape_err)?;
                let rank = first.rank();
                let rows = first.rows();
                if inputs.iter().any(|t| t.rank() != rank || t.rows() != rows) {
                    return Err(shape_err());
                }
                let total: usize = inputs.iter().map(|t| t.cols()).sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for t in inputs {
                        out.extend_from_slice(t.row(r));
                    }
                }
                if rank == 1 {
                    Tensor::vector(out)
                } else {
                    Tensor::matrix(rows, total, out)
                }
            }
            Op::LayerNormLastdim => {
                let x = inputs[0];
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(x.cols()) {
                    let (mean, inv_std) = row_moments(row);
                    row.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Op::ScaledDotAttention => {
                let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
                if q.rank() != 2
                    || k.rank() != 2
                    || v.rank() != 2
                    || q.cols() != k.cols()
                    || k.rows() != v.rows()
                {
                    return Err(shape_err());
                }
                let probs = attention_probs(q, k);
                let (l, m, e) = (q.rows(), k.rows(), v.cols());
                let mut out = vec![T::zero(); l * e];
                matmul_into(&probs, v.data(), &mut out, l, m, e);
                Tensor::matrix(l, e, out)
            }
            Op::Transpose => {
                let x = inputs[0];
                if x.rank() != 2 {
                    return Err(shape_err());
                }
                let (m, n) = (x.rows(), x.cols());
                let mut out = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = x.data()[i * n + j];
                    }
                }
                Tensor::matrix(n, m, out)
            }
            Op::Reshape(shape) => inputs[0].reshaped(shape.clone()),
        }
    }
}

fn is_row_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.rank() == 2 && b.rows() == 1 && b.cols() == a.cols()
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    let inv = T::one() / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn row_moments<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::c(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::c(LAYERNORM_EPS)).sqrt())
}

fn attention_probs<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Vec<T> {
    let (l, d, m) = (q.rows(), q.cols(), k.rows());
    let mut scores = vec![T::zero(); l * m];
    matmul_bt_into(q.data(), k.data(), &mut scores, l, d, m);
    let scale = T::one() / T::c(d as f64).sqrt();
    for row in scores.chunks_mut(m) {
        row.iter_mut().for_each(|v| *v *= scale);
        softmax_in_place(row);
    }
    scores
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
}

/// Append-only computation graph. Nodes are stored in creation order, which is
/// a topological order; `backward` walks it in exact reverse.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `id`; zeros when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op<T> {
        &self.nodes[id.0].op
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::Numeric {
                node: id,
                op: "leaf",
                detail: "non-finite leaf value".into(),
            });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
        });
        Ok(NodeId(id))
    }

    /// Evaluate `op` on existing nodes and record the result.
    pub fn forward_op(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(bad) = inputs.iter().find(|n| n.0 >= id) {
            return Err(Error::contract(format!("unknown input node {}", bad.0)));
        }
        let value = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|n| &self.nodes[n.0].value).collect();
            op.eval(&vals)?
        };
        if !value.all_finite() {
            return Err(Error::Numeric {
                node: id,
                op: op.name(),
                detail: "non-finite output".into(),
            });
        }
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
        });
        Ok(NodeId(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Add, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.forward_op(Op::Scale(c), &[a])
    }
    pub fn embedding_lookup(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        self.forward_op(Op::EmbeddingLookup(ids), &[table])
    }
    pub fn mean_pool_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::MeanPoolRows, &[x])
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Tanh, &[x])
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Exp, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Log, &[x])
    }
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::SoftmaxLastdim, &[x])
    }
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::LogSoftmaxLastdim, &[x])
    }
    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::LogSumExpLastdim, &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Sum, &[x])
    }
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.forward_op(Op::ConcatLastdim, xs)
    }
    pub fn layernorm(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::LayerNormLastdim, &[x])
    }
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        self.forward_op(Op::ScaledDotAttention, &[q, k, v])
    }
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Transpose, &[x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.forward_op(Op::Reshape(shape), &[x])
    }

    /// Inner product of two equally sized nodes, as a `[1]` node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Select entries of a rank-1 node.
    pub fn select(&mut self, x: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let n = self.value(x).numel();
        let col = self.reshape(x, vec![n, 1])?;
        let m = ids.len();
        let rows = self.embedding_lookup(col, ids)?;
        self.reshape(rows, vec![m])
    }

    /// Recompute every non-leaf value after replacing the given leaves.
    /// Used by the finite-difference oracle.
    pub fn replay(&mut self, overrides: &[(NodeId, Tensor<T>)]) -> Result<()> {
        for (id, value) in overrides {
            let node = self
                .nodes
                .get_mut(id.0)
                .ok_or_else(|| Error::contract(format!("unknown node {}", id.0)))?;
            if !matches!(node.op, Op::Leaf) || node.value.shape() != value.shape() {
                return Err(Error::contract(format!(
                    "replay override for node {} must be a leaf of identical shape",
                    id.0
                )));
            }
            node.value = value.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let vals: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|n| &self.nodes[n.0].value).collect();
                node.op.eval(&vals)?
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::contract(format!("unknown loss node {}", loss.0)));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let input_grads = self.adjoint(node, &upstream)?;
            grads[i] = Some(upstream);
            for (inp, g) in node.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    match &mut grads[inp.0] {
                        Some(acc) => acc.axpy(T::one(), &g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn adjoint(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = |k: usize| &self.nodes[node.inputs[k].0].value;
        let y = &node.value;
        let g = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Matmul => {
                let (a, b) = (x(0), x(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut da = vec![T::zero(); m * k];
                matmul_bt_into(dy.data(), b.data(), &mut da, m, n, k);
                let mut db = vec![T::zero(); k * n];
                matmul_at_into(a.data(), dy.data(), &mut db, m, k, n);
                vec![
                    Some(Tensor::matrix(m, k, da)?),
                    Some(Tensor::matrix(k, n, db)?),
                ]
            }
            Op::Add => {
                let (a, b) = (x(0), x(1));
                if a.shape() == b.shape() {
                    vec![Some(dy.clone()), Some(dy.clone())]
                } else {
                    let n = a.cols();
                    let mut db = vec![T::zero(); n];
                    for row in dy.data().chunks(n) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    vec![Some(dy.clone()), Some(Tensor::new(b.shape().to_vec(), db)?)]
                }
            }
            Op::Mul => {
                let (a, b) = (x(0), x(1));
                vec![
                    Some(dy.zip_map(b, |d, bv| d * bv)),
                    Some(dy.zip_map(a, |d, av| d * av)),
                ]
            }
            Op::Scale(c) => vec![Some(dy.map(|d| d * *c))],
            Op::EmbeddingLookup(ids) => {
                let table = x(0);
                let h = table.cols();
                let mut dt = vec![T::zero(); table.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = dy.row(r);
                    for (o, &v) in dt[id * h..(id + 1) * h].iter_mut().zip(src) {
                        *o += v;
                    }
                }
                vec![Some(Tensor::new(table.shape().to_vec(), dt)?)]
            }
            Op::MeanPoolRows => {
                let inp = x(0);
                let inv = T::one() / T::c(inp.rows() as f64);
                let row: Vec<T> = dy.data().iter().map(|&d| d * inv).collect();
                let mut dx = Vec::with_capacity(inp.numel());
                for _ in 0..inp.rows() {
                    dx.extend_from_slice(&row);
                }
                vec![Some(Tensor::new(inp.shape().to_vec(), dx)?)]
            }
            Op::Tanh => vec![Some(dy.zip_map(y, |d, t| d * (T::one() - t * t)))],
            Op::Exp => vec![Some(dy.zip_map(y, |d, e| d * e))],
            Op::Log => vec![Some(dy.zip_map(x(0), |d, v| d / v))],
            Op::SoftmaxLastdim => {
                let n = y.cols();
                let mut dx = vec![T::zero(); y.numel()];
                for ((out, yr), dr) in dx
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(dy.data().chunks(n))
                {
                    let inner: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for ((o, &p), &d) in out.iter_mut().zip(yr).zip(dr) {
                        *o = p * (d - inner);
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LogSoftmaxLastdim => {
                let n = y.cols();
                let mut dx = vec![T::zero(); y.numel()];
                for ((out, yr), dr) in dx
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(dy.data().chunks(n))
                {
                    let total: T = dr.iter().copied().sum();
                    for ((o, &ls), &d) in out.iter_mut().zip(yr).zip(dr) {
                        *o = d - ls.exp() * total;
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LogSumExpLastdim => {
                let inp = x(0);
                let n = inp.cols();
                let mut dx = vec![T::zero(); inp.numel()];
                for (r, (out, xr)) in dx.chunks_mut(n).zip(inp.data().chunks(n)).enumerate() {
                    let lse = y.data()[r];
                    let d = dy.data()[r];
                    for (o, &v) in out.iter_mut().zip(xr) {
                        *o = d * (v - lse).exp();
                    }
                }
                vec![Some(Tensor::new(inp.shape().to_vec(), dx)?)]
            }
            Op::Sum => vec![Some(Tensor::filled(x(0).shape(), dy.item()))],
            Op::ConcatLastdim => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let inp = x(k);
                    let c = inp.cols();
                    let mut dx = Vec::with_capacity(inp.numel());
                    for r in 0..rows {
                        dx.extend_from_slice(
                            &dy.data()[r * total + offset..r * total + offset + c],
                        );
                    }
                    offset += c;
                    out.push(Some(Tensor::new(inp.shape().to_vec(), dx)?));
                }
                out
            }
            Op::LayerNormLastdim => {
                let inp = x(0);
                let n = inp.cols();
                let nf = T::c(n as f64);
                let mut dx = vec![T::zero(); inp.numel()];
                for ((out, xr), (yr, dr)) in dx
                    .chunks_mut(n)
                    .zip(inp.data().chunks(n))
                    .zip(y.data().chunks(n).zip(dy.data().chunks(n)))
                {
                    let (_, inv_std) = row_moments(xr);
                    let mean_d = dr.iter().copied().sum::<T>() / nf;
                    let mean_dy: T = dr.iter().zip(yr).map(|(&d, &v)| d * v).sum::<T>() / nf;
                    for ((o, &d), &v) in out.iter_mut().zip(dr).zip(yr) {
                        *o = inv_std * (d - mean_d - v * mean_dy);
                    }
                }
                vec![Some(Tensor::new(inp.shape().to_vec(), dx)?)]
            }
            Op::ScaledDotAttention => {
                let (q, k, v) = (x(0), x(1), x(2));
                let (l, d, m, e) = (q.rows(), q.cols(), k.rows(), v.cols());
                let probs = attention_probs(q, k);
                let mut dv = vec![T::zero(); m * e];
                matmul_at_into(&probs, dy.data(), &mut dv, l, m, e);
                let mut dp = vec![T::zero(); l * m];
                matmul_bt_into(dy.data(), v.data(), &mut dp, l, e, m);
                let scale = T::one() / T::c(d as f64).sqrt();
                let mut ds = vec![T::zero(); l * m];
                for ((out, pr), dr) in ds.chunks_mut(m).zip(probs.chunks(m)).zip(dp.chunks(m)) {
                    let inner: T = pr.iter().zip(dr).map(|(&p, &g)| p * g).sum();
                    for ((o, &p), &g) in out.iter_mut().zip(pr).zip(dr) {
                        *o = p * (g - inner) * scale;
                    }
                }
                let mut dq = vec![T::zero(); l * d];
                matmul_into(&ds, k.data(), &mut dq, l, m, d);
                let mut dk = vec![T::zero(); m * d];
                matmul_at_into(&ds, q.data(), &mut dk, l, m, d);
                vec![
                    Some(Tensor::matrix(l, d, dq)?),
                    Some(Tensor::matrix(m, d, dk)?),
                    Some(Tensor::matrix(m, e, dv)?),
                ]
            }
            Op::Transpose => {
                let (m, n) = (dy.rows(), dy.cols());
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[j * m + i] = dy.data()[i * n + j];
                    }
                }
                vec![Some(Tensor::matrix(n, m, dx)?)]
            }
            Op::Reshape(_) => vec![Some(dy.reshaped(x(0).shape().to_vec())?)],
        };
        Ok(g)
    }
}
