use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Reshape(usize),
    Gather(usize, Vec<usize>),
    MeanRows(usize),
    Sum(usize),
    MaskedCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph. Build one per forward pass, call
/// [`Var::backward`] once, then drop it.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    backward_done: Cell<bool>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .field("backward_done", &self.backward_done.get())
            .finish()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, shape={:?})", self.id, self.shape())
    }
}

/// The differentiable elementwise primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Places a value on the graph. Gradients are tracked iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&self, mut tensor: Tensor) -> Var<'_> {
        let requires_grad = tensor.requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Rows of `table` selected by `ids`, as a `[ids.len(), d]` tensor.
    pub fn embedding<'g>(&'g self, table: Var<'g>, ids: &[usize]) -> Result<Var<'g>> {
        table.same_graph(self)?;
        let (vocab, d) = table.dims2("embedding")?;
        if ids.is_empty() {
            return Err(Error::Contract(
                "embedding lookup of an empty id list".into(),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for embedding table of {vocab} rows"
            )));
        }
        let out = {
            let t = table.value();
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(&t.data[i * d..(i + 1) * d]);
            }
            out
        };
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.derive(value, Op::Gather(table.id, ids.to_vec()), &[table.id]))
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let cols = first.dims2("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            p.same_graph(self)?;
            let (r, c) = p.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", &first.shape(), &p.shape()));
            }
            data.extend_from_slice(&p.value().data);
            rows += r;
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.derive(value, Op::ConcatRows(ids.clone()), &ids))
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = first.dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            p.same_graph(self)?;
            let (r, c) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", &first.shape(), &p.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&v.data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.derive(value, Op::ConcatCols(ids.clone()), &ids))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn derive(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[root].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root].value.shape
            )));
        }
        if self.backward_done.replace(true) {
            return Err(Error::State(
                "backward already ran on this graph; build a new graph for the next pass".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            for (input, g) in input_grads(&nodes, node, &upstream) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
            // Keep the gradient around for callers that ask for it.
            grads[id] = Some(upstream);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

/// Vector-Jacobian products for one node: `(input id, dL/dinput)` pairs.
fn input_grads(nodes: &[Node], node: &Node, up: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| &nodes[i].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
            let n = val(*b).shape[1];
            let da = ops::matmul_bt(up, &val(*b).data, m, n, k);
            let db = ops::matmul_at(&val(*a).data, up, m, k, n);
            vec![(*a, da), (*b, db)]
        }
        Op::MatMulBt(a, b) => {
            // c = a·bᵀ with a [m×k], b [n×k]
            let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
            let n = val(*b).shape[0];
            let da = ops::matmul(up, &val(*b).data, m, n, k);
            let db = ops::matmul_at(up, &val(*a).data, m, n, k);
            vec![(*a, da), (*b, db)]
        }
        Op::Add(a, b) => vec![(*a, up.to_vec()), (*b, up.to_vec())],
        Op::AddBias(a, b) => {
            let n = val(*b).numel();
            let mut db = vec![0.0; n];
            for row in up.chunks(n) {
                db.iter_mut().zip(row).for_each(|(d, u)| *d += u);
            }
            vec![(*a, up.to_vec()), (*b, db)]
        }
        Op::Mul(a, b) => {
            let da = up.iter().zip(&val(*b).data).map(|(u, y)| u * y).collect();
            let db = up.iter().zip(&val(*a).data).map(|(u, x)| u * x).collect();
            vec![(*a, da), (*b, db)]
        }
        Op::Scale(a, s) => vec![(*a, up.iter().map(|u| u * s).collect())],
        Op::Relu(a) => {
            let g = up
                .iter()
                .zip(&val(*a).data)
                .map(|(u, &x)| if x > 0.0 { *u } else { 0.0 })
                .collect();
            vec![(*a, g)]
        }
        Op::Sigmoid(a) => {
            let g = up
                .iter()
                .zip(&out.data)
                .map(|(u, s)| u * s * (1.0 - s))
                .collect();
            vec![(*a, g)]
        }
        Op::Tanh(a) => {
            let g = up
                .iter()
                .zip(&out.data)
                .map(|(u, t)| u * (1.0 - t * t))
                .collect();
            vec![(*a, g)]
        }
        Op::Softmax(a) => {
            let n = out.last_dim();
            let mut g = vec![0.0; up.len()];
            for ((y, u), d) in out.data.chunks(n).zip(up.chunks(n)).zip(g.chunks_mut(n)) {
                let dot: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                for ((d, &yi), &ui) in d.iter_mut().zip(y).zip(u) {
                    *d = yi * (ui - dot);
                }
            }
            vec![(*a, g)]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = out.last_dim();
            let gv = &val(*gain).data;
            let mut dx = vec![0.0; up.len()];
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            for (r, ((u, xh), d)) in up
                .chunks(n)
                .zip(xhat.chunks(n))
                .zip(dx.chunks_mut(n))
                .enumerate()
            {
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..n {
                    dgain[j] += u[j] * xh[j];
                    dbias[j] += u[j];
                    let dxh = u[j] * gv[j];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh[j];
                }
                let nf = n as f64;
                for j in 0..n {
                    let dxh = u[j] * gv[j];
                    d[j] = inv_std[r] / nf * (nf * dxh - sum_dxhat - xh[j] * sum_dxhat_xhat);
                }
            }
            vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let len = val(p).numel();
                    let g = up[offset..offset + len].to_vec();
                    offset += len;
                    (p, g)
                })
                .collect()
        }
        Op::ConcatCols(parts) => {
            let rows = out.shape[0];
            let total = out.shape[1];
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let w = val(p).shape[1];
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        g.extend_from_slice(&up[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    (p, g)
                })
                .collect()
        }
        Op::SliceCols(a, start) => {
            let (rows, cols) = (val(*a).shape[0], val(*a).shape[1]);
            let w = out.shape[1];
            let mut g = vec![0.0; rows * cols];
            for r in 0..rows {
                g[r * cols + start..r * cols + start + w].copy_from_slice(&up[r * w..(r + 1) * w]);
            }
            vec![(*a, g)]
        }
        Op::Reshape(a) => vec![(*a, up.to_vec())],
        Op::Gather(table, ids) => {
            let d = out.shape[1];
            let mut g = vec![0.0; val(*table).numel()];
            for (row, &i) in ids.iter().enumerate() {
                g[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&up[row * d..(row + 1) * d])
                    .for_each(|(a, b)| *a += b);
            }
            vec![(*table, g)]
        }
        Op::MeanRows(a) => {
            let (rows, cols) = (val(*a).shape[0], val(*a).shape[1]);
            let scale = 1.0 / rows as f64;
            let mut g = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                g.extend(up.iter().map(|u| u * scale));
            }
            vec![(*a, g)]
        }
        Op::Sum(a) => vec![(*a, vec![up[0]; val(*a).numel()])],
        Op::MaskedCrossEntropy {
            logits,
            targets,
            mask,
            probs,
        } => {
            let v = val(*logits).last_dim();
            let mut g = vec![0.0; probs.len()];
            for (t, (&target, &keep)) in targets.iter().zip(mask).enumerate() {
                if !keep {
                    continue;
                }
                let row = &mut g[t * v..(t + 1) * v];
                row.copy_from_slice(&probs[t * v..(t + 1) * v]);
                row[target] -= 1.0;
                row.iter_mut().for_each(|x| *x *= up[0]);
            }
            vec![(*logits, g)]
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Borrow of the forward value. Drop it before building further nodes.
    pub fn value(&self) -> Ref<'g, Tensor> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().data.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient of the loss w.r.t. this node, available after backward.
    pub fn grad(&self) -> Option<Tensor> {
        let grads = self.graph.grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        Tensor::new(self.shape(), g.clone()).ok()
    }

    /// Reverse-mode sweep from this scalar. Allowed once per graph.
    pub fn backward(&self) -> Result<()> {
        self.graph.backward_from(self.id)
    }

    fn same_graph(&self, graph: &Graph) -> Result<()> {
        if std::ptr::eq(self.graph, graph) {
            Ok(())
        } else {
            Err(Error::Contract("tensors live on different graphs".into()))
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let v = self.value();
        match v.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = {
            let v = self.value();
            Tensor {
                shape: v.shape.clone(),
                data: v.data.iter().map(|&x| f(x)).collect(),
                requires_grad: false,
                grad: None,
            }
        };
        self.graph.derive(value, op, &[self.id])
    }

    fn zip_same(
        &self,
        other: &Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        other.same_graph(self.graph)?;
        let value = {
            let a = self.value();
            let b = other.value();
            if a.shape != b.shape {
                return Err(Error::shape(name, &a.shape, &b.shape));
            }
            Tensor::new(
                a.shape.clone(),
                a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            )?
        };
        Ok(self.graph.derive(value, op, &[self.id, other.id]))
    }

    pub fn elementwise(&self, op: Elementwise, other: Option<Var<'g>>) -> Result<Var<'g>> {
        match (op, other) {
            (Elementwise::Add, Some(b)) => self.add(&b),
            (Elementwise::Mul, Some(b)) => self.mul(&b),
            (Elementwise::Relu, None) => Ok(self.relu()),
            (Elementwise::Sigmoid, None) => Ok(self.sigmoid()),
            (Elementwise::Tanh, None) => Ok(self.tanh()),
            (op, _) => Err(Error::Contract(format!("wrong operand count for {op:?}"))),
        }
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        other.same_graph(self.graph)?;
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let data = ops::matmul(&self.value().data, &other.value().data, m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self
            .graph
            .derive(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &Var<'g>) -> Result<Var<'g>> {
        other.same_graph(self.graph)?;
        let (m, k) = self.dims2("matmul_transposed")?;
        let (n, k2) = other.dims2("matmul_transposed")?;
        if k != k2 {
            return Err(Error::shape("matmul_transposed", &[m, k], &[n, k2]));
        }
        let data = ops::matmul_bt(&self.value().data, &other.value().data, m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self
            .graph
            .derive(value, Op::MatMulBt(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_same(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a bias vector (`[n]` or `[1, n]`) to every row along the last axis.
    pub fn add_bias(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        bias.same_graph(self.graph)?;
        let value = {
            let a = self.value();
            let b = bias.value();
            let n = a.last_dim();
            let bias_ok = b.numel() == n && (b.shape.len() == 1 || b.rows() == 1);
            if !bias_ok {
                return Err(Error::shape("add_bias", &a.shape, &b.shape));
            }
            let mut data = a.data.clone();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
            }
            Tensor::new(a.shape.clone(), data)?
        };
        Ok(self
            .graph
            .derive(value, Op::AddBias(self.id, bias.id), &[self.id, bias.id]))
    }

    pub fn scale(&self, factor: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, factor), |x| x * factor)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), ops::sigmoid)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Var<'g> {
        let value = {
            let v = self.value();
            Tensor {
                shape: v.shape.clone(),
                data: ops::softmax_rows(&v.data, v.last_dim()),
                requires_grad: false,
                grad: None,
            }
        };
        self.graph.derive(value, Op::Softmax(self.id), &[self.id])
    }

    /// Normalizes each last-axis slice to zero mean and unit (biased)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'g>, bias: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        gain.same_graph(self.graph)?;
        bias.same_graph(self.graph)?;
        if eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let (value, xhat, inv_std) = {
            let x = self.value();
            let g = gain.value();
            let b = bias.value();
            let n = x.last_dim();
            if g.numel() != n || b.numel() != n {
                return Err(Error::shape("layer_norm", &x.shape, &g.shape));
            }
            let mut xhat = Vec::with_capacity(x.numel());
            let mut inv_std = Vec::with_capacity(x.rows());
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data.chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * inv;
                    xhat.push(h);
                    out.push(h * g.data[j] + b.data[j]);
                }
            }
            (Tensor::new(x.shape.clone(), out)?, xhat, inv_std)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.graph.derive(value, op, &[self.id, gain.id, bias.id]))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let (rows, cols) = self.dims2("slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::Contract(format!(
                "column range {start}..{end} invalid for width {cols}"
            )));
        }
        let w = end - start;
        let data = {
            let v = self.value();
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&v.data[r * cols + start..r * cols + end]);
            }
            data
        };
        let value = Tensor::new(vec![rows, w], data)?;
        Ok(self
            .graph
            .derive(value, Op::SliceCols(self.id, start), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = {
            let v = self.value();
            Tensor::new(shape.to_vec(), v.data.clone())
                .map_err(|_| Error::shape("reshape", &v.shape, shape))?
        };
        Ok(self.graph.derive(value, Op::Reshape(self.id), &[self.id]))
    }

    /// Mean over the row axis of a 2-D tensor, giving `[1, cols]`.
    pub fn mean_rows(&self) -> Result<Var<'g>> {
        let (rows, cols) = self.dims2("mean_rows")?;
        let data = {
            let v = self.value();
            let mut acc = vec![0.0; cols];
            for row in v.data.chunks(cols) {
                acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            acc.iter_mut().for_each(|a| *a /= rows as f64);
            acc
        };
        let value = Tensor::new(vec![1, cols], data)?;
        Ok(self.graph.derive(value, Op::MeanRows(self.id), &[self.id]))
    }

    pub fn sum(&self) -> Var<'g> {
        let total = self.value().data.iter().sum();
        self.graph
            .derive(Tensor::scalar(total), Op::Sum(self.id), &[self.id])
    }

    /// Sum over rows `t` with `mask[t]` of `-log softmax(self[t])[targets[t]]`.
    /// Masked-out rows contribute exactly zero, in value and gradient.
    pub fn masked_cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Var<'g>> {
        let (rows, v) = self.dims2("masked_cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(
                "masked_cross_entropy",
                &[rows, v],
                &[targets.len(), mask.len()],
            ));
        }
        if let Some(&bad) = targets
            .iter()
            .zip(mask)
            .find(|(&t, &m)| m && t >= v)
            .map(|(t, _)| t)
        {
            return Err(Error::Contract(format!(
                "target id {bad} out of range for {v} classes"
            )));
        }
        let (loss, probs) = {
            let x = self.value();
            let probs = ops::softmax_rows(&x.data, v);
            let mut loss = 0.0;
            for (t, (&target, &keep)) in targets.iter().zip(mask).enumerate() {
                if keep {
                    let row = &x.data[t * v..(t + 1) * v];
                    loss += ops::log_sum_exp(row) - row[target];
                }
            }
            (loss, probs)
        };
        let op = Op::MaskedCrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
        };
        Ok(self.graph.derive(Tensor::scalar(loss), op, &[self.id]))
    }
}
