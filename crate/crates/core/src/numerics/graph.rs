//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node index is already a
//! topological order and the reverse pass is a single backwards sweep.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction mode for [`Graph::cross_entropy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    Gelu(Var),
    CausalMask(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, reduction: Reduction, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Overwrite { base: Var, values: Var, positions: Vec<(usize, usize)> },
    RowDot(Var, Var),
    ScaleRows(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn mat(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        if self.value(v).shape().len() != 2 {
            return Err(Error::shape(op, self.value(v).shape(), &[0, 0]));
        }
        Ok(self.dims2(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul", a)?;
        let (k2, n) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a, c), rg))
    }

    /// Adds a length-D bias vector to every row of an `[N, D]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.mat("add_bias", x)?;
        if self.value(b).len() != d {
            return Err(Error::shape("add_bias", self.value(x).shape(), self.value(b).shape()));
        }
        let mut data = self.value(x).data().to_vec();
        kernels::add_bias(&mut data, self.value(b).data());
        let shape = self.shape(x);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat("transpose", a)?;
        let data = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat("slice_rows", a)?;
        if len == 0 || start + len > r {
            return Err(Error::Index(format!("slice_rows {start}+{len} of {r}")));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows { src: a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat("slice_cols", a)?;
        if len == 0 || start + len > c {
            return Err(Error::Index(format!("slice_cols {start}+{len} of {c}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { src: a, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, c) = self.mat("concat_rows", first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.mat("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            data.extend_from_slice(self.value(p).data());
            rows += pr;
            rg |= self.rg(p);
        }
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (r, _) = self.mat("concat_cols", first)?;
        let mut total = 0;
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.mat("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            total += pc;
            rg |= self.rg(p);
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row gather; doubles as embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.mat("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Index(format!("gather_rows id {id} of {r}")));
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(table);
        let t = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows { table, ids: ids.to_vec() }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        let mut out = vec![0.0; r * c];
        let src = self.value(a).data();
        for i in 0..r {
            kernels::softmax_row(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let shape = self.shape(a);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", self.value(x).shape(), self.value(gain).shape()));
        }
        let mut out = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        {
            let src = self.value(x).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for i in 0..r {
                stats.push(kernels::layer_norm_row(
                    &src[i * c..(i + 1) * c],
                    g,
                    b,
                    &mut out[i * c..(i + 1) * c],
                ));
            }
        }
        let shape = self.shape(x);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm { x, gain, bias, stats };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gelu(a), rg))
    }

    /// Adds `-inf` strictly above the diagonal of a square score matrix.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat("causal_mask", a)?;
        if r != c {
            return Err(Error::shape("causal_mask", &[r, c], &[c, c]));
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for j in (i + 1)..c {
                data[i * c + j] += f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::CausalMask(a), rg))
    }

    /// Cross-entropy of `[N, V]` logits against one integer target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let (r, c) = self.mat("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", &[r, c], &[targets.len()]));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index(format!("cross_entropy target {t} of {c}")));
            }
            let row = &src[i * c..(i + 1) * c];
            let lse = kernels::log_sum_exp(row);
            total += lse - row[t];
            kernels::softmax_row(row, &mut probs[i * c..(i + 1) * c]);
        }
        if reduction == Reduction::Mean {
            total /= r as f64;
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            reduction,
            probs,
        };
        Ok(self.push(Tensor::scalar(total), op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut s = 0.0;
        for &v in self.value(a).data() {
            s += v;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let mut s = 0.0;
        for &v in self.value(a).data() {
            s += v;
        }
        s /= self.value(a).len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Copy of `base` with `values[p]` written at `positions[p] = (row, col)`.
    /// Gradient flows to `values` at the written cells and to `base` elsewhere.
    pub fn overwrite(&mut self, base: Var, values: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.mat("overwrite", base)?;
        if self.value(values).len() != positions.len() {
            return Err(Error::shape("overwrite", self.value(values).shape(), &[positions.len()]));
        }
        let mut data = self.value(base).data().to_vec();
        let mut seen = std::collections::HashSet::new();
        for (p, &(i, j)) in positions.iter().enumerate() {
            if i >= r || j >= c {
                return Err(Error::Index(format!("overwrite ({i},{j}) of [{r},{c}]")));
            }
            if !seen.insert((i, j)) {
                return Err(Error::contract(format!("overwrite position ({i},{j}) repeated")));
            }
            data[i * c + j] = self.value(values).data()[p];
        }
        let rg = self.rg(base) || self.rg(values);
        let op = Op::Overwrite {
            base,
            values,
            positions: positions.to_vec(),
        };
        Ok(self.push(Tensor::new(vec![r, c], data)?, op, rg))
    }

    /// Per-row dot product of two `[N, D]` matrices, giving `[N, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (r, _) = self.mat("row_dot", a)?;
        let data: Vec<f64> = (0..r)
            .map(|i| kernels::dot(self.value(a).row(i), self.value(b).row(i)))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![r, 1], data)?, Op::RowDot(a, b), rg))
    }

    /// Multiplies row `i` of `a [N, D]` by `s[i]` where `s` is `[N, 1]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.mat("scale_rows", a)?;
        if self.value(s).shape() != [r, 1] {
            return Err(Error::shape("scale_rows", self.value(a).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| x * sv[idx / c])
            .collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::ScaleRows(a, s), rg))
    }

    /// Reverse pass from a scalar; gradients add into any existing buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                        *e += v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let (_, n) = self.dims2(*b);
                if self.rg(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    accumulate_with(&mut adj[a.0], m * k, |buf| {
                        kernels::matmul_acc(g, &bt, m, n, k, buf)
                    });
                }
                if self.rg(*b) {
                    let at = kernels::transpose(self.value(*a).data(), m, k);
                    accumulate_with(&mut adj[b.0], k * n, |buf| {
                        kernels::matmul_acc(&at, g, k, m, n, buf)
                    });
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut adj[a.0], g.to_vec());
                }
                if self.rg(*b) {
                    accumulate(&mut adj[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut adj[a.0], g.to_vec());
                }
                if self.rg(*b) {
                    accumulate(&mut adj[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    accumulate(&mut adj[a.0], g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    accumulate(&mut adj[b.0], g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut adj[a.0], g.iter().map(|v| v * c).collect());
            }
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    accumulate(&mut adj[x.0], g.to_vec());
                }
                if self.rg(*b) {
                    let d = self.value(*b).len();
                    accumulate_with(&mut adj[b.0], d, |buf| {
                        for row in g.chunks(d) {
                            for (e, v) in buf.iter_mut().zip(row) {
                                *e += v;
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a);
                accumulate(&mut adj[a.0], kernels::transpose(g, c, r));
            }
            Op::Reshape(a) => accumulate(&mut adj[a.0], g.to_vec()),
            Op::SliceRows { src, start } => {
                let (r, c) = self.dims2(*src);
                let s = *start;
                accumulate_with(&mut adj[src.0], r * c, |buf| {
                    for (e, v) in buf[s * c..s * c + g.len()].iter_mut().zip(g) {
                        *e += v;
                    }
                });
            }
            Op::SliceCols { src, start } => {
                let (r, c) = self.dims2(*src);
                let len = g.len() / r;
                let s = *start;
                accumulate_with(&mut adj[src.0], r * c, |buf| {
                    for i in 0..r {
                        for j in 0..len {
                            buf[i * c + s + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.rg(*p) {
                        accumulate(&mut adj[p.0], g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut off = 0;
                for p in parts {
                    let (_, pc) = self.dims2(*p);
                    if self.rg(*p) {
                        let mut part = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            part.extend_from_slice(&g[i * total + off..i * total + off + pc]);
                        }
                        accumulate(&mut adj[p.0], part);
                    }
                    off += pc;
                }
            }
            Op::GatherRows { table, ids } => {
                let (r, c) = self.dims2(*table);
                accumulate_with(&mut adj[table.0], r * c, |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            buf[id * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (r, c) = node.value.dims2();
                let y = node.value.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s = kernels::dot(yr, gr);
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(&mut adj[a.0], dx);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (r, c) = self.dims2(*x);
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let n = c as f64;
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let (mean, rstd) = stats[i];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        let gy = g[i * c + j];
                        xhat[j] = (xv[i * c + j] - mean) * rstd;
                        dg[j] += gy * xhat[j];
                        db[j] += gy;
                        dxhat[j] = gy * gv[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    let m1 = s1 / n;
                    let m2 = s2 / n;
                    for j in 0..c {
                        dx[i * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.rg(*x) {
                    accumulate(&mut adj[x.0], dx);
                }
                if self.rg(*gain) {
                    accumulate(&mut adj[gain.0], dg);
                }
                if self.rg(*bias) {
                    accumulate(&mut adj[bias.0], db);
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                accumulate(
                    &mut adj[a.0],
                    g.iter().zip(xv).map(|(gy, &x)| gy * kernels::gelu_grad(x)).collect(),
                );
            }
            Op::CausalMask(a) => {
                let (r, c) = self.dims2(*a);
                let mut dx = g.to_vec();
                for i in 0..r {
                    for j in (i + 1)..c {
                        dx[i * c + j] = 0.0;
                    }
                }
                accumulate(&mut adj[a.0], dx);
            }
            Op::CrossEntropy { logits, targets, reduction, probs } => {
                let (r, c) = self.dims2(*logits);
                let scale = match reduction {
                    Reduction::Mean => g[0] / r as f64,
                    Reduction::Sum => g[0],
                };
                let mut dx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * c + t] -= 1.0;
                }
                for v in dx.iter_mut() {
                    *v *= scale;
                }
                accumulate(&mut adj[logits.0], dx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(&mut adj[a.0], vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(&mut adj[a.0], vec![g[0] / n as f64; n]);
            }
            Op::Overwrite { base, values, positions } => {
                let (_, c) = self.dims2(*base);
                if self.rg(*base) {
                    let mut db = g.to_vec();
                    for &(i, j) in positions {
                        db[i * c + j] = 0.0;
                    }
                    accumulate(&mut adj[base.0], db);
                }
                if self.rg(*values) {
                    let dv = positions.iter().map(|&(i, j)| g[i * c + j]).collect();
                    accumulate(&mut adj[values.0], dv);
                }
            }
            Op::RowDot(a, b) => {
                let (r, c) = self.dims2(*a);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let da = (0..r * c).map(|idx| g[idx / c] * bv[idx]).collect();
                    accumulate(&mut adj[a.0], da);
                }
                if self.rg(*b) {
                    let db = (0..r * c).map(|idx| g[idx / c] * av[idx]).collect();
                    accumulate(&mut adj[b.0], db);
                }
            }
            Op::ScaleRows(a, s) => {
                let (r, c) = self.dims2(*a);
                let av = self.value(*a).data();
                let sv = self.value(*s).data();
                if self.rg(*a) {
                    let da = (0..r * c).map(|idx| g[idx] * sv[idx / c]).collect();
                    accumulate(&mut adj[a.0], da);
                }
                if self.rg(*s) {
                    let ds = (0..r)
                        .map(|i| kernels::dot(&g[i * c..(i + 1) * c], &av[i * c..(i + 1) * c]))
                        .collect();
                    accumulate(&mut adj[s.0], ds);
                }
            }
        }
    }
}
