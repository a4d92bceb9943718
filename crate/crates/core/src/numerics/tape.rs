//! Per-step reverse-mode tape.
//!
//! Every op appends one node holding its output value. Nodes only ever
//! reference earlier nodes, so execution order is a valid topological order
//! and `backward` is a single reverse sweep. A node requires a gradient iff
//! it is a trainable leaf or any of its inputs requires one; gradient rules
//! are only evaluated along those paths, which is what keeps frozen weights
//! at exactly zero gradient.

use std::collections::BTreeMap;

use super::gemm::gemm;
use super::tensor::{all_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    AddGroupBias { x: Var, bias: Var },
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Sigmoid(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    GatherLast { x: Var, idx: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { a: Var, b: Var, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SumAxis { x: Var, axis: usize },
    BroadcastAxis { x: Var, axis: usize },
    Tile(Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::AddGroupBias { .. } => "add_group_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::GatherLast { .. } => "gather",
            Op::Embedding { .. } => "embedding",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAxis { .. } => "sum_axis",
            Op::BroadcastAxis { .. } => "broadcast_axis",
            Op::Tile(..) => "tile",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Raw gradient buffer, `None` when no gradient reached the node.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when no gradient reached the node.
    pub fn tensor(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => Tensor::new(&self.shapes[v.0], g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let k = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (if k == 0 { 0 } else { n / k }, k)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (shape `shape`) into axis order `perm`.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; src.len()];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for o in out.iter_mut() {
        *o = src[offset];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn softmax_rows(x: &[f64], k: usize, out: &mut [f64]) {
    for (row, o) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            z += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= z;
        }
    }
}

/// Records operations for one forward pass and runs the reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of recorded nodes per op kind.
    pub fn op_census(&self) -> BTreeMap<&'static str, usize> {
        let mut census = BTreeMap::new();
        for n in &self.nodes {
            *census.entry(n.op.name()).or_insert(0) += 1;
        }
        census
    }

    /// Adds a leaf; trainable leaves accumulate gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `x W + b` over the last axis of `x [.., k]`, with `w [k, n]` and `b [n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] || sb != [sw[1]] {
            return Err(Error::dim("affine", sx, sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / k.max(1);
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(self.data(b));
        }
        gemm(rows, k, n, self.data(x), false, self.data(w), false, 1.0, &mut out);
        let mut shape = sx.to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        self.push(Tensor::new(&shape, out)?, Op::Affine { x, w, b }, &[x, w, b])
    }

    /// Batched product `[g, m, k] x [g, k, n] -> [g, m, n]`; with `trans_b`
    /// the right operand is `[g, n, k]` and is used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::new(&[g, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape(x), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds `bias [k]` to every row of `x [..., k]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let k = self.value(x).last_dim();
        if self.shape(bias) != [k] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(k)
            .flat_map(|row| row.iter().zip(b).map(|(r, b)| r + b))
            .collect();
        let v = Tensor::new(self.shape(x), data)?;
        self.push(v, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Adds `bias [g, k]` to `x [g, r, k]`, one bias row per group.
    pub fn add_group_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sx.len() != 3 || sb != [sx[0], sx[2]] {
            return Err(Error::dim("add_group_bias", sx, sb));
        }
        let (r, k) = (sx[1], sx[2]);
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let g = i / (r * k);
            *v += b[g * k + i % k];
        }
        let v = Tensor::new(sx, data)?;
        self.push(v, Op::AddGroupBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.map(x, |t| t * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.map(x, |t| t + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    /// Elementwise product with a constant buffer of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return Err(Error::dim("mul_const", self.shape(x), &[c.len()]));
        }
        let data = self.data(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let v = Tensor::new(self.shape(x), data)?;
        self.push(v, Op::MulConst(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |t| t.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |t| 1.0 / (1.0 + (-t).exp()));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |t| t * t);
        self.push(v, Op::Square(x), &[x])
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = rows_of(self.shape(x));
        if k == 0 {
            return Err(Error::dim("softmax", self.shape(x), &[]));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        softmax_rows(self.data(x), k, &mut out);
        let v = Tensor::new(self.shape(x), out)?;
        self.push(v, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = rows_of(self.shape(x));
        if k == 0 {
            return Err(Error::dim("log_softmax", self.shape(x), &[]));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        for (row, o) in self.data(x).chunks(k).zip(out.chunks_mut(k)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (oi, xi) in o.iter_mut().zip(row) {
                *oi = xi - lse;
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        self.push(v, Op::LogSoftmax(x), &[x])
    }

    /// Per-row `-log softmax(logits)[target]`; `logits` is `[..., k]` with one
    /// target per row. Output has one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, k) = rows_of(self.shape(logits));
        if targets.len() != rows || k == 0 {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: k,
            });
        }
        let mut probs = vec![0.0; rows * k];
        let x = self.data(logits);
        let mut losses = Vec::with_capacity(rows);
        for (r, (row, p)) in x.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (pi, xi) in p.iter_mut().zip(row) {
                *pi = (xi - max).exp() / z;
            }
            losses.push(max + z.ln() - row[targets[r]]);
        }
        let v = Tensor::new(&[rows], losses)?;
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, k) = rows_of(self.shape(x));
        if k == 0 {
            return Err(Error::dim("layer_norm", self.shape(x), &[]));
        }
        if self.shape(gain) != [k] || self.shape(bias) != [k] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; rows * k];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows * k];
        for (r, row) in self.data(x).chunks(k).enumerate() {
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..k {
                let h = (row[j] - mean) * is;
                xhat[r * k + j] = h;
                out[r * k + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Scales each row of the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, k) = rows_of(self.shape(x));
        if k == 0 {
            return Err(Error::dim("l2_normalize", self.shape(x), &[]));
        }
        let mut norms = Vec::new();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(k) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let v = Tensor::new(self.shape(x), out)?;
        self.push(v, Op::L2Normalize { x, norms }, &[x])
    }

    /// Picks `x[r, idx[r]]` from every row of `x [..., k]`.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, k) = rows_of(self.shape(x));
        if idx.len() != rows {
            return Err(Error::dim("gather", self.shape(x), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&t| t >= k) {
            return Err(Error::Index {
                op: "gather",
                index: bad,
                bound: k,
            });
        }
        let d = self.data(x);
        let data = idx.iter().enumerate().map(|(r, &i)| d[r * k + i]).collect();
        let v = Tensor::new(&[rows], data)?;
        self.push(v, Op::GatherLast { x, idx: idx.to_vec() }, &[x])
    }

    /// Looks up rows of `table [V, d]`; output is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::dim("embedding", st, &[]));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                op: "embedding",
                index: bad,
                bound: vocab,
            });
        }
        let t = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(&[ids.len(), d], data)?;
        self.push(v, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &shape, perm));
        }
        let (out_shape, data) = permute_data(self.data(x), &shape, perm);
        let v = Tensor::new(&out_shape, data)?;
        self.push(v, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::dim("concat", &sa, &sb));
        }
        let (outer, la, inner) = around(&sa, axis);
        let lb = sb[axis];
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * la * inner..(o + 1) * la * inner]);
            data.extend_from_slice(&db[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = la + lb;
        let v = Tensor::new(&shape, data)?;
        self.push(v, Op::Concat { a, b, axis }, &[a, b])
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let (outer, l, inner) = around(&shape, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * l * inner + start * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(&out_shape, data)?;
        self.push(v, Op::Slice { x, axis, start }, &[x])
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let (outer, l, inner) = around(&shape, axis);
        let d = self.data(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..l {
                let src = &d[(o * l + j) * inner..(o * l + j + 1) * inner];
                for (t, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *t += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let v = Tensor::new(&out_shape, data)?;
        self.push(v, Op::SumAxis { x, axis }, &[x])
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the input.
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(Error::dim("broadcast_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, n);
        let v = Tensor::new(&out_shape, data)?;
        self.push(v, Op::BroadcastAxis { x, axis }, &[x])
    }

    /// Stacks `reps` copies of `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, reps: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = self.data(x);
        let mut data = Vec::with_capacity(d.len() * reps);
        for _ in 0..reps {
            data.extend_from_slice(d);
        }
        let mut out_shape = vec![reps];
        out_shape.extend_from_slice(&shape);
        let v = Tensor::new(&out_shape, data)?;
        self.push(v, Op::Tile(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::dim("mean", self.shape(x), &[]));
        }
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        if grads.iter().flatten().any(|g| !all_finite(g)) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let slot = |grads: &mut [Option<Vec<f64>>], v: Var| -> bool { nodes[v.0].requires_grad && { grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]); true } };
        macro_rules! acc {
            ($v:expr) => {
                grads[$v.0].as_mut().expect("allocated")
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if slot(grads, *a) {
                    gemm(m, n, k, g, false, nodes[b.0].value.data(), true, 1.0, acc!(a));
                }
                if slot(grads, *b) {
                    gemm(k, m, n, nodes[a.0].value.data(), true, g, false, 1.0, acc!(b));
                }
            }
            Op::Affine { x, w, b } => {
                let sw = nodes[w.0].value.shape();
                let (k, n) = (sw[0], sw[1]);
                let rows = g.len() / n.max(1);
                if slot(grads, *x) {
                    gemm(rows, n, k, g, false, nodes[w.0].value.data(), true, 1.0, acc!(x));
                }
                if slot(grads, *w) {
                    gemm(k, rows, n, nodes[x.0].value.data(), true, g, false, 1.0, acc!(w));
                }
                if slot(grads, *b) {
                    let gb = acc!(b);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if slot(grads, *a) {
                    let ga = acc!(a);
                    for t in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &db[t * k * n..(t + 1) * k * n],
                            !*trans_b,
                            1.0,
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
                if slot(grads, *b) {
                    let gb = acc!(b);
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &da[t * m * k..(t + 1) * m * k];
                        let bt = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gt, true, at, false, 1.0, bt);
                        } else {
                            gemm(k, m, n, at, true, gt, false, 1.0, bt);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if slot(grads, *a) {
                    acc!(a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if slot(grads, *b) {
                    acc!(b).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if slot(grads, *a) {
                    acc!(a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if slot(grads, *b) {
                    acc!(b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if slot(grads, *a) {
                    for ((x, gi), bi) in acc!(a).iter_mut().zip(g).zip(db) {
                        *x += gi * bi;
                    }
                }
                if slot(grads, *b) {
                    for ((x, gi), ai) in acc!(b).iter_mut().zip(g).zip(da) {
                        *x += gi * ai;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if slot(grads, *x) {
                    acc!(x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if slot(grads, *bias) {
                    let k = nodes[bias.0].value.numel();
                    let gb = acc!(bias);
                    for row in g.chunks(k) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::AddGroupBias { x, bias } => {
                if slot(grads, *x) {
                    acc!(x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if slot(grads, *bias) {
                    let s = nodes[x.0].value.shape();
                    let (r, k) = (s[1], s[2]);
                    let gb = acc!(bias);
                    for (idx, gi) in g.iter().enumerate() {
                        gb[(idx / (r * k)) * k + idx % k] += gi;
                    }
                }
            }
            Op::Scale(x, c) => {
                if slot(grads, *x) {
                    acc!(x).iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::AddScalar(x) => {
                if slot(grads, *x) {
                    acc!(x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::MulConst(x, c) => {
                if slot(grads, *x) {
                    for ((a, gi), ci) in acc!(x).iter_mut().zip(g).zip(c) {
                        *a += gi * ci;
                    }
                }
            }
            Op::Relu(x) => {
                if slot(grads, *x) {
                    for ((a, gi), o) in acc!(x).iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *a += gi;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if slot(grads, *x) {
                    for ((a, gi), o) in acc!(x).iter_mut().zip(g).zip(out) {
                        *a += gi * (1.0 - o * o);
                    }
                }
            }
            Op::Exp(x) => {
                if slot(grads, *x) {
                    for ((a, gi), o) in acc!(x).iter_mut().zip(g).zip(out) {
                        *a += gi * o;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if slot(grads, *x) {
                    for ((a, gi), o) in acc!(x).iter_mut().zip(g).zip(out) {
                        *a += gi * o * (1.0 - o);
                    }
                }
            }
            Op::Square(x) => {
                if slot(grads, *x) {
                    let d = nodes[x.0].value.data();
                    for ((a, gi), xi) in acc!(x).iter_mut().zip(g).zip(d) {
                        *a += 2.0 * gi * xi;
                    }
                }
            }
            Op::Softmax(x) => {
                if slot(grads, *x) {
                    let k = nodes[x.0].value.last_dim();
                    let gx = acc!(x);
                    for ((gr, yr), ar) in g.chunks(k).zip(out.chunks(k)).zip(gx.chunks_mut(k)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            ar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if slot(grads, *x) {
                    let k = nodes[x.0].value.last_dim();
                    let gx = acc!(x);
                    for ((gr, yr), ar) in g.chunks(k).zip(out.chunks(k)).zip(gx.chunks_mut(k)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..k {
                            ar[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if slot(grads, *logits) {
                    let k = nodes[logits.0].value.last_dim();
                    let gx = acc!(logits);
                    for (r, (&t, (pr, ar))) in targets.iter().zip(probs.chunks(k).zip(gx.chunks_mut(k))).enumerate() {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            ar[j] += gr * pr[j];
                        }
                        ar[t] -= gr;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let k = nodes[gain.0].value.numel();
                let gn = nodes[gain.0].value.data();
                if slot(grads, *gain) {
                    let gg = acc!(gain);
                    for (gr, hr) in g.chunks(k).zip(xhat.chunks(k)) {
                        for j in 0..k {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if slot(grads, *bias) {
                    let gb = acc!(bias);
                    for gr in g.chunks(k) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if slot(grads, *x) {
                    let gx = acc!(x);
                    let kf = k as f64;
                    for (r, ((gr, hr), ar)) in g.chunks(k).zip(xhat.chunks(k)).zip(gx.chunks_mut(k)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..k {
                            let dh = gr[j] * gn[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= kf;
                        mean_dh_h /= kf;
                        for j in 0..k {
                            let dh = gr[j] * gn[j];
                            ar[j] += inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if slot(grads, *x) {
                    let k = nodes[x.0].value.last_dim();
                    let gx = acc!(x);
                    for (r, ((gr, yr), ar)) in g.chunks(k).zip(out.chunks(k)).zip(gx.chunks_mut(k)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            ar[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::GatherLast { x, idx } => {
                if slot(grads, *x) {
                    let k = nodes[x.0].value.last_dim();
                    let gx = acc!(x);
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * k + j] += g[r];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if slot(grads, *table) {
                    let d = nodes[table.0].value.shape()[1];
                    let gt = acc!(table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if slot(grads, *x) {
                    acc!(x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Permute { x, perm } => {
                if slot(grads, *x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (_, back) = permute_data(g, nodes[i].value.shape(), &inverse);
                    acc!(x).iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
            }
            Op::Concat { a, b, axis } => {
                let (outer, la, inner) = around(nodes[a.0].value.shape(), *axis);
                let lb = nodes[b.0].value.shape()[*axis];
                let stride = (la + lb) * inner;
                if slot(grads, *a) {
                    let ga = acc!(a);
                    for o in 0..outer {
                        let src = &g[o * stride..o * stride + la * inner];
                        ga[o * la * inner..(o + 1) * la * inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                if slot(grads, *b) {
                    let gb = acc!(b);
                    for o in 0..outer {
                        let src = &g[o * stride + la * inner..(o + 1) * stride];
                        gb[o * lb * inner..(o + 1) * lb * inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                if slot(grads, *x) {
                    let (outer, l, inner) = around(nodes[x.0].value.shape(), *axis);
                    let len = nodes[i].value.shape()[*axis];
                    let gx = acc!(x);
                    for o in 0..outer {
                        let base = o * l * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        gx[base..base + len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                if slot(grads, *x) {
                    let (outer, l, inner) = around(nodes[x.0].value.shape(), *axis);
                    let gx = acc!(x);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..l {
                            gx[(o * l + j) * inner..(o * l + j + 1) * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::BroadcastAxis { x, axis } => {
                if slot(grads, *x) {
                    let (outer, n, inner) = around(nodes[i].value.shape(), *axis);
                    let gx = acc!(x);
                    for o in 0..outer {
                        for j in 0..n {
                            let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                            gx[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Tile(x) => {
                if slot(grads, *x) {
                    let n = nodes[x.0].value.numel();
                    let gx = acc!(x);
                    for chunk in g.chunks(n.max(1)) {
                        gx.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Sum(x) => {
                if slot(grads, *x) {
                    acc!(x).iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if slot(grads, *x) {
                    let n = nodes[x.0].value.numel() as f64;
                    acc!(x).iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
        }
    }
}
