//! Reverse-mode differentiation over a flat tape of matrix primitives.
//!
//! Every primitive records its inputs (and whatever forward intermediates
//! its backward rule needs) on the tape. [`Graph::backward`] walks the tape
//! in reverse and returns gradients for the parameter leaves only. Nodes
//! that do not depend on any parameter are skipped during the backward pass.

use super::gemm::{gemm, gemm_strided, MatRef};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    AddTiled { x: Var, table: Var, seq_len: usize },
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { qkv: Var, seq_len: usize, heads: usize, lens: Vec<usize>, probs: Vec<f64> },
    MeanPool { x: Var, seq_len: usize, lens: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Var, Var),
    SliceCols { x: Var, start: usize },
    Transpose(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::AddTiled { .. } => "add_tiled",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(_) => "exp",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::MeanPool { .. } => "mean_pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather { .. } => "gather",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(_) => "transpose",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mat(t: &Tensor, transposed: bool) -> MatRef<'_> {
    MatRef::new(t.data(), t.rows(), t.cols(), transposed)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { primitive: op.name() });
        }
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Input => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, &[])
    }

    /// A trainable leaf bound to `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.get(id).clone(), Op::Param(id), &[])
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ma, mb) = (mat(av, ta), mat(bv, tb));
        if ma.cols != mb.rows {
            return Err(Error::shape("matmul", format!("{}x{} · {}x{}", ma.rows, ma.cols, mb.rows, mb.cols)));
        }
        let (m, n) = (ma.rows, mb.cols);
        let mut out = vec![0.0; m * n];
        gemm(ma, mb, &mut out, 1.0, 0.0);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut t = xv.clone();
        for row in t.data_mut().chunks_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(r, b)| *r += b);
        }
        self.push(t, Op::AddBias(x, bias), &[x, bias])
    }

    /// Adds row `t` of `table` to row `b * seq_len + t` of `x` for every
    /// sequence `b`; `table` may have more rows than `seq_len`.
    pub fn add_tiled(&mut self, x: Var, table: Var, seq_len: usize) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(table));
        let c = xv.cols();
        if tv.cols() != c || tv.rows() < seq_len || seq_len == 0 || xv.rows() % seq_len != 0 {
            return Err(Error::shape("add_tiled", format!("{:?} + {:?} (seq_len {seq_len})", xv.shape(), tv.shape())));
        }
        let mut t = xv.clone();
        for (r, row) in t.data_mut().chunks_mut(c).enumerate() {
            let p = tv.row(r % seq_len);
            row.iter_mut().zip(p).for_each(|(v, q)| *v += q);
        }
        self.push(t, Op::AddTiled { x, table, seq_len }, &[x, table])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(t, Op::Scale(x, factor), &[x])
    }

    /// Multiplies `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::shape("scale_by", format!("factor has shape {:?}", sv.shape())));
        }
        let f = sv.item();
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= f);
        self.push(t, Op::ScaleBy(x, s), &[x, s])
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push(t, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), |v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    /// Row-wise layer normalization with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("layer_norm", format!("{:?} with affine {:?}", xv.shape(), gv.shape())));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `qkv` holds `[q | k | v]` column blocks of width `d` for
    /// `batch * seq_len` rows. Sequence `b` only attends to its first
    /// `lens[b]` positions; padded query rows are computed but carry no
    /// information from padded keys.
    pub fn attention(&mut self, qkv: Var, seq_len: usize, heads: usize, lens: &[usize]) -> Result<Var> {
        let xv = self.value(qkv);
        let width = xv.cols();
        if !width.is_multiple_of(3) || !(width / 3).is_multiple_of(heads) {
            return Err(Error::shape("attention", format!("qkv width {width} with {heads} heads")));
        }
        let d = width / 3;
        let dh = d / heads;
        let batch = lens.len();
        if xv.rows() != batch * seq_len || lens.iter().any(|&l| l == 0 || l > seq_len) {
            return Err(Error::shape(
                "attention",
                format!("{} rows for {batch} sequences of length {seq_len}", xv.rows()),
            ));
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let data = xv.data();
        let mut out = vec![0.0; batch * seq_len * d];
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        for (b, &len) in lens.iter().enumerate() {
            let base = b * seq_len * width;
            for h in 0..heads {
                let q = MatRef::block(data, base + h * dh, seq_len, dh, width);
                let k = MatRef::block(data, base + d + h * dh, len, dh, width);
                let v = MatRef::block(data, base + 2 * d + h * dh, len, dh, width);
                let p_off = (b * heads + h) * seq_len * seq_len;
                let p = &mut probs[p_off..p_off + seq_len * seq_len];
                gemm_strided(q, k.t(), p, 0, seq_len, scale, 0.0);
                for row in p.chunks_mut(seq_len) {
                    let active = &mut row[..len];
                    let max = active.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for s in active.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    active.iter_mut().for_each(|s| *s /= total);
                }
                let pm = MatRef::block(p, 0, seq_len, len, seq_len);
                gemm_strided(pm, v, &mut out, b * seq_len * d + h * dh, d, 1.0, 0.0);
            }
        }
        let t = Tensor::matrix(batch * seq_len, d, out)?;
        let lens = lens.to_vec();
        self.push(t, Op::Attention { qkv, seq_len, heads, lens, probs }, &[qkv])
    }

    /// Mean over the first `lens[b]` rows of each length-`seq_len` block.
    pub fn mean_pool(&mut self, x: Var, seq_len: usize, lens: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if xv.rows() != lens.len() * seq_len || lens.iter().any(|&l| l == 0 || l > seq_len) {
            return Err(Error::shape("mean_pool", format!("{:?} for {} sequences", xv.shape(), lens.len())));
        }
        let mut out = vec![0.0; lens.len() * c];
        for (b, &len) in lens.iter().enumerate() {
            let acc = &mut out[b * c..(b + 1) * c];
            for t in 0..len {
                acc.iter_mut().zip(xv.row(b * seq_len + t)).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= len as f64);
        }
        let t = Tensor::matrix(lens.len(), c, out)?;
        let lens = lens.to_vec();
        self.push(t, Op::MeanPool { x, seq_len, lens }, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut t = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Contract(format!("l2_normalize: row {i} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(t, Op::L2Normalize { x, norms }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut t = xv.clone();
        for row in t.data_mut().chunks_mut(c) {
            let s = super::softmax(row);
            row.copy_from_slice(&s);
        }
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::shape("cross_entropy", format!("{} targets for {} rows", targets.len(), lv.rows())));
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            total += super::softmax_cross_entropy(row, t)?;
            probs.extend(super::softmax(row));
        }
        let loss = Tensor::scalar(total / targets.len() as f64);
        let targets = targets.to_vec();
        self.push(loss, Op::CrossEntropy { logits, targets, probs }, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.sum() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Row lookup into `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let c = tv.cols();
        if let Some(bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::shape("gather", format!("row {bad} of {}", tv.rows())));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::matrix(ids.len(), c, out)?;
        self.push(t, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape("concat_rows", format!("{:?} ++ {:?}", av.shape(), bv.shape())));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let t = Tensor::matrix(av.rows() + bv.rows(), av.cols(), data)?;
        self.push(t, Op::ConcatRows(a, b), &[a, b])
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.cols() {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {}", start + len, xv.cols())));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::matrix(xv.rows(), len, data)?;
        self.push(t, Op::SliceCols { x, start }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x), &[x])
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// parameter leaf it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(id) = node.op {
                match out.get(id) {
                    Some(prev) => {
                        let mut sum = prev.clone();
                        sum.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                        out.insert(id, sum);
                    }
                    None => out.insert(id, g),
                }
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(t.data_mut());
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ma, mb) = (mat(av, *ta), mat(bv, *tb));
                let gm = MatRef::new(gd, ma.rows, mb.cols, false);
                // d op(a) = g · op(b)ᵀ ; d op(b) = op(a)ᵀ · g
                self.acc(grads, *a, |buf| {
                    if *ta {
                        gemm(mb, gm.t(), buf, 1.0, 1.0);
                    } else {
                        gemm(gm, mb.t(), buf, 1.0, 1.0);
                    }
                });
                self.acc(grads, *b, |buf| {
                    if *tb {
                        gemm(gm.t(), ma, buf, 1.0, 1.0);
                    } else {
                        gemm(ma.t(), gm, buf, 1.0, 1.0);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.acc(grads, *v, |buf| buf.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, |buf| buf.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                let c = g.cols();
                self.acc(grads, *bias, |buf| {
                    for row in gd.chunks(c) {
                        buf.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::AddTiled { x, table, seq_len } => {
                self.acc(grads, *x, |buf| buf.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                let c = g.cols();
                self.acc(grads, *table, |buf| {
                    for (r, row) in gd.chunks(c).enumerate() {
                        let t = r % seq_len;
                        buf[t * c..(t + 1) * c].iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(x, f) => {
                self.acc(grads, *x, |buf| buf.iter_mut().zip(gd).for_each(|(a, y)| *a += f * y));
            }
            Op::ScaleBy(x, s) => {
                let f = self.value(*s).item();
                let xv = self.value(*x).data();
                self.acc(grads, *x, |buf| buf.iter_mut().zip(gd).for_each(|(a, y)| *a += f * y));
                self.acc(grads, *s, |buf| {
                    buf[0] += xv.iter().zip(gd).map(|(a, y)| a * y).sum::<f64>();
                });
            }
            Op::Exp(x) => {
                let yv = node.value.data();
                self.acc(grads, *x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * yv[i];
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |buf| {
                    for i in 0..buf.len() {
                        let v = xv[i];
                        let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        buf[i] += gd[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                self.acc(grads, *x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = g.cols();
                let gam = self.value(*gamma).data();
                self.acc(grads, *gamma, |buf| {
                    for (r, row) in gd.chunks(c).enumerate() {
                        for j in 0..c {
                            buf[j] += row[j] * xhat[r * c + j];
                        }
                    }
                });
                self.acc(grads, *beta, |buf| {
                    for row in gd.chunks(c) {
                        buf.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                    }
                });
                self.acc(grads, *x, |buf| {
                    let n = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for (r, row) in gd.chunks(c).enumerate() {
                        let h = &xhat[r * c..(r + 1) * c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = row[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * h[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..c {
                            buf[r * c + j] += inv / n * (n * dxhat[j] - s1 - h[j] * s2);
                        }
                    }
                });
            }
            Op::Attention { qkv, seq_len, heads, lens, probs } => {
                let xv = self.value(*qkv);
                let width = xv.cols();
                let d = width / 3;
                let dh = d / heads;
                let t = *seq_len;
                let scale = 1.0 / (dh as f64).sqrt();
                let data = xv.data();
                self.acc(grads, *qkv, |buf| {
                    let mut dp = vec![0.0; t * t];
                    for (b, &len) in lens.iter().enumerate() {
                        let base = b * t * width;
                        for h in 0..*heads {
                            let q = MatRef::block(data, base + h * dh, t, dh, width);
                            let k = MatRef::block(data, base + d + h * dh, len, dh, width);
                            let v = MatRef::block(data, base + 2 * d + h * dh, len, dh, width);
                            let go = MatRef::block(gd, b * t * d + h * dh, t, dh, d);
                            let p_off = (b * *heads + h) * t * t;
                            let p = &probs[p_off..p_off + t * t];
                            let pm = MatRef::block(p, 0, t, len, t);
                            // dv += pᵀ · go
                            gemm_strided(pm.t(), go, buf, base + 2 * d + h * dh, width, 1.0, 1.0);
                            // dp = go · vᵀ, then softmax backward in place
                            gemm_strided(go, v.t(), &mut dp, 0, t, 1.0, 0.0);
                            for i in 0..t {
                                let prow = &p[i * t..i * t + len];
                                let drow = &mut dp[i * t..i * t + len];
                                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                                for j in 0..len {
                                    drow[j] = prow[j] * (drow[j] - dot);
                                }
                            }
                            let ds = MatRef::block(&dp, 0, t, len, t);
                            // dq += scale · ds · k ; dk += scale · dsᵀ · q
                            gemm_strided(ds, k, buf, base + h * dh, width, scale, 1.0);
                            gemm_strided(ds.t(), q, buf, base + d + h * dh, width, scale, 1.0);
                        }
                    }
                });
            }
            Op::MeanPool { x, seq_len, lens } => {
                let c = g.cols();
                self.acc(grads, *x, |buf| {
                    for (b, &len) in lens.iter().enumerate() {
                        let gr = &gd[b * c..(b + 1) * c];
                        for t in 0..len {
                            let off = (b * seq_len + t) * c;
                            for j in 0..c {
                                buf[off + j] += gr[j] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let c = g.cols();
                let yv = node.value.data();
                self.acc(grads, *x, |buf| {
                    for (r, n) in norms.iter().enumerate() {
                        let y = &yv[r * c..(r + 1) * c];
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let denom = n.max(NORM_FLOOR);
                        for j in 0..c {
                            buf[r * c + j] += (gr[j] - y[j] * dot) / denom;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = g.cols();
                let yv = node.value.data();
                self.acc(grads, *x, |buf| {
                    for r in 0..g.rows() {
                        let y = &yv[r * c..(r + 1) * c];
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            buf[r * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let f = gd[0] / targets.len() as f64;
                self.acc(grads, *logits, |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[r * c + j] += f * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |buf| buf.iter_mut().for_each(|a| *a += gd[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |buf| buf.iter_mut().for_each(|a| *a += gd[0] / n));
            }
            Op::Gather { table, ids } => {
                let c = g.cols();
                self.acc(grads, *table, |buf| {
                    for (r, &i) in ids.iter().enumerate() {
                        buf[i * c..(i + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]).for_each(|(a, y)| *a += y);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                self.acc(grads, *a, |buf| buf.iter_mut().zip(&gd[..split]).for_each(|(x, y)| *x += y));
                self.acc(grads, *b, |buf| buf.iter_mut().zip(&gd[split..]).for_each(|(x, y)| *x += y));
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = g.cols();
                self.acc(grads, *x, |buf| {
                    for r in 0..g.rows() {
                        for j in 0..w {
                            buf[r * c + start + j] += gd[r * w + j];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let gt = g.transpose();
                self.acc(grads, *x, |buf| buf.iter_mut().zip(gt.data()).for_each(|(a, y)| *a += y));
            }
        }
        for v in node_inputs(&node.op) {
            if let Some(t) = &grads[v.0] {
                if !t.all_finite() {
                    return Err(Error::NonFinite { primitive: node.op.name() });
                }
            }
        }
        Ok(())
    }
}

fn node_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::MatMul { a, b, .. }
        | Op::Add(a, b)
        | Op::AddBias(a, b)
        | Op::Mul(a, b)
        | Op::ScaleBy(a, b)
        | Op::ConcatRows(a, b) => {
            vec![*a, *b]
        }
        Op::AddTiled { x, table, .. } => vec![*x, *table],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Attention { qkv, .. } => vec![*qkv],
        Op::Gather { table, .. } => vec![*table],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Scale(x, _)
        | Op::Exp(x)
        | Op::Gelu(x)
        | Op::Tanh(x)
        | Op::Softmax(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Transpose(x)
        | Op::MeanPool { x, .. }
        | Op::L2Normalize { x, .. }
        | Op::SliceCols { x, .. } => vec![*x],
    }
}
