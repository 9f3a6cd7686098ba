//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the inputs it
//! read. Nodes are only ever appended, so the tape is always in topological
//! order, and [`Tape::backward`] replays it once from the loss back to the
//! first node. The tape is consumed by `backward`: one tape per forward pass.
//!
//! The tape also counts forward floating-point work: every matrix product
//! `[m×k]·[k×n]`, including the ones inside [`Tape::attention`], adds
//! `2·m·k·n` to [`Tape::flops`].

use std::collections::HashMap;

use super::{MatView, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{contract_err, dim_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    flops: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        _ => {
            let cols = shape[shape.len() - 1];
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_vars: HashMap::new(), flops: 0 }
    }

    /// Forward floating-point operations counted so far (`2·m·k·n` per matrix product).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input (never receives a gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A free leaf; when `requires_grad` its gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Loads a parameter onto the tape. Repeated loads return the same node,
    /// so a parameter shared by several consumers has a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable, "param")?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("{op}: expected a 2-D tensor, got {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return dim_err(format!("matmul: inner dimensions disagree: {:?} × {:?}", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm_raw(
            self.value(a).data(),
            MatView::dense(m, k),
            self.value(b).data(),
            MatView::dense(k, n),
            &mut out,
            MatView::dense(m, n),
            T::zero(),
        );
        self.flops += 2 * (m * k * n) as u64;
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng, "matmul")
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{name}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, name: &'static str) -> Result<(usize, usize)> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(row).numel() != cols || self.shape(x).is_empty() {
            return dim_err(format!("{name}: row {:?} does not broadcast over {:?}", self.shape(row), self.shape(x)));
        }
        Ok(rows_cols(self.shape(x)))
    }

    /// `x + row`, broadcasting a length-`cols` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.row_broadcast(x, row, "add_row")?;
        let r = self.value(row).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v + r[i % cols]).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(&[x, row]);
        self.push(out, Op::AddRow(x, row), ng, "add_row")
    }

    /// `x ⊙ row`, broadcasting over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.row_broadcast(x, row, "mul_row")?;
        let r = self.value(row).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * r[i % cols]).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(&[x, row]);
        self.push(out, Op::MulRow(x, row), ng, "mul_row")
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        let ng = self.ng(&[x]);
        self.push(out, Op::AddConst(x), ng, "add_const")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), ng, "scale")
    }

    /// GELU, tanh approximation `½x(1 + tanh u)`, evaluated as the equal `x·σ(2u)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (k2, c) = (T::from_f64_lossy(2.0 * SQRT_2_OVER_PI), T::from_f64_lossy(GELU_C));
        let out = self.value(x).map(|v| v / (T::one() + (-(k2 * (v + c * v * v * v))).exp()));
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng, "gelu")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let ng = self.ng(&[x]);
        self.push(out, Op::Silu(x), ng, "silu")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols], None);
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax(x), ng, "softmax_rows")
    }

    /// Normalizes each position over the last dimension (eps = 1e-5), then
    /// applies the optional affine `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&shape);
        if shape.is_empty() || d == 0 {
            return dim_err("layer_norm: last dimension must be non-zero");
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if let Some(p) = p {
                if self.value(p).numel() != d {
                    return dim_err(format!(
                        "layer_norm: {name} has {} elements, last dim is {d}",
                        self.value(p).numel()
                    ));
                }
            }
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let xs = self.value(x).data();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let g = gamma.map(|g| self.value(g).data().to_vec());
        let b = beta.map(|b| self.value(b).data().to_vec());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let j = i % d;
                let y = g.as_ref().map_or(h, |g| h * g[j]);
                b.as_ref().map_or(y, |b| y + b[j])
            })
            .collect();
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        let ng = self.ng(&inputs);
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng, "layer_norm")
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[L×d]`, `k` and `v` are `[S×d]`. Each of the `heads` heads
    /// uses columns `h·d/heads .. (h+1)·d/heads` and the scale `1/√(d/heads)`.
    /// Keys flagged in `key_mask` are excluded from every softmax (their
    /// weight is exactly zero). Output is `[L×d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Result<Var> {
        let (l, d) = self.dims2(q, "attention")?;
        let (s, dk) = self.dims2(k, "attention")?;
        let (sv, dv) = self.dims2(v, "attention")?;
        if heads == 0 || d % heads != 0 {
            return dim_err(format!("attention: width {d} is not divisible into {heads} heads"));
        }
        if dk != d || dv != d {
            return dim_err(format!("attention: head dimension mismatch: q {d}, k {dk}, v {dv}"));
        }
        if sv != s {
            return dim_err(format!("attention: {s} keys but {sv} values"));
        }
        if let Some(m) = key_mask {
            if m.len() != s {
                return dim_err(format!("attention: mask covers {} keys, have {s}", m.len()));
            }
        }
        if s == 0 || key_mask.is_some_and(|m| m.iter().all(|&x| x)) {
            return contract_err("attention: every key is masked");
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); heads * l * s];
        let mut out = vec![T::zero(); l * d];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for h in 0..heads {
                let p = &mut probs[h * l * s..(h + 1) * l * s];
                let qh = MatView { offset: h * dh, rows: l, cols: dh, row_stride: d, col_stride: 1 };
                let kt = MatView { offset: h * dh, rows: dh, cols: s, row_stride: 1, col_stride: d };
                T::gemm_raw(qd, qh, kd, kt, p, MatView::dense(l, s), T::zero());
                for r in 0..l {
                    let row = &mut p[r * s..(r + 1) * s];
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                    softmax_in_place(row, key_mask);
                }
                let vh = MatView { offset: h * dh, rows: s, cols: dh, row_stride: d, col_stride: 1 };
                let oh = MatView { offset: h * dh, rows: l, cols: dh, row_stride: d, col_stride: 1 };
                T::gemm_raw(p, MatView::dense(l, s), vd, vh, &mut out, oh, T::zero());
            }
        }
        self.flops += 4 * (l * s * d) as u64;
        let ng = self.ng(&[q, k, v]);
        self.push(Tensor::new(vec![l, d], out)?, Op::Attention { q, k, v, heads, probs }, ng, "attention")
    }

    /// Attention weights `[heads × L × S]` recorded by an [`Tape::attention`] node.
    pub fn attention_probs(&self, out: Var) -> Option<Tensor<T>> {
        match &self.nodes[out.0].op {
            Op::Attention { q, k, heads, probs, .. } => {
                let (l, s) = (self.shape(*q)[0], self.shape(*k)[0]);
                Tensor::new(vec![*heads, l, s], probs.clone()).ok()
            }
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_rows: no inputs");
        };
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return dim_err(format!("concat_rows: widths {cols} and {c} differ"));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_rows")?;
        if start + len > rows {
            return dim_err(format!("slice_rows: {start}..{} out of {rows} rows", start + len));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![len, cols], data)?, Op::SliceRows(x, start), ng, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if start + len > cols {
            return dim_err(format!("slice_cols: {start}..{} out of {cols} columns", start + len));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols(x, start), ng, "slice_cols")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return dim_err("mean of an empty tensor");
        }
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s / T::from_usize(n).unwrap()), Op::Mean(x), ng, "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        self.push(out, Op::Reshape(x), ng, "reshape")
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// `x·w + b` for `x: [n×in]`, `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Runs the backward pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return contract_err(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let Tape { nodes, .. } = self;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            backprop_node(&nodes, i, &g, &mut grads);
        }

        let mut kept = Vec::with_capacity(nodes.len());
        let mut params = Vec::new();
        for (i, (node, g)) in nodes.into_iter().zip(grads).enumerate() {
            let g = match node.op {
                Op::Leaf | Op::Param(_) if node.needs_grad => {
                    let shape = node.value.shape().to_vec();
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    Some(Tensor::new(shape, data)?)
                }
                _ => None,
            };
            if let (Op::Param(id), Some(_)) = (&node.op, &g) {
                params.push((*id, i));
            }
            kept.push(g);
        }
        Ok(Gradients { grads: kept, params })
    }
}

/// Softmax over a row, skipping masked entries (which become exactly 0).
fn softmax_in_place<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let live = |j: usize| mask.is_none_or(|m| !m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if live(j) && v > max {
            max = v;
        }
    }
    let mut total = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if live(j) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn acc<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (m, k) = rows_cols(val(*a).shape());
            let n = rows_cols(val(*b).shape()).1;
            if let Some(ga) = acc(grads, nodes, *a) {
                T::gemm_raw(
                    g,
                    MatView::dense(m, n),
                    val(*b).data(),
                    MatView::dense_t(k, n),
                    ga,
                    MatView::dense(m, k),
                    T::one(),
                );
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                T::gemm_raw(
                    val(*a).data(),
                    MatView::dense_t(m, k),
                    g,
                    MatView::dense(m, n),
                    gb,
                    MatView::dense(k, n),
                    T::one(),
                );
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= *s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data().to_vec(), val(*b).data().to_vec());
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(&bv) {
                    *d += *s * *y;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(&av) {
                    *d += *s * *x;
                }
            }
        }
        Op::AddRow(x, r) => {
            let cols = val(*r).numel();
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(gx, g);
            }
            if let Some(gr) = acc(grads, nodes, *r) {
                for (j, s) in g.iter().enumerate() {
                    gr[j % cols] += *s;
                }
            }
        }
        Op::MulRow(x, r) => {
            let cols = val(*r).numel();
            let rv = val(*r).data().to_vec();
            let xv = val(*x).data().to_vec();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (j, (d, s)) in gx.iter_mut().zip(g).enumerate() {
                    *d += *s * rv[j % cols];
                }
            }
            if let Some(gr) = acc(grads, nodes, *r) {
                for (j, s) in g.iter().enumerate() {
                    gr[j % cols] += *s * xv[j];
                }
            }
        }
        Op::AddConst(x) | Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(gx, g);
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += *s * *c;
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).data().to_vec();
            if let Some(gx) = acc(grads, nodes, *x) {
                let (k, c, half) =
                    (T::from_f64_lossy(SQRT_2_OVER_PI), T::from_f64_lossy(GELU_C), T::from_f64_lossy(0.5));
                let three = T::from_f64_lossy(3.0);
                for ((d, s), &v) in gx.iter_mut().zip(g).zip(&xv) {
                    let th = (k * (v + c * v * v * v)).tanh();
                    let dudx = k * (T::one() + three * c * v * v);
                    let deriv = half * (T::one() + th) + half * v * (T::one() - th * th) * dudx;
                    *d += *s * deriv;
                }
            }
        }
        Op::Silu(x) => {
            let xv = val(*x).data().to_vec();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), &v) in gx.iter_mut().zip(g).zip(&xv) {
                    let sig = T::one() / (T::one() + (-v).exp());
                    *d += *s * sig * (T::one() + v * (T::one() - sig));
                }
            }
        }
        Op::Softmax(x) => {
            let (rows, cols) = rows_cols(out.shape());
            let y = out.data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: T = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| *a * *b).sum();
                    for j in span {
                        gx[j] += y[j] * (g[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let (rows, d) = rows_cols(out.shape());
            let gam = gamma.map(|gm| val(gm).data().to_vec());
            if let Some(gg) = gamma.and_then(|gm| acc(grads, nodes, gm)) {
                for (j, (s, h)) in g.iter().zip(xhat).enumerate() {
                    gg[j % d] += *s * *h;
                }
            }
            if let Some(gb) = beta.and_then(|bt| acc(grads, nodes, bt)) {
                for (j, s) in g.iter().enumerate() {
                    gb[j % d] += *s;
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let dn = T::from_usize(d).unwrap();
                let mut dxhat = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate().take(rows) {
                    let span = r * d..(r + 1) * d;
                    for (j, idx) in span.clone().enumerate() {
                        dxhat[j] = gam.as_ref().map_or(g[idx], |gm| g[idx] * gm[j]);
                    }
                    let mean_d: T = dxhat.iter().copied().sum::<T>() / dn;
                    let mean_dh: T = dxhat.iter().zip(&xhat[span.clone()]).map(|(a, b)| *a * *b).sum::<T>() / dn;
                    for (j, idx) in span.enumerate() {
                        gx[idx] += rs * (dxhat[j] - mean_d - xhat[idx] * mean_dh);
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (l, d) = rows_cols(val(*q).shape());
            let s = rows_cols(val(*k).shape()).0;
            let dh = d / heads;
            let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
            let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
            let mut gq = vec![T::zero(); l * d];
            let mut gk = vec![T::zero(); s * d];
            let mut gv = vec![T::zero(); s * d];
            let mut dp = vec![T::zero(); l * s];
            for h in 0..*heads {
                let p = &probs[h * l * s..(h + 1) * l * s];
                let head = |rows| MatView { offset: h * dh, rows, cols: dh, row_stride: d, col_stride: 1 };
                let head_t = |cols| MatView { offset: h * dh, rows: dh, cols, row_stride: 1, col_stride: d };
                // dP = dO_h · V_hᵀ
                T::gemm_raw(g, head(l), vd, head_t(s), &mut dp, MatView::dense(l, s), T::zero());
                // dV_h += Pᵀ · dO_h
                T::gemm_raw(p, MatView::dense_t(l, s), g, head(l), &mut gv, head(s), T::one());
                // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the score scale
                for r in 0..l {
                    let span = r * s..(r + 1) * s;
                    let dot: T = p[span.clone()].iter().zip(&dp[span.clone()]).map(|(a, b)| *a * *b).sum();
                    for j in span {
                        dp[j] = p[j] * (dp[j] - dot) * scale;
                    }
                }
                T::gemm_raw(&dp, MatView::dense(l, s), kd, head(s), &mut gq, head(l), T::one());
                T::gemm_raw(&dp, MatView::dense_t(l, s), qd, head(l), &mut gk, head(s), T::one());
            }
            for (var, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                if let Some(dst) = acc(grads, nodes, var) {
                    add_into(dst, &local);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                if let Some(dst) = acc(grads, nodes, p) {
                    add_into(dst, &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::SliceRows(x, start) => {
            let cols = rows_cols(out.shape()).1;
            if let Some(dst) = acc(grads, nodes, *x) {
                add_into(&mut dst[start * cols..start * cols + g.len()], g);
            }
        }
        Op::SliceCols(x, start) => {
            let (rows, len) = rows_cols(out.shape());
            let cols = rows_cols(val(*x).shape()).1;
            if let Some(dst) = acc(grads, nodes, *x) {
                for r in 0..rows {
                    add_into(&mut dst[r * cols + start..r * cols + start + len], &g[r * len..(r + 1) * len]);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dst) = acc(grads, nodes, *x) {
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(x) => {
            let n = T::from_usize(val(*x).numel()).unwrap();
            if let Some(dst) = acc(grads, nodes, *x) {
                for d in dst.iter_mut() {
                    *d += g[0] / n;
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`] for leaves and parameters.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with `requires_grad` or of a trainable parameter.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, i)| self.grads[*i].as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|(id, i)| self.grads[*i].as_ref().map(|g| (*id, g)))
    }
}
