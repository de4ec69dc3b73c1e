//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every op appends a node holding its value; [`Tape::backward`] walks the
//! nodes in reverse insertion order, so accumulation order is fixed and runs
//! are bit-reproducible.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::grid::GridLayout;
use crate::numerics::tensor::{self, LayerNormCache, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MaskedMeanRows(Var, Vec<usize>),
    Mse(Var, Var),
    Sum(Vec<Var>),
    GridConv {
        x: Var,
        kernel: Var,
        layout: Rc<GridLayout>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value as `v`, cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.detached();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.rows() != sb.rows() || sa.cols() != sb.cols() {
            return Err(Error::dim(op, sa.shape(), sb.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Adds `bias` (length `cols`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.len() != n {
            return Err(Error::dim("add_row", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % n])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Row softmax; masked columns get probability exactly zero.
    pub fn softmax_rows(&mut self, x: Var, col_mask: Option<&[bool]>) -> Result<Var> {
        let out = tensor::softmax_rows_masked(self.value(x), col_mask)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) =
            tensor::layer_norm_with_cache(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let m = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != m {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(*first).shape(),
                    self.value(*p).shape(),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != n {
                return Err(Error::dim("concat_rows", self.value(*first).shape(), t.shape()));
            }
            m += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if rows.is_empty() {
            return Err(Error::arg("gather of no rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::arg(format!("row {bad} out of range for {:?}", t.shape())));
        }
        let mut data = Vec::with_capacity(rows.len() * t.cols());
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::matrix(rows.len(), t.cols(), data)?;
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec()), &[x]))
    }

    /// Mean over the rows whose mask entry is true, as a `1 × cols` row.
    pub fn masked_mean_rows(&mut self, x: Var, row_mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let keep: Vec<usize> = match row_mask {
            Some(mask) => {
                if mask.len() != t.rows() {
                    return Err(Error::dim("masked_mean_rows", t.shape(), &[mask.len()]));
                }
                (0..t.rows()).filter(|&i| mask[i]).collect()
            }
            None => (0..t.rows()).collect(),
        };
        if keep.is_empty() {
            return Err(Error::arg("mean over fully masked rows"));
        }
        let n = t.cols();
        let mut data = vec![0.0; n];
        for &i in &keep {
            data.iter_mut().zip(t.row(i)).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / keep.len() as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::matrix(1, n, data)?;
        Ok(self.push(out, Op::MaskedMeanRows(x, keep), &[x]))
    }

    /// Mean squared difference over all elements, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::dim("mse", ta.shape(), tb.shape()));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / ta.len() as f64);
        Ok(self.push(out, Op::Mse(a, b), &[a, b]))
    }

    /// Elementwise sum of equally shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::arg("sum of nothing"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut data = vec![0.0; self.value(*first).len()];
        for p in parts {
            let t = self.value(*p);
            if t.len() != data.len() {
                return Err(Error::dim("sum", &shape, t.shape()));
            }
            data.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Sum(parts.to_vec()), parts))
    }

    pub fn grid_conv(&mut self, x: Var, kernel: Var, layout: Rc<GridLayout>) -> Result<Var> {
        let out = layout.conv(self.value(x), self.value(kernel))?;
        Ok(self.push(out, Op::GridConv { x, kernel, layout }, &[x, kernel]))
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::dim("backward", rv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let dc = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                if self.wants(*a) {
                    let da = tensor::matmul_nt(&dc, self.value(*b))?;
                    add_into(&mut grads[a.0], da.data());
                }
                if self.wants(*b) {
                    let db = tensor::matmul_tn(self.value(*a), &dc)?;
                    add_into(&mut grads[b.0], db.data());
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ: da = dc b, db = dcᵀ a
                let dc = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                if self.wants(*a) {
                    let da = tensor::matmul(&dc, self.value(*b))?;
                    add_into(&mut grads[a.0], da.data());
                }
                if self.wants(*b) {
                    let db = tensor::matmul_tn(&dc, self.value(*a))?;
                    add_into(&mut grads[b.0], db.data());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*bias) {
                    let n = node.value.cols();
                    let mut db = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_into(&mut grads[a.0], &d);
                }
            }
            Op::Softmax(x) => {
                // dx_j = s_j (g_j − Σ_k g_k s_k)
                if self.wants(*x) {
                    let s = &node.value;
                    let n = s.cols();
                    let mut dx = vec![0.0; s.len()];
                    for i in 0..s.rows() {
                        let srow = s.row(i);
                        let grow = &g[i * n..(i + 1) * n];
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let n = node.value.cols();
                let m = node.value.rows();
                let gam = self.value(*gamma).data();
                let xh = &cache.normalized;
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xh[i * n + j];
                        }
                    }
                    add_into(&mut grads[gamma.0], &dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    add_into(&mut grads[beta.0], &db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let dxh: Vec<f64> = (0..n).map(|j| g[i * n + j] * gam[j]).collect();
                        let sum_d: f64 = dxh.iter().sum();
                        let sum_dx: f64 = dxh
                            .iter()
                            .zip(&xh[i * n..(i + 1) * n])
                            .map(|(a, b)| a * b)
                            .sum();
                        let r = cache.inv_std[i];
                        for j in 0..n {
                            dx[i * n + j] =
                                r / nf * (nf * dxh[j] - sum_d - xh[i * n + j] * sum_dx);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * n + offset..i * n + offset + w]);
                        }
                        add_into(&mut grads[p.0], &d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(x, rows) => {
                if self.wants(*x) {
                    let src = self.value(*x);
                    let n = src.cols();
                    let mut dx = vec![0.0; src.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            dx[r * n + j] += g[k * n + j];
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::MaskedMeanRows(x, keep) => {
                if self.wants(*x) {
                    let src = self.value(*x);
                    let n = src.cols();
                    let inv = 1.0 / keep.len() as f64;
                    let mut dx = vec![0.0; src.len()];
                    for &r in keep {
                        for j in 0..n {
                            dx[r * n + j] = g[j] * inv;
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = 2.0 * g[0] / ta.len() as f64;
                let diff: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| c * (x - y))
                    .collect();
                if self.wants(*a) {
                    add_into(&mut grads[a.0], &diff);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], g);
                    }
                }
            }
            Op::GridConv { x, kernel, layout } => {
                let (dx, dk) = layout.conv_backward(self.value(*x), self.value(*kernel), g);
                if self.wants(*x) {
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*kernel) {
                    add_into(&mut grads[kernel.0], &dk);
                }
            }
        }
        Ok(())
    }
}
