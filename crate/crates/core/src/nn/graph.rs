//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! parameters and differentiable inputs. Graphs are cheap, single-use objects:
//! build one per forward pass and drop it afterwards.

use std::borrow::Cow;
use std::collections::HashMap;

use super::tensor::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Constant,
    Param(ParamId),
    Input,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Gather { x: Var, idx: Vec<Option<usize>> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
    macs: u64,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to an input or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter touched by the forward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, n)| self.grads[n].as_ref())
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            macs: 0,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Multiply-accumulates performed by forward matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Constant, false)
    }

    /// Differentiable leaf that is not a parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(self.params.get(id)), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// `op(a) · op(b)`.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = gemm(self.value(a), ta, self.value(b), tb)?;
        let inner = if ta { self.value(a).rows() } else { self.value(a).cols() };
        self.macs += (out.len() * inner) as u64;
        Ok(self.derived(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    fn check_row(&self, x: Var, r: Var) -> Result<()> {
        let (xc, rv) = (self.value(x).cols(), self.value(r));
        if rv.len() != xc {
            return Err(Error::Shape(format!(
                "row vector of {} values cannot broadcast over {:?}",
                rv.len(),
                self.value(x).shape()
            )));
        }
        Ok(())
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.check_row(x, r)?;
        let rv = self.value(r).data().to_vec();
        let mut out = self.value(x).clone();
        let c = rv.len();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(&rv) {
                *o += b;
            }
        }
        Ok(self.derived(out, Op::AddRow(x, r), &[x, r]))
    }

    /// Multiplies every row of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.check_row(x, r)?;
        let rv = self.value(r).data().to_vec();
        let mut out = self.value(x).clone();
        let c = rv.len();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(&rv) {
                *o *= b;
            }
        }
        Ok(self.derived(out, Op::MulRow(x, r), &[x, r]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.derived(out, Op::Scale(x, s), &[x])
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.derived(out, Op::Offset(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let u = GELU_C * (v + GELU_A * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        self.derived(out, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.derived(out, Op::Silu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.derived(out, Op::Exp(x), &[x])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols().max(1);
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.derived(out, Op::Softmax(x), &[x])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols().max(1);
        let mut rstd = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.derived(out, Op::LayerNorm { x, rstd }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of {c}",
                start + len
            )));
        }
        let r = xv.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::new(&[r, len], data)?;
        Ok(self.derived(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let r = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} of {r}")));
        }
        let out = self.value(x).gather_rows(idx);
        Ok(self.derived(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Flat gather: `out[i] = x[idx[i]]`, or zero where `idx[i]` is `None`.
    pub fn gather(&mut self, x: Var, idx: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= xv.len()) {
            return Err(Error::Index(format!("flat index {bad} of {}", xv.len())));
        }
        let data = idx
            .iter()
            .map(|i| i.map_or(0.0, |i| xv.data()[i]))
            .collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(out, Op::Gather { x, idx }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::full(&[1, 1], self.value(x).sum());
        self.derived(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let out = Tensor::full(&[1, 1], self.value(x).sum() / n);
        self.derived(out, Op::Mean(x), &[x])
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Reverse pass seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            match node.op {
                Op::Param(id) => {
                    params.push((id, i));
                    grads[i] = Some(g);
                }
                Op::Input => grads[i] = Some(g),
                _ => {}
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let out = &*self.nodes[i].value;

        match &self.nodes[i].op {
            Op::Constant | Op::Param(_) | Op::Input => {}
            &Op::MatMul { a, b, ta, tb } => {
                if self.rg(a) {
                    let da = if ta {
                        gemm(val(b), tb, g, true)?
                    } else {
                        gemm(g, false, val(b), !tb)?
                    };
                    acc(a, da.reshape(val(a).shape())?);
                }
                if self.rg(b) {
                    let db = if tb {
                        gemm(g, true, val(a), ta)?
                    } else {
                        gemm(val(a), !ta, g, false)?
                    };
                    acc(b, db.reshape(val(b).shape())?);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                acc(a, g.zip_map(val(b), |x, y| x * y)?);
                acc(b, g.zip_map(val(a), |x, y| x * y)?);
            }
            &Op::AddRow(x, r) => {
                acc(x, g.clone());
                if self.rg(r) {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (s, v) in gr.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(r, Tensor::new(val(r).shape(), gr)?);
                }
            }
            &Op::MulRow(x, r) => {
                let rv = val(r).data();
                let c = g.cols();
                if self.rg(x) {
                    let mut gx = g.clone();
                    for row in gx.data_mut().chunks_mut(c) {
                        for (o, m) in row.iter_mut().zip(rv) {
                            *o *= m;
                        }
                    }
                    acc(x, gx);
                }
                if self.rg(r) {
                    let mut gr = vec![0.0; c];
                    for (grow, xrow) in g.data().chunks(c).zip(val(x).data().chunks(c)) {
                        for ((s, a), b) in gr.iter_mut().zip(grow).zip(xrow) {
                            *s += a * b;
                        }
                    }
                    acc(r, Tensor::new(val(r).shape(), gr)?);
                }
            }
            &Op::Scale(x, s) => acc(x, g.scale(s)),
            &Op::Offset(x) => acc(x, g.clone()),
            &Op::Gelu(x) => {
                let gx = g.zip_map(val(x), |gv, v| {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                })?;
                acc(x, gx);
            }
            &Op::Silu(x) => {
                let gx = g.zip_map(val(x), |gv, v| {
                    let s = sigmoid(v);
                    gv * s * (1.0 + v * (1.0 - s))
                })?;
                acc(x, gx);
            }
            &Op::Exp(x) => acc(x, g.zip_map(out, |a, b| a * b)?),
            &Op::Softmax(x) => {
                let c = g.cols().max(1);
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                acc(x, gx);
            }
            Op::LayerNorm { x, rstd } => {
                let c = g.cols().max(1);
                let n = c as f64;
                let mut gx = g.clone();
                for ((grow, yrow), r) in gx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(rstd)
                {
                    let mg = grow.iter().sum::<f64>() / n;
                    let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = r * (*gv - mg - y * mgy);
                    }
                }
                acc(*x, gx);
            }
            &Op::SliceCols { x, start } => {
                let xv = val(x);
                let (len, c) = (g.cols(), xv.cols());
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..g.rows() {
                    gx.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                acc(x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(g.rows() * pc);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[start..start + pc]);
                        }
                        acc(p, Tensor::new(val(p).shape(), data)?);
                    }
                    start += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.rg(p) {
                        let data = g.data()[offset..offset + n].to_vec();
                        acc(p, Tensor::new(val(p).shape(), data)?);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (o, &src) in idx.iter().enumerate() {
                    for (a, b) in gx.row_mut(src).iter_mut().zip(g.row(o)) {
                        *a += b;
                    }
                }
                acc(*x, gx);
            }
            Op::Gather { x, idx } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (o, src) in idx.iter().enumerate() {
                    if let Some(s) = src {
                        gx.data_mut()[*s] += g.data()[o];
                    }
                }
                acc(*x, gx);
            }
            &Op::Reshape(x) => acc(x, g.clone().reshape(val(x).shape())?),
            &Op::Sum(x) => acc(x, Tensor::full(val(x).shape(), g.data()[0])),
            &Op::Mean(x) => {
                let n = val(x).len().max(1) as f64;
                acc(x, Tensor::full(val(x).shape(), g.data()[0] / n));
            }
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
