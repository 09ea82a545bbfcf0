//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node; node indices are a topological order, so
//! the backward sweep simply walks the tape from the loss down to index 0.
//! Gradient accumulation order is therefore fixed by creation index.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{gelu_grad_scalar, gelu_scalar, gemm, moments, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Gelu(Var),
    Exp(Var),
    MinConst(Var, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Softmax { x: Var, scale: f64 },
    LogSoftmax(Var),
    Reshape(Var),
    Permute { a: Var, axes: Vec<usize> },
    SelectRows { a: Var, idx: Arc<Vec<usize>> },
    ScatterRows { base: Var, src: Var, idx: Arc<Vec<usize>> },
    Concat(Vec<Var>),
    SumAll(Var),
    SumLast(Var),
    MaxLast { a: Var, argmax: Vec<usize> },
    L2Normalize(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-owner operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    shapes: HashMap<usize, Vec<usize>>,
}

impl Gradients {
    /// Gradient for `leaf`; zero when the leaf does not reach the loss.
    pub fn wrt(&self, leaf: Var) -> Tensor {
        match self.leaves.get(&leaf.0) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes.get(&leaf.0).cloned().unwrap_or_default()),
        }
    }

    pub fn take(&mut self, leaf: Var) -> Tensor {
        match self.leaves.remove(&leaf.0) {
            Some(g) => g,
            None => Tensor::zeros(self.shapes.get(&leaf.0).cloned().unwrap_or_default()),
        }
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant_shared(value)
    }

    // ---- linear algebra ------------------------------------------------

    /// `op(a) · op(b)` for matrices, or batched over a leading axis for rank-3 inputs.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, ra, ca, rb, cb) = match (sa.as_slice(), sb.as_slice()) {
            (&[r1, c1], &[r2, c2]) => (1, r1, c1, r2, c2),
            (&[g1, r1, c1], &[g2, r2, c2]) if g1 == g2 => (g1, r1, c1, r2, c2),
            _ => return Err(shape_err(format!("matmul operands {sa:?} and {sb:?}"))),
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(shape_err(format!(
                "matmul inner extents differ: {sa:?}{} x {sb:?}{}",
                if ta { "^T" } else { "" },
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for g in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..(g + 1) * m * k],
                    ta,
                    &bv[g * k * n..(g + 1) * k * n],
                    tb,
                    &mut out[g * m * n..(g + 1) * m * n],
                    0.0,
                );
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · wᵀ` with `w` laid out `[d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_t(x, w, false, true)
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds a `[d]` vector to every row of `a` (last axis `d`).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.shape(bias) != [d] {
            return Err(shape_err(format!("bias {:?} vs rows of {d}", self.shape(bias))));
        }
        let mut v = (*self.nodes[a.0].value).clone();
        let b = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_exact_mut(d) {
            row.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(v, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Multiplies every entry by a one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err(format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(v, Op::MulScalar(a, s), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_scalar);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    /// `min(a, c)`; gradient is cut where the clamp is active.
    pub fn min_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x.min(c));
        let rg = self.rg(a);
        self.push(v, Op::MinConst(a, c), rg)
    }

    // ---- normalization and softmax -------------------------------------

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let v = super::tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta }, rg))
    }

    /// Softmax of `scale * x` over the last axis.
    pub fn softmax(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.softmax_masked(x, scale, None)
    }

    /// As [`Graph::softmax`]; entries whose mask is `false` receive probability 0.
    /// The mask has one flag per element of `x`.
    pub fn softmax_masked(&mut self, x: Var, scale: f64, mask: Option<&[bool]>) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::Domain(format!("softmax scale must be > 0, got {scale}")));
        }
        let mut v = (*self.nodes[x.0].value).clone();
        if let Some(m) = mask {
            if m.len() != v.len() {
                return Err(shape_err("softmax mask length"));
            }
        }
        let d = v.last_dim();
        for (r, row) in v.data_mut().chunks_exact_mut(d).enumerate() {
            softmax_in_place(row, scale, mask.map(|m| &m[r * d..(r + 1) * d]));
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax { x, scale }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut v = (*self.nodes[x.0].value).clone();
        let d = v.last_dim();
        for row in v.data_mut().chunks_exact_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|z| *z -= lse);
        }
        let rg = self.rg(x);
        self.push(v, Op::LogSoftmax(x), rg)
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let mut v = (*self.nodes[x.0].value).clone();
        let d = v.last_dim();
        for row in v.data_mut().chunks_exact_mut(d) {
            let n = row.iter().map(|z| z * z).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::NonFinite(format!("l2_normalize of a row with norm {n}")));
            }
            row.iter_mut().for_each(|z| *z /= n);
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::L2Normalize(x), rg))
    }

    // ---- layout ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Reorders axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = permute_tensor(self.value(a), axes)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Permute { a, axes: axes.to_vec() }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(shape_err("transpose expects a matrix"));
        }
        self.permute(a, &[1, 0])
    }

    /// Rows `idx` of `a` viewed as `[len / last_dim, last_dim]`.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let d = src.last_dim();
        let rows = src.len() / d;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(shape_err(format!("row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&src.data()[i * d..(i + 1) * d]);
        }
        let v = Tensor::new([idx.len(), d], out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::SelectRows { a, idx: Arc::new(idx.to_vec()) }, rg))
    }

    /// Copy of `base` with rows `idx` overwritten by the rows of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let d = self.value(base).last_dim();
        let rows = self.value(base).len() / d;
        if self.value(src).last_dim() != d || self.value(src).len() != idx.len() * d {
            return Err(shape_err("scatter_rows source shape"));
        }
        let mut v = (*self.nodes[base.0].value).clone();
        let s = self.value(src).data();
        for (k, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(shape_err(format!("row {i} out of range for {rows} rows")));
            }
            v.data_mut()[i * d..(i + 1) * d].copy_from_slice(&s[k * d..(k + 1) * d]);
        }
        let rg = self.rg(base) || self.rg(src);
        Ok(self.push(v, Op::ScatterRows { base, src, idx: Arc::new(idx.to_vec()) }, rg))
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err(format!("concat part {s:?} vs tail {tail:?}")));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        let data = t.rows().map(|r| r.iter().sum()).collect();
        let v = Tensor::new(shape, data).expect("sum_last shape");
        let rg = self.rg(a);
        self.push(v, Op::SumLast(a), rg)
    }

    pub fn mean_last(&mut self, a: Var) -> Var {
        let d = self.value(a).last_dim() as f64;
        let s = self.sum_last(a);
        self.scale(s, 1.0 / d)
    }

    /// Maximum over the last axis; ties resolve to the lowest index.
    pub fn max_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        let mut data = Vec::new();
        let mut argmax = Vec::new();
        for r in t.rows() {
            let mut best = 0;
            for (j, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = j;
                }
            }
            data.push(r[best]);
            argmax.push(best);
        }
        let v = Tensor::new(shape, data).expect("max_last shape");
        let rg = self.rg(a);
        self.push(v, Op::MaxLast { a, argmax }, rg)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite(format!("loss value {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        let mut out = Gradients::default();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.requires_grad && matches!(n.op, Op::Leaf) {
                out.shapes.insert(i, n.value.shape().to_vec());
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, delta: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing
                        .data_mut()
                        .iter_mut()
                        .zip(delta.data())
                        .for_each(|(x, y)| *x += y),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let batch = if av.rank() == 3 { av.shape()[0] } else { 1 };
                    let (ra, ca) = (av.shape()[av.rank() - 2], av.shape()[av.rank() - 1]);
                    let (rb, cb) = (bv.shape()[bv.rank() - 2], bv.shape()[bv.rank() - 1]);
                    let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                    let n = if *tb { rb } else { cb };
                    let gd = g.data();
                    if self.rg(*a) {
                        let mut da = vec![0.0; av.len()];
                        for bi in 0..batch {
                            let gs = &gd[bi * m * n..(bi + 1) * m * n];
                            let bs = &bv.data()[bi * k * n..(bi + 1) * k * n];
                            let ds = &mut da[bi * m * k..(bi + 1) * m * k];
                            if *ta {
                                gemm(k, n, m, bs, *tb, gs, true, ds, 0.0);
                            } else {
                                gemm(m, n, k, gs, false, bs, !*tb, ds, 0.0);
                            }
                        }
                        acc(*a, Tensor::new(av.shape().to_vec(), da)?);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; bv.len()];
                        for bi in 0..batch {
                            let gs = &gd[bi * m * n..(bi + 1) * m * n];
                            let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                            let ds = &mut db[bi * k * n..(bi + 1) * k * n];
                            if *tb {
                                gemm(n, m, k, gs, true, as_, *ta, ds, 0.0);
                            } else {
                                gemm(k, m, n, as_, !*ta, gs, false, ds, 0.0);
                            }
                        }
                        acc(*b, Tensor::new(bv.shape().to_vec(), db)?);
                    }
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.zip_map(self.value(*b), |x, y| x * y)?);
                    }
                    if self.rg(*b) {
                        acc(*b, g.zip_map(self.value(*a), |x, y| x * y)?);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*bias) {
                        let d = g.last_dim();
                        let mut db = vec![0.0; d];
                        for row in g.rows() {
                            db.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                        }
                        acc(*bias, Tensor::new([d], db)?);
                    }
                    acc(*a, g);
                }
                Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
                Op::MulScalar(a, s) => {
                    if self.rg(*s) {
                        let ds: f64 =
                            g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                        acc(*s, Tensor::new(self.shape(*s).to_vec(), vec![ds])?);
                    }
                    let c = self.value(*s).item();
                    acc(*a, g.map(|x| x * c));
                }
                Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |x, z| x * gelu_grad_scalar(z))?),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)?),
                Op::MinConst(a, c) => {
                    acc(*a, g.zip_map(self.value(*a), |x, z| if z <= *c { x } else { 0.0 })?)
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = self.value(*x);
                    let gam = self.value(*gamma).data();
                    let d = xv.last_dim();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dg = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for (r, (xr, gr)) in xv.rows().zip(g.rows()).enumerate() {
                        let (mean, rstd) = moments(xr);
                        for j in 0..d {
                            xhat[j] = (xr[j] - mean) * rstd;
                            dxhat[j] = gr[j] * gam[j];
                            dg[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    acc(*gamma, Tensor::new([d], dg)?);
                    acc(*beta, Tensor::new([d], dbeta)?);
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::Softmax { x, scale } => {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut dx = vec![0.0; y.len()];
                    for (r, (yr, gr)) in y.rows().zip(g.rows()).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = scale * yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut dx = vec![0.0; y.len()];
                    for (r, (yr, gr)) in y.rows().zip(g.rows()).enumerate() {
                        let s: f64 = gr.iter().sum();
                        for j in 0..d {
                            dx[r * d + j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::L2Normalize(x) => {
                    let y = &node.value;
                    let xv = self.value(*x);
                    let d = y.last_dim();
                    let mut dx = vec![0.0; y.len()];
                    for (r, ((yr, gr), xr)) in y.rows().zip(g.rows()).zip(xv.rows()).enumerate() {
                        let n = xr.iter().map(|z| z * z).sum::<f64>().sqrt();
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::Reshape(a) => {
                    let s = self.shape(*a).to_vec();
                    acc(*a, Tensor::new(s, g.into_data())?);
                }
                Op::Permute { a, axes } => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    acc(*a, permute_tensor(&g, &inv)?);
                }
                Op::SelectRows { a, idx } => {
                    let av = self.value(*a);
                    let d = av.last_dim();
                    let mut da = vec![0.0; av.len()];
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..d {
                            da[r * d + j] += g.data()[k * d + j];
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?);
                }
                Op::ScatterRows { base, src, idx } => {
                    let d = g.last_dim();
                    if self.rg(*src) {
                        let mut ds = Vec::with_capacity(idx.len() * d);
                        for &r in idx.iter() {
                            ds.extend_from_slice(&g.data()[r * d..(r + 1) * d]);
                        }
                        acc(*src, Tensor::new(self.shape(*src).to_vec(), ds)?);
                    }
                    if self.rg(*base) {
                        let mut db = g;
                        for &r in idx.iter() {
                            db.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|x| *x = 0.0);
                        }
                        acc(*base, db);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.rg(p) {
                            let piece = g.data()[off..off + n].to_vec();
                            acc(p, Tensor::new(self.shape(p).to_vec(), piece)?);
                        }
                        off += n;
                    }
                }
                Op::SumAll(a) => {
                    let s = self.shape(*a).to_vec();
                    acc(*a, Tensor::full(s, g.item()));
                }
                Op::SumLast(a) => {
                    let av = self.value(*a);
                    let d = av.last_dim();
                    let mut da = vec![0.0; av.len()];
                    for (r, &gv) in g.data().iter().enumerate() {
                        da[r * d..(r + 1) * d].iter_mut().for_each(|x| *x = gv);
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?);
                }
                Op::MaxLast { a, argmax } => {
                    let av = self.value(*a);
                    let d = av.last_dim();
                    let mut da = vec![0.0; av.len()];
                    for (r, (&gv, &j)) in g.data().iter().zip(argmax).enumerate() {
                        da[r * d + j] = gv;
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?);
                }
            }
        }
        Ok(out)
    }
}

/// Axis permutation of a dense tensor; output axis `i` is input axis `axes[i]`.
pub fn permute_tensor(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(shape_err(format!("invalid permutation {axes:?} for rank {rank}")));
    }
    let in_shape = t.shape();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let src = t.data();
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}
