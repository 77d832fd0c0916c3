//! Reverse-mode differentiation over an append-only tape.
//!
//! Every primitive validates its operand shapes and appends one node. Nodes
//! only reference earlier nodes, so the tape is topologically ordered by
//! construction and a single reverse sweep visits each node once.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Score written into disallowed attention slots before the softmax.
pub const MASK_FILL: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Transpose(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Gather { table: usize, ids: Vec<usize> },
    Softmax(usize),
    Log { input: usize, floor: T },
    Mean { input: usize, axis: usize },
    Sum(usize),
    LayerNorm { input: usize, gamma: usize, beta: usize, normed: Vec<T>, rstd: Vec<T> },
    MaskedFill { input: usize, allowed: Arc<[bool]> },
    Gelu(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Record of executed primitives; confined to one thread of control.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn two_d(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::InvalidShape(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Detached(format!("variable {v:?} does not belong to tape {}", self.id)));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Shorthand for a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("variable from another tape")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.idx(v).ok().and_then(|i| self.nodes[i].grad.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.rg(i)).unwrap_or(false)
    }

    /// Matrix product of `[m x k]` and `[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = two_d(self.nodes[ia].value.shape(), "matmul")?;
        let (k2, n) = two_d(self.nodes[ib].value.shape(), "matmul")?;
        if k != k2 {
            return Err(Error::InvalidShape(format!("matmul [{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.nodes[ia].value.data(),
            false,
            self.nodes[ib].value.data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(ia, ib), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape(va.shape(), vb.shape(), name)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::from_parts(va.shape().to_vec(), data)))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Add(ia, ib), rg))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Mul(ia, ib), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.nodes[ia].value.scale(s);
        let rg = self.rg(ia);
        Ok(self.push(t, Op::Scale(ia, s), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        two_d(self.nodes[ia].value.shape(), "transpose")?;
        let t = self.nodes[ia].value.transpose()?;
        let rg = self.rg(ia);
        Ok(self.push(t, Op::Transpose(ia), rg))
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::InvalidArgument(format!("concat axis {axis} on matrices")));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let dims: Vec<(usize, usize)> = idx
            .iter()
            .map(|&i| two_d(self.nodes[i].value.shape(), "concat"))
            .collect::<Result<_>>()?;
        let other = if axis == 0 { dims[0].1 } else { dims[0].0 };
        if dims.iter().any(|d| if axis == 0 { d.1 != other } else { d.0 != other }) {
            return Err(Error::InvalidShape(format!("concat axis {axis}: {dims:?}")));
        }
        let (rows, cols, data) = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * other);
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.data());
            }
            (rows, other, data)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(other * cols);
            for r in 0..other {
                for (&i, d) in idx.iter().zip(&dims) {
                    data.extend_from_slice(&self.nodes[i].value.data()[r * d.1..(r + 1) * d.1]);
                }
            }
            (other, cols, data)
        };
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::Concat { inputs: idx, axis }, rg))
    }

    /// Contiguous range `start..start + len` of a matrix along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = two_d(self.nodes[ia].value.shape(), "slice")?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(Error::InvalidArgument(format!("slice axis {axis} on matrices"))),
        };
        if len == 0 || start + len > extent {
            return Err(Error::InvalidShape(format!(
                "slice {start}..{} of axis {axis} with extent {extent}",
                start + len
            )));
        }
        let src = self.nodes[ia].value.data();
        let (shape, data) = if axis == 0 {
            (vec![len, c], src[start * c..(start + len) * c].to_vec())
        } else {
            let mut d = Vec::with_capacity(r * len);
            for row in 0..r {
                d.extend_from_slice(&src[row * c + start..row * c + start + len]);
            }
            (vec![r, len], d)
        };
        let rg = self.rg(ia);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { input: ia, axis, start }, rg))
    }

    /// Rows of `table` selected by `ids`; repeated ids accumulate gradient.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let (v, d) = two_d(self.nodes[it].value.shape(), "gather")?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidToken { id: bad, vocab_size: v });
        }
        let src = self.nodes[it].value.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(it);
        Ok(self.push(Tensor::from_parts(vec![ids.len(), d], data), Op::Gather { table: it, ids: ids.to_vec() }, rg))
    }

    /// Max-subtracted softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = crate::tensor::softmax(&self.nodes[ia].value)?;
        let rg = self.rg(ia);
        Ok(self.push(t, Op::Softmax(ia), rg))
    }

    /// Natural log of `max(x, floor)`; the gradient is zero below the floor.
    pub fn ln(&mut self, a: Var, floor: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.nodes[ia].value.map(|x| x.max(floor).ln());
        if !t.is_finite() {
            return Err(Error::InvalidArgument("logarithm of a non-positive value".into()));
        }
        let rg = self.rg(ia);
        Ok(self.push(t, Op::Log { input: ia, floor }, rg))
    }

    /// Mean over `axis` of a matrix, keeping the reduced axis with extent 1.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.nodes[ia].value.dims2()?;
        let src = self.nodes[ia].value.data();
        let (shape, data) = match axis {
            0 => {
                let mut acc = vec![T::zero(); c];
                for row in src.chunks(c) {
                    for (a, &x) in acc.iter_mut().zip(row) {
                        *a = *a + x;
                    }
                }
                let n = T::from_f64(r as f64);
                (vec![1, c], acc.into_iter().map(|v| v / n).collect())
            }
            1 => {
                let n = T::from_f64(c as f64);
                (vec![r, 1], src.chunks(c).map(|row| row.iter().copied().sum::<T>() / n).collect())
            }
            _ => return Err(Error::InvalidArgument(format!("mean axis {axis} on matrices"))),
        };
        let rg = self.rg(ia);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mean { input: ia, axis }, rg))
    }

    /// Sum of all elements as a scalar `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s: T = self.nodes[ia].value.data().iter().copied().sum();
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), rg))
    }

    /// Row-wise layer normalization with learned gain and bias of length `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (r, d) = self.nodes[ix].value.dims2()?;
        for &i in &[ig, ib] {
            if self.nodes[i].value.numel() != d {
                return Err(Error::InvalidShape(format!(
                    "layer_norm parameter {:?} for width {d}",
                    self.nodes[i].value.shape()
                )));
            }
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let n = T::from_f64(d as f64);
        let src = self.nodes[ix].value.data();
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let mut normed = Vec::with_capacity(r * d);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * d);
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                normed.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        let shape = self.nodes[ix].value.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { input: ix, gamma: ig, beta: ib, normed, rstd },
            rg,
        ))
    }

    /// Replaces entries whose `allowed` flag is false with [`MASK_FILL`].
    pub fn masked_fill(&mut self, a: Var, allowed: Arc<[bool]>) -> Result<Var> {
        let ia = self.idx(a)?;
        if allowed.len() != self.nodes[ia].value.numel() {
            return Err(Error::InvalidShape(format!(
                "mask of {} entries for tensor {:?}",
                allowed.len(),
                self.nodes[ia].value.shape()
            )));
        }
        let fill = T::from_f64(MASK_FILL);
        let data = self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(allowed.iter())
            .map(|(&v, &ok)| if ok { v } else { fill })
            .collect();
        let shape = self.nodes[ia].value.shape().to_vec();
        let rg = self.rg(ia);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MaskedFill { input: ia, allowed }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.nodes[ia].value.map(gelu);
        let rg = self.rg(ia);
        Ok(self.push(t, Op::Gelu(ia), rg))
    }

    /// Propagates `d root / d node` to every node that requires a gradient.
    ///
    /// Gradients from a previous call are discarded first, so a tape can be
    /// differentiated again after more nodes are appended.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ir = self.idx(root)?;
        if self.nodes[ir].value.numel() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward from non-scalar {:?}",
                self.nodes[ir].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=ir).map(|_| None).collect();
        grads[ir] = Some(vec![T::one()]);
        for i in (0..=ir).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::from_parts(shape, g));
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[j].requires_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![T::zero(); self.nodes[j].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2().unwrap();
                let n = out.last_dim();
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                // dA = dC * B^T ; dB = A^T * dC
                acc(*a, &mut |buf| T::gemm(m, n, k, g, false, vb, true, buf, true));
                acc(*b, &mut |buf| T::gemm(k, m, n, va, true, g, false, buf, true));
            }
            Op::Add(a, b) => {
                for &j in &[*a, *b] {
                    acc(j, &mut |buf| add_into(buf, g));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(*a, &mut |buf| {
                    for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(vb) {
                        *o = *o + gv * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(va) {
                        *o = *o + gv * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |buf| {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o = *o + gv * *s;
                }
            }),
            Op::Transpose(a) => {
                let (r, c) = self.nodes[*a].value.dims2().unwrap();
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] = buf[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let total_cols = out.last_dim();
                let mut offset = 0;
                for &j in inputs {
                    let (r, c) = self.nodes[j].value.dims2().unwrap();
                    let off = offset;
                    if *axis == 0 {
                        acc(j, &mut |buf| add_into(buf, &g[off * c..(off + r) * c]));
                        offset += r;
                    } else {
                        acc(j, &mut |buf| {
                            for row in 0..r {
                                let src = &g[row * total_cols + off..row * total_cols + off + c];
                                add_into(&mut buf[row * c..(row + 1) * c], src);
                            }
                        });
                        offset += c;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let (_, c) = self.nodes[*input].value.dims2().unwrap();
                let (or, oc) = out.dims2().unwrap();
                acc(*input, &mut |buf| {
                    if *axis == 0 {
                        add_into(&mut buf[start * c..(start + or) * c], g);
                    } else {
                        for row in 0..or {
                            add_into(&mut buf[row * c + start..row * c + start + oc], &g[row * oc..(row + 1) * oc]);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = out.last_dim();
                acc(*table, &mut |buf| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::Softmax(a) => {
                let v = out.last_dim();
                acc(*a, &mut |buf| {
                    for ((o, y), gy) in buf.chunks_mut(v).zip(out.data().chunks(v)).zip(g.chunks(v)) {
                        let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        for j in 0..v {
                            o[j] = o[j] + y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::Log { input, floor } => {
                let x = self.nodes[*input].value.data();
                acc(*input, &mut |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > *floor {
                            *o = *o + gv / xv;
                        }
                    }
                });
            }
            Op::Mean { input, axis } => {
                let (r, c) = self.nodes[*input].value.dims2().unwrap();
                acc(*input, &mut |buf| {
                    if *axis == 0 {
                        let n = T::from_f64(r as f64);
                        for row in buf.chunks_mut(c) {
                            for (o, &gv) in row.iter_mut().zip(g) {
                                *o = *o + gv / n;
                            }
                        }
                    } else {
                        let n = T::from_f64(c as f64);
                        for (row, &gv) in buf.chunks_mut(c).zip(g) {
                            for o in row {
                                *o = *o + gv / n;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |buf| {
                for o in buf {
                    *o = *o + g[0];
                }
            }),
            Op::LayerNorm { input, gamma, beta, normed, rstd } => {
                let d = out.last_dim();
                let gam = self.nodes[*gamma].value.data();
                let n = T::from_f64(d as f64);
                acc(*beta, &mut |buf| {
                    for gr in g.chunks(d) {
                        add_into(buf, gr);
                    }
                });
                acc(*gamma, &mut |buf| {
                    for (gr, xr) in g.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            buf[j] = buf[j] + gr[j] * xr[j];
                        }
                    }
                });
                acc(*input, &mut |buf| {
                    for (((o, gr), xr), &rs) in buf.chunks_mut(d).zip(g.chunks(d)).zip(normed.chunks(d)).zip(rstd) {
                        // dx = rstd * (dxh - mean(dxh) - xh * mean(dxh * xh))
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xr[j];
                        }
                        let (m1, m2) = (s1 / n, s2 / n);
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            o[j] = o[j] + rs * (dxh - m1 - xr[j] * m2);
                        }
                    }
                });
            }
            Op::MaskedFill { input, allowed } => acc(*input, &mut |buf| {
                for ((o, &gv), &ok) in buf.iter_mut().zip(g).zip(allowed.iter()) {
                    if ok {
                        *o = *o + gv;
                    }
                }
            }),
            Op::Gelu(a) => {
                let x = self.nodes[*a].value.data();
                acc(*a, &mut |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        *o = *o + gv * gelu_grad(xv);
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::from_f64((2.0 / std::f64::consts::PI).sqrt()), T::from_f64(0.044715))
}

fn gelu<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
