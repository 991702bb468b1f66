//! Built-in differentiable operations.
//!
//! Layout conventions: matrices are row-major; spatial maps are
//! `[batch, height, width, channels]` so that a map flattened to rows is a
//! token matrix.

use std::sync::Arc;

use crate::kernels::{count_attention, gemm, MatRef};
use crate::{Error, Graph, Result, Tensor, Var};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>().checked_div(last).unwrap_or(0);
    (rows, last)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape(), data);
        Ok(self.push_op(
            "add",
            out,
            &[a, b],
            Box::new(move |_, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = grads.acc(b) {
                    add_into(gb, g);
                }
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(ta.shape(), data);
        Ok(self.push_op(
            "sub",
            out,
            &[a, b],
            Box::new(move |_, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = grads.acc(b) {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape(), data);
        Ok(self.push_op(
            "mul",
            out,
            &[a, b],
            Box::new(move |vals, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(vals.get(b).data()) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = grads.acc(b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(vals.get(a).data()) {
                        *d += s * x;
                    }
                }
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_parts(ta.shape(), ta.data().iter().map(|x| x * s).collect());
        self.push_op(
            "scale",
            out,
            &[a],
            Box::new(move |_, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    for (d, v) in ga.iter_mut().zip(g) {
                        *d += s * v;
                    }
                }
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_parts(ta.shape(), ta.data().iter().map(|x| x + s).collect());
        self.push_op(
            "add_scalar",
            out,
            &[a],
            Box::new(move |_, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    add_into(ga, g);
                }
            }),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_parts(ta.shape(), ta.data().iter().map(|x| x.sqrt()).collect());
        self.push_op(
            "sqrt",
            out,
            &[a],
            Box::new(move |_, out, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    for ((d, v), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += v * 0.5 / y;
                    }
                }
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_parts(ta.shape(), ta.data().iter().map(|x| x.max(0.0)).collect());
        self.push_op(
            "relu",
            out,
            &[a],
            Box::new(move |vals, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    for ((d, v), x) in ga.iter_mut().zip(g).zip(vals.get(a).data()) {
                        if *x > 0.0 {
                            *d += v;
                        }
                    }
                }
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_parts(ta.shape(), ta.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect());
        self.push_op(
            "sigmoid",
            out,
            &[a],
            Box::new(move |_, out, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    for ((d, v), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += v * y * (1.0 - y);
                    }
                }
            }),
        )
    }

    /// Adds `bias` (shape `[n]`) to every row of `a` (shape `[.., n]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, n) = split_last(ta.shape());
        if tb.numel() != n {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            add_into(row, tb.data());
        }
        let out = Tensor::from_parts(ta.shape(), data);
        Ok(self.push_op(
            "add_bias",
            out,
            &[a, bias],
            Box::new(move |_, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = grads.acc(bias) {
                    for row in g.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                }
            }),
        ))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(
            "sum",
            Tensor::scalar(s),
            &[a],
            Box::new(move |_, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of a list of same-shape tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Contract("add_n of an empty list".into()))?;
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).numel()];
        for &x in xs {
            same_shape("add_n", self.value(first), self.value(x))?;
            add_into(&mut data, self.value(x).data());
        }
        let parents = xs.to_vec();
        Ok(self.push_op(
            "add_n",
            Tensor::from_parts(shape, data),
            xs,
            Box::new(move |_, _, g, grads| {
                for &p in &parents {
                    if let Some(gp) = grads.acc(p) {
                        add_into(gp, g);
                    }
                }
            }),
        ))
    }

    /// Mean along `axis`, removing that axis.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        let inv = 1.0 / n.max(1) as f64;
        for o in 0..outer {
            for j in 0..n {
                let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push_op(
            "mean_axis",
            Tensor::from_parts(out_shape, out),
            &[a],
            Box::new(move |_, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += v * inv;
                            }
                        }
                    }
                }
            }),
        ))
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(
            "reshape",
            out,
            &[a],
            Box::new(move |_, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    add_into(ga, g);
                }
            }),
        ))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        // source offset of every output element
        let numel: usize = shape.iter().product();
        let mut src = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        for _ in 0..numel {
            src.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let x = self.value(a).data();
        let data = src.iter().map(|&s| x[s]).collect();
        Ok(self.push_op(
            "permute",
            Tensor::from_parts(out_shape, data),
            &[a],
            Box::new(move |_, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    for (v, &s) in g.iter().zip(&src) {
                        ga[s] += v;
                    }
                }
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::Contract("transpose expects a matrix".into()));
        }
        self.permute(a, &[1, 0])
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().unwrap_or(&0);
        if start + len > rows {
            return Err(Error::Contract(format!("slice {start}..{} out of {rows} rows", start + len)));
        }
        let width: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * width..(start + len) * width].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        Ok(self.push_op(
            "slice_rows",
            Tensor::from_parts(out_shape, data),
            &[a],
            Box::new(move |_, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    add_into(&mut ga[start * width..(start + len) * width], g);
                }
            }),
        ))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.shape()[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            spans.push((x, data.len(), t.numel()));
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push_op(
            "concat_rows",
            Tensor::from_parts(shape, data),
            xs,
            Box::new(move |_, _, g, grads| {
                for &(x, off, n) in &spans {
                    if let Some(gx) = grads.acc(x) {
                        add_into(gx, &g[off..off + n]);
                    }
                }
            }),
        ))
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat_last",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let parts: Vec<(Var, usize)> = xs.iter().copied().zip(widths).collect();
        Ok(self.push_op(
            "concat_last",
            Tensor::from_parts(shape, data),
            xs,
            Box::new(move |_, _, g, grads| {
                let mut off = 0;
                for &(x, w) in &parts {
                    if let Some(gx) = grads.acc(x) {
                        for r in 0..rows {
                            add_into(&mut gx[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }),
        ))
    }

    /// Row gather along the first axis: output row `r` is input row
    /// `index[r]`, or zeros for `None`. Rows may repeat; the backward pass
    /// scatter-adds.
    pub fn index_rows(&mut self, a: Var, index: Arc<[Option<usize>]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().unwrap_or(&0);
        let width: usize = shape[1..].iter().product();
        if let Some(bad) = index.iter().flatten().find(|&&r| r >= rows) {
            return Err(Error::Contract(format!("row index {bad} out of {rows}")));
        }
        let x = self.value(a).data();
        let mut data = vec![0.0; index.len() * width];
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = src {
                data[r * width..(r + 1) * width].copy_from_slice(&x[s * width..(s + 1) * width]);
            }
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        Ok(self.push_op(
            "index_rows",
            Tensor::from_parts(out_shape, data),
            &[a],
            Box::new(move |_, _, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    for (r, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            add_into(&mut ga[s * width..(s + 1) * width], &g[r * width..(r + 1) * width]);
                        }
                    }
                }
            }),
        ))
    }

    // ---- linear algebra --------------------------------------------------

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(1.0, MatRef::new(ta.data(), m, k), MatRef::new(tb.data(), k, n), 0.0, &mut c);
        Ok(self.push_op(
            "matmul",
            Tensor::from_parts([m, n], c),
            &[a, b],
            Box::new(move |vals, _, g, grads| {
                let gm = MatRef::new(g, m, n);
                if let Some(ga) = grads.acc(a) {
                    gemm(1.0, gm, MatRef::new(vals.get(b).data(), k, n).t(), 1.0, ga);
                }
                if let Some(gb) = grads.acc(b) {
                    gemm(1.0, MatRef::new(vals.get(a).data(), m, k).t(), gm, 1.0, gb);
                }
            }),
        ))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut c = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), n, k).t(),
            0.0,
            &mut c,
        );
        Ok(self.push_op(
            "matmul_nt",
            Tensor::from_parts([m, n], c),
            &[a, b],
            Box::new(move |vals, _, g, grads| {
                let gm = MatRef::new(g, m, n);
                if let Some(ga) = grads.acc(a) {
                    gemm(1.0, gm, MatRef::new(vals.get(b).data(), n, k), 1.0, ga);
                }
                if let Some(gb) = grads.acc(b) {
                    gemm(1.0, gm.t(), MatRef::new(vals.get(a).data(), m, k), 1.0, gb);
                }
            }),
        ))
    }

    /// Affine map over the last axis: `x · w + bias` with `w: [in×out]`.
    /// Leading axes of `x` are preserved.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (rows, fan_in) = split_last(tx.shape());
        if tw.rank() != 2 || tw.shape()[0] != fan_in {
            return Err(Error::Shape {
                op: "linear",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let fan_out = tw.shape()[1];
        if let Some(b) = bias {
            if self.value(b).numel() != fan_out {
                return Err(Error::Shape {
                    op: "linear",
                    lhs: tw.shape().to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let mut y = vec![0.0; rows * fan_out];
        if let Some(b) = bias {
            let tb = self.value(b).data();
            for row in y.chunks_mut(fan_out.max(1)) {
                row.copy_from_slice(tb);
            }
        }
        gemm(
            1.0,
            MatRef::new(tx.data(), rows, fan_in),
            MatRef::new(tw.data(), fan_in, fan_out),
            1.0,
            &mut y,
        );
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(bias).collect();
        Ok(self.push_op(
            "linear",
            Tensor::from_parts(shape, y),
            &parents,
            Box::new(move |vals, _, g, grads| {
                let gm = MatRef::new(g, rows, fan_out);
                if let Some(gx) = grads.acc(x) {
                    gemm(1.0, gm, MatRef::new(vals.get(w).data(), fan_in, fan_out).t(), 1.0, gx);
                }
                if let Some(gw) = grads.acc(w) {
                    gemm(1.0, MatRef::new(vals.get(x).data(), rows, fan_in).t(), gm, 1.0, gw);
                }
                if let Some(b) = bias {
                    if let Some(gb) = grads.acc(b) {
                        for row in g.chunks(fan_out.max(1)) {
                            add_into(gb, row);
                        }
                    }
                }
            }),
        ))
    }

    // ---- normalisation and losses ------------------------------------

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).fold(f64::NEG_INFINITY, |m, j| m.max(x[at(j)]));
                let mut z = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    y[at(j)] /= z;
                }
            }
        }
        Ok(self.push_op(
            "softmax",
            Tensor::from_parts(shape, y),
            &[a],
            Box::new(move |_, out, g, grads| {
                if let Some(ga) = grads.acc(a) {
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Weighted softmax cross-entropy summed over rows:
    /// `Σ_i weight_i · (logsumexp(logits_i) − logits_i[target_i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() || targets.len() != weights.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let (rows, k) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::Contract(format!("class {bad} out of {k}")));
        }
        let x = t.data();
        let mut probs = vec![0.0; rows * k];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        Ok(self.push_op(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |_, _, g, grads| {
                if let Some(gl) = grads.acc(logits) {
                    for r in 0..rows {
                        let w = g[0] * weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            gl[r * k + j] += w * probs[r * k + j];
                        }
                        gl[r * k + targets[r]] -= w;
                    }
                }
            }),
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = split_last(tx.shape());
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let xs = tx.data();
        let mut y = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..c {
                y[r * c + j] = (row[j] - mean) * s * gm[j] + bt[j];
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push_op(
            "layer_norm",
            Tensor::from_parts(shape, y),
            &[x, gamma, beta],
            Box::new(move |vals, _, g, grads| {
                let xs = vals.get(x).data();
                let gm = vals.get(gamma).data();
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let want_x = grads.wants(x);
                let mut gx_rows = if want_x { vec![0.0; rows * c] } else { Vec::new() };
                for r in 0..rows {
                    let row = &xs[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd[r];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gm[j];
                    }
                    if want_x {
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx_rows[r * c + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(gx) = grads.acc(x) {
                    add_into(gx, &gx_rows);
                }
                if let Some(gg) = grads.acc(gamma) {
                    add_into(gg, &dgamma);
                }
                if let Some(gb) = grads.acc(beta) {
                    add_into(gb, &dbeta);
                }
            }),
        ))
    }

    // ---- spatial -------------------------------------------------------

    /// 2-D convolution on `[B, H, W, Cin]` maps with weights
    /// `[k, k, Cin, Cout]` and bias `[Cout]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 || tw.shape()[0] != tw.shape()[1] || tw.shape()[2] != tx.shape()[3] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let geo = ConvGeometry::new(tx.shape(), tw.shape(), stride, pad)?;
        if self.value(bias).numel() != geo.cout {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: tw.shape().to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let rows = geo.batch * geo.ho * geo.wo;
        let mut y = vec![0.0; rows * geo.cout];
        for row in y.chunks_mut(geo.cout.max(1)) {
            row.copy_from_slice(self.value(bias).data());
        }
        let cols_owned;
        let cols: &[f64] = if geo.is_pointwise() {
            tx.data()
        } else {
            cols_owned = geo.im2col(tx.data());
            &cols_owned
        };
        gemm(
            1.0,
            MatRef::new(cols, rows, geo.patch()),
            MatRef::new(tw.data(), geo.patch(), geo.cout),
            1.0,
            &mut y,
        );
        let shape = [geo.batch, geo.ho, geo.wo, geo.cout];
        Ok(self.push_op(
            "conv2d",
            Tensor::from_parts(shape, y),
            &[x, w, bias],
            Box::new(move |vals, _, g, grads| {
                let gm = MatRef::new(g, rows, geo.cout);
                if let Some(gw) = grads.acc(w) {
                    let xs = vals.get(x).data();
                    let cols_owned;
                    let cols: &[f64] = if geo.is_pointwise() {
                        xs
                    } else {
                        cols_owned = geo.im2col(xs);
                        &cols_owned
                    };
                    gemm(1.0, MatRef::new(cols, rows, geo.patch()).t(), gm, 1.0, gw);
                }
                if let Some(gb) = grads.acc(bias) {
                    for row in g.chunks(geo.cout.max(1)) {
                        add_into(gb, row);
                    }
                }
                if grads.wants(x) {
                    let wt = MatRef::new(vals.get(w).data(), geo.patch(), geo.cout).t();
                    if geo.is_pointwise() {
                        let gx = grads.acc(x).unwrap();
                        gemm(1.0, gm, wt, 1.0, gx);
                    } else {
                        let mut dcols = vec![0.0; rows * geo.patch()];
                        gemm(1.0, gm, wt, 0.0, &mut dcols);
                        geo.col2im_add(&dcols, grads.acc(x).unwrap());
                    }
                }
            }),
        ))
    }

    /// Nearest-neighbour upsampling of `[B, H, W, C]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::Contract(format!("upsample expects [B,H,W,C], got {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let src_of = move |bi: usize, y: usize, xx: usize| ((bi * h + y / factor) * w + xx / factor) * c;
        let xs = self.value(x).data();
        let mut data = vec![0.0; b * ho * wo * c];
        for bi in 0..b {
            for y in 0..ho {
                for xx in 0..wo {
                    let dst = ((bi * ho + y) * wo + xx) * c;
                    let src = src_of(bi, y, xx);
                    data[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
        Ok(self.push_op(
            "upsample_nearest",
            Tensor::from_parts([b, ho, wo, c], data),
            &[x],
            Box::new(move |_, _, g, grads| {
                if let Some(gx) = grads.acc(x) {
                    for bi in 0..b {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let dst = ((bi * ho + y) * wo + xx) * c;
                                let src = src_of(bi, y, xx);
                                add_into(&mut gx[src..src + c], &g[dst..dst + c]);
                            }
                        }
                    }
                }
            }),
        ))
    }

    // ---- attention -------------------------------------------------------

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q: [G, Lq, C]`, `k`, `v: [G, Lk, C]`; each of the `G` groups (windows
    /// or batch elements) attends independently, with `C` split into `heads`
    /// contiguous slices. `key_valid` (length `G·Lk`) excludes keys from the
    /// softmax; `query_valid` (length `G·Lq`) zeroes whole output rows. A
    /// query with no valid key outputs zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_valid: Option<Arc<[bool]>>,
        query_valid: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::Shape {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let (groups, lq, lk, c) = (sq[0], sq[1], sk[1], sq[2]);
        if heads == 0 || c % heads != 0 {
            return Err(Error::Contract(format!("{c} channels do not split into {heads} heads")));
        }
        if key_valid.as_ref().is_some_and(|m| m.len() != groups * lk)
            || query_valid.as_ref().is_some_and(|m| m.len() != groups * lq)
        {
            return Err(Error::Contract("attention mask length mismatch".into()));
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        count_attention((2 * groups * lq * lk * c) as u64);

        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; groups * lq * c];
        // attention weights, [G, heads, Lq, Lk]
        let mut probs = vec![0.0; groups * heads * lq * lk];
        let kvalid = |gi: usize, j: usize| key_valid.as_ref().is_none_or(|m| m[gi * lk + j]);
        let qvalid = |gi: usize, i: usize| query_valid.as_ref().is_none_or(|m| m[gi * lq + i]);
        for gi in 0..groups {
            for h in 0..heads {
                for i in 0..lq {
                    if !qvalid(gi, i) {
                        continue;
                    }
                    let qrow = &qs[(gi * lq + i) * c + h * d..][..d];
                    let prow = &mut probs[((gi * heads + h) * lq + i) * lk..][..lk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if kvalid(gi, j) {
                            let krow = &ks[(gi * lk + j) * c + h * d..][..d];
                            let s = scale * dot(qrow, krow);
                            prow[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..lk {
                        if kvalid(gi, j) {
                            let e = (prow[j] - max).exp();
                            prow[j] = e;
                            z += e;
                        } else {
                            prow[j] = 0.0;
                        }
                    }
                    let orow = &mut out[(gi * lq + i) * c + h * d..][..d];
                    for j in 0..lk {
                        prow[j] /= z;
                        let p = prow[j];
                        if p != 0.0 {
                            let vrow = &vs[(gi * lk + j) * c + h * d..][..d];
                            axpy(orow, p, vrow);
                        }
                    }
                }
            }
        }
        Ok(self.push_op(
            "attention",
            Tensor::from_parts([groups, lq, c], out),
            &[q, k, v],
            Box::new(move |vals, _, g, grads| {
                let (qs, ks, vs) = (vals.get(q).data(), vals.get(k).data(), vals.get(v).data());
                let mut gq = vec![0.0; qs.len()];
                let mut gk = vec![0.0; ks.len()];
                let mut gv = vec![0.0; vs.len()];
                let mut ds = vec![0.0; lk];
                for gi in 0..groups {
                    for h in 0..heads {
                        for i in 0..lq {
                            let prow = &probs[((gi * heads + h) * lq + i) * lk..][..lk];
                            let grow = &g[(gi * lq + i) * c + h * d..][..d];
                            let mut wsum = 0.0;
                            for j in 0..lk {
                                let p = prow[j];
                                if p == 0.0 {
                                    ds[j] = 0.0;
                                    continue;
                                }
                                let vrow = &vs[(gi * lk + j) * c + h * d..][..d];
                                axpy(&mut gv[(gi * lk + j) * c + h * d..][..d], p, grow);
                                let da = dot(grow, vrow);
                                ds[j] = da;
                                wsum += p * da;
                            }
                            let qrow = &qs[(gi * lq + i) * c + h * d..][..d];
                            for j in 0..lk {
                                let p = prow[j];
                                if p == 0.0 {
                                    continue;
                                }
                                let s = scale * p * (ds[j] - wsum);
                                let krow = &ks[(gi * lk + j) * c + h * d..][..d];
                                axpy(&mut gq[(gi * lq + i) * c + h * d..][..d], s, krow);
                                axpy(&mut gk[(gi * lk + j) * c + h * d..][..d], s, qrow);
                            }
                        }
                    }
                }
                if let Some(a) = grads.acc(q) {
                    add_into(a, &gq);
                }
                if let Some(a) = grads.acc(k) {
                    add_into(a, &gk);
                }
                if let Some(a) = grads.acc(v) {
                    add_into(a, &gv);
                }
            }),
        ))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (d, s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, cout) = (ws[0], ws[3]);
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Contract(format!(
                "conv kernel {k} stride {stride} pad {pad} does not fit {h}x{w}"
            )));
        }
        Ok(Self {
            batch,
            h,
            w,
            cin,
            k,
            cout,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Calls `f(row, column offset, source offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.batch {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(row, (ky * self.k + kx) * self.cin, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let mut cols = vec![0.0; self.batch * self.ho * self.wo * patch];
        let cin = self.cin;
        self.for_each_tap(|row, off, src| {
            cols[row * patch + off..row * patch + off + cin].copy_from_slice(&x[src..src + cin]);
        });
        cols
    }

    fn col2im_add(&self, dcols: &[f64], gx: &mut [f64]) {
        let patch = self.patch();
        let cin = self.cin;
        self.for_each_tap(|row, off, src| {
            add_into(&mut gx[src..src + cin], &dcols[row * patch + off..row * patch + off + cin]);
        });
    }
}
