use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `b` is a row vector repeated over every row of `a`.
    Row,
    /// `b` holds a single element.
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    LogSumExp(Var, Option<usize>),
    L2Normalize(Var),
    Scale(Var, f64),
    Transpose(Var),
    Concat(Var, Var, usize),
    IndexRows(Var, Vec<usize>),
    Diag(Var),
}

/// Minimum row norm accepted by [`Tape::l2_normalize`].
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Append-only record of a computation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep. A tape belongs to one thread.
#[derive(Debug)]
pub struct Tape<T: Scalar = f64> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner, output shape)` for a reduction over `axis`.
fn reduce_geometry(shape: &[usize], axis: Option<usize>) -> Result<(usize, usize, usize, Vec<usize>)> {
    match axis {
        None => Ok((1, shape.iter().product(), 1, vec![])),
        Some(ax) if ax < shape.len() => {
            let outer = shape[..ax].iter().product();
            let inner = shape[ax + 1..].iter().product();
            let mut out = shape.to_vec();
            out.remove(ax);
            Ok((outer, shape[ax], inner, out))
        }
        Some(ax) => Err(Error::config(format!(
            "axis {ax} out of range for shape {shape:?}"
        ))),
    }
}

fn broadcast_kind(a: &[usize], b: &[usize], op: &str) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    let b_numel: usize = b.iter().product();
    if b_numel == 1 {
        return Ok(Bcast::Scalar);
    }
    if let [_, n] = a {
        if b == [*n] || b == [1, *n] {
            return Ok(Bcast::Row);
        }
    }
    Err(Error::config(format!(
        "{op}: cannot broadcast {b:?} onto {a:?}"
    )))
}

#[inline]
fn b_index(kind: Bcast, idx: usize, b_len: usize) -> usize {
    match kind {
        Bcast::Same => idx,
        Bcast::Row => idx % b_len,
        Bcast::Scalar => 0,
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records an input. Only leaves created with `requires_grad` receive
    /// gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        self.requires.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(name, "produced a non-finite value"));
        }
        let requires = parents.iter().any(|p| self.requires[p.0]);
        self.values.push(value);
        self.ops.push(if requires { op } else { Op::Leaf });
        self.requires.push(requires);
        self.grads.push(None);
        Ok(Var(self.values.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(Error::config(format!(
                "matmul: incompatible shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Bcast)> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let kind = broadcast_kind(av.shape(), bv.shape(), name)?;
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[b_index(kind, i, bl)]))
            .collect();
        Ok((Tensor::from_parts(av.shape().to_vec(), data), kind))
    }

    /// Elementwise sum; `b` may be a row vector or a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b, k), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b, k), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b, k), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(|x| x.max(T::zero()));
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(T::exp);
        self.push("exp", t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = &self.values[a.0];
        if let Some(bad) = v.data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::numeric("log", format!("non-positive input {bad}")));
        }
        let t = v.map(T::ln);
        self.push("log", t, Op::Log(a), &[a])
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Tensor<T>> {
        let v = &self.values[a.0];
        let (outer, len, inner, shape) = reduce_geometry(v.shape(), axis)?;
        let x = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x[base + i];
                }
            }
        }
        if mean {
            let inv = T::one() / T::from_f64(len as f64);
            out.iter_mut().for_each(|o| *o = *o * inv);
        }
        Ok(Tensor::from_parts(shape, out))
    }

    /// Sum over `axis`, or over everything when `axis` is `None`. The reduced
    /// axis is dropped from the shape.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.reduce(a, axis, false)?;
        self.push("sum", t, Op::Sum(a, axis), &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.reduce(a, axis, true)?;
        self.push("mean", t, Op::Mean(a, axis), &[a])
    }

    /// Max-shifted `log Σ exp` over `axis`.
    pub fn logsumexp(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let v = &self.values[a.0];
        let (outer, len, inner, shape) = reduce_geometry(v.shape(), axis)?;
        let x = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| x[(o * len + l) * inner + i];
                let max = (0..len).map(at).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|l| (at(l) - max).exp()).sum();
                out[o * inner + i] = max + s.ln();
            }
        }
        self.push("logsumexp", Tensor::from_parts(shape, out), Op::LogSumExp(a, axis), &[a])
    }

    /// Scales every row (or a whole vector) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let v = &self.values[a.0];
        let c = v.cols();
        let mut out = v.data().to_vec();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !(norm.to_f64() >= MIN_ROW_NORM) {
                return Err(Error::numeric(
                    "l2_normalize",
                    format!("row {r} has norm {norm} below {MIN_ROW_NORM:e}"),
                ));
            }
            row.iter_mut().for_each(|x| *x = *x / norm);
        }
        let shape = v.shape().to_vec();
        self.push("l2_normalize", Tensor::from_parts(shape, out), Op::L2Normalize(a), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let k = T::from_f64(s);
        let t = self.values[a.0].map(|x| x * k);
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = &self.values[a.0];
        if v.rank() != 2 {
            return Err(Error::config(format!("transpose needs a matrix, got {:?}", v.shape())));
        }
        let (m, n) = v.dims2();
        let x = v.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let err = || {
            Error::config(format!(
                "concat on axis {axis}: incompatible shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            ))
        };
        let t = match (av.shape(), bv.shape(), axis) {
            ([n1], [n2], 0) => {
                Tensor::from_parts(vec![n1 + n2], [av.data(), bv.data()].concat())
            }
            ([m1, n1], [m2, n2], 0) if n1 == n2 => {
                Tensor::from_parts(vec![m1 + m2, *n1], [av.data(), bv.data()].concat())
            }
            ([m1, n1], [m2, n2], 1) if m1 == m2 => {
                let mut out = Vec::with_capacity(m1 * (n1 + n2));
                for i in 0..*m1 {
                    out.extend_from_slice(av.row(i));
                    out.extend_from_slice(bv.row(i));
                }
                Tensor::from_parts(vec![*m1, n1 + n2], out)
            }
            _ => return Err(err()),
        };
        self.push("concat", t, Op::Concat(a, b, axis), &[a, b])
    }

    pub fn index_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let v = &self.values[a.0];
        if v.rank() != 2 || ids.is_empty() {
            return Err(Error::config("index_rows needs a matrix and at least one id"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::config(format!(
                "index_rows: row {bad} out of range for {} rows",
                v.rows()
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * v.cols());
        for &i in ids {
            out.extend_from_slice(v.row(i));
        }
        let t = Tensor::from_parts(vec![ids.len(), v.cols()], out);
        self.push("index_rows", t, Op::IndexRows(a, ids.to_vec()), &[a])
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let v = &self.values[a.0];
        let (m, n) = v.dims2();
        if v.rank() != 2 || m != n {
            return Err(Error::config(format!("diag needs a square matrix, got {:?}", v.shape())));
        }
        let out = (0..n).map(|i| v.data()[i * n + i]).collect();
        self.push("diag", Tensor::from_parts(vec![n], out), Op::Diag(a), &[a])
    }

    /// Accumulates `d loss / d leaf` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::config(
                "backward already ran on this tape; call zero_grad first",
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.requires[idx] {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        let Tape {
            values,
            ops,
            requires,
            grads,
            ..
        } = self;

        // Gradient buffer of a parent, or None when it needs no gradient.
        fn buf<'a, T: Scalar>(
            grads: &'a mut [Option<Vec<T>>],
            requires: &[bool],
            values: &[Tensor<T>],
            v: Var,
        ) -> Option<&'a mut Vec<T>> {
            if !requires[v.0] {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); values[v.0].len()]))
        }

        let out = &values[idx];
        match &ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&values[a.0], &values[b.0]);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = buf(grads, requires, values, *a) {
                    gemm_nt(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = buf(grads, requires, values, *b) {
                    gemm_tn(av.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(ops[idx], Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(ga) = buf(grads, requires, values, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &gi)| *x = *x + gi);
                }
                let bl = values[b.0].len();
                if let Some(gb) = buf(grads, requires, values, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let j = b_index(*kind, i, bl);
                        gb[j] = gb[j] + sign * gi;
                    }
                }
            }
            Op::Mul(a, b, kind) => {
                let bl = values[b.0].len();
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                if let Some(ga) = buf(grads, requires, values, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] = ga[i] + gi * bv[b_index(*kind, i, bl)];
                    }
                }
                if let Some(gb) = buf(grads, requires, values, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let j = b_index(*kind, i, bl);
                        gb[j] = gb[j] + gi * av[i];
                    }
                }
            }
            Op::Relu(a) => {
                let x = values[a.0].data();
                if let Some(ga) = buf(grads, requires, values, *a) {
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = buf(grads, requires, values, *a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * out.data()[i];
                    }
                }
            }
            Op::Log(a) => {
                let x = values[a.0].data();
                if let Some(ga) = buf(grads, requires, values, *a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] / x[i];
                    }
                }
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) | Op::LogSumExp(a, axis) => {
                let shape = values[a.0].shape();
                let (outer, len, inner, _) =
                    reduce_geometry(shape, *axis).expect("validated in forward");
                let x = values[a.0].data();
                let factor = match ops[idx] {
                    Op::Mean(..) => T::one() / T::from_f64(len as f64),
                    _ => T::one(),
                };
                let softmax = matches!(ops[idx], Op::LogSumExp(..));
                if let Some(ga) = buf(grads, requires, values, *a) {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                let gi = g[o * inner + i];
                                let w = if softmax {
                                    (x[base + i] - out.data()[o * inner + i]).exp()
                                } else {
                                    factor
                                };
                                ga[base + i] = ga[base + i] + gi * w;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize(a) => {
                let x = values[a.0].data();
                let c = out.cols();
                if let Some(ga) = buf(grads, requires, values, *a) {
                    for r in 0..out.rows() {
                        let span = r * c..(r + 1) * c;
                        let y = &out.data()[span.clone()];
                        let gr = &g[span.clone()];
                        let norm = x[span.clone()].iter().map(|&v| v * v).sum::<T>().sqrt();
                        let yg: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (j, k) in span.enumerate() {
                            ga[k] = ga[k] + (gr[j] - y[j] * yg) / norm;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let k = T::from_f64(*s);
                if let Some(ga) = buf(grads, requires, values, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &gi)| *x = *x + gi * k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = values[a.0].dims2();
                if let Some(ga) = buf(grads, requires, values, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                        }
                    }
                }
            }
            Op::Concat(a, b, axis) => {
                let (ad, bd) = (values[a.0].dims2(), values[b.0].dims2());
                let rank = values[a.0].rank();
                // Map every output element back to (source, index).
                let total_cols = out.cols();
                let route = |i: usize| -> (bool, usize) {
                    if rank == 1 || *axis == 0 {
                        let a_len = ad.0 * ad.1;
                        if i < a_len {
                            (true, i)
                        } else {
                            (false, i - a_len)
                        }
                    } else {
                        let (r, c) = (i / total_cols, i % total_cols);
                        if c < ad.1 {
                            (true, r * ad.1 + c)
                        } else {
                            (false, r * bd.1 + c - ad.1)
                        }
                    }
                };
                if let Some(ga) = buf(grads, requires, values, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        if let (true, j) = route(i) {
                            ga[j] = ga[j] + gi;
                        }
                    }
                }
                if let Some(gb) = buf(grads, requires, values, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        if let (false, j) = route(i) {
                            gb[j] = gb[j] + gi;
                        }
                    }
                }
            }
            Op::IndexRows(a, ids) => {
                let c = values[a.0].cols();
                if let Some(ga) = buf(grads, requires, values, *a) {
                    for (r, &src) in ids.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] = ga[src * c + j] + g[r * c + j];
                        }
                    }
                }
            }
            Op::Diag(a) => {
                let n = values[a.0].cols();
                if let Some(ga) = buf(grads, requires, values, *a) {
                    for i in 0..n {
                        ga[i * n + i] = ga[i * n + i] + g[i];
                    }
                }
            }
        }
    }
}
