//! Elementwise, reduction, shape and linear-algebra operations.

use super::gemm::{self, MatRef};
use super::spatial;
use super::{Op, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind {
    Neg,
    Scale(f64),
    Offset(f64),
    Sqrt,
    Abs,
    Square,
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum ReduceKind {
    Sum(Option<usize>),
    Mean(Option<usize>),
}

/// Which extremum an axis reduction selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extremum {
    Min,
    Max,
}

pub(crate) struct ExtremumState {
    axis: usize,
    /// Selected index along `axis` for every output element.
    arg: Vec<usize>,
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For every flat output index, the flat index of the broadcast input.
/// `None` means the shapes are identical.
fn index_map(input: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if input == out {
        return None;
    }
    let n: usize = out.iter().product();
    if input.iter().product::<usize>() == 1 {
        return Some(vec![0; n]);
    }
    let rank = out.len();
    let pad = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for k in (0..input.len()).rev() {
        strides[k + pad] = if input[k] == 1 { 0 } else { s };
        s *= input[k];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for k in (0..rank).rev() {
            idx[k] += 1;
            flat += strides[k];
            if idx[k] < out[k] {
                break;
            }
            flat -= strides[k] * idx[k];
            idx[k] = 0;
        }
    }
    Some(map)
}

fn reduce_to(grad: &[f64], map: &Option<Vec<usize>>, len: usize) -> Vec<f64> {
    match map {
        None => grad.to_vec(),
        Some(map) => {
            let mut out = vec![0.0; len];
            for (g, &i) in grad.iter().zip(map) {
                out[i] += g;
            }
            out
        }
    }
}

impl<'t> Var<'t> {
    fn unary(self, kind: UnaryKind) -> Var<'t> {
        let x = self.value();
        let data = x
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Scale(s) => v * s,
                UnaryKind::Offset(s) => v + s,
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Abs => v.abs(),
                UnaryKind::Square => v * v,
                UnaryKind::LeakyRelu(slope) => {
                    if v >= 0.0 {
                        v
                    } else {
                        v * slope
                    }
                }
            })
            .collect();
        let out = Tensor { shape: x.shape().to_vec(), data };
        self.tape.push(out, Op::Unary(self.id, kind), self.requires_grad())
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(s))
    }

    pub fn offset(self, s: f64) -> Var<'t> {
        self.unary(UnaryKind::Offset(s))
    }

    /// Elementwise square root; negative inputs are an error.
    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("sqrt of a negative value".into()));
        }
        Ok(self.unary(UnaryKind::Sqrt))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let ma = index_map(a.shape(), &shape);
        let mb = index_map(b.shape(), &shape);
        let n: usize = shape.iter().product();
        if matches!(kind, BinaryKind::Div) {
            let used_zero = match &mb {
                None => b.data().iter().any(|&v| v == 0.0),
                Some(map) => map.iter().any(|&i| b.data()[i] == 0.0),
            };
            if used_zero {
                return Err(Error::DivisionByZero("div"));
            }
        }
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            BinaryKind::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        };
        let data: Vec<f64> = match (&ma, &mb) {
            (None, None) => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|k| {
                    let ia = ma.as_ref().map_or(k, |m| m[k]);
                    let ib = mb.as_ref().map_or(k, |m| m[k]);
                    f(a.data()[ia], b.data()[ib])
                })
                .collect(),
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor { shape, data }, Op::Binary(self.id, other.id, kind), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    /// Broadcasting division; any zero divisor is an error rather than a NaN.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Max)
    }

    /// Sum of every element.
    pub fn sum(self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Reduce(self.id, ReduceKind::Sum(None)), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let s: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
        self.tape.push(Tensor::scalar(s), Op::Reduce(self.id, ReduceKind::Mean(None)), self.requires_grad())
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let kind = if mean { ReduceKind::Mean(Some(axis)) } else { ReduceKind::Sum(Some(axis)) };
        Ok(self.tape.push(Tensor { shape, data: out }, Op::Reduce(self.id, kind), self.requires_grad()))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    /// Min or max over `axis`, skipping entries flagged in `excluded`
    /// (same shape as `self`). Ties select the first index. Returns the
    /// reduced values and the selected index along `axis` for each output.
    pub fn extremum_axis(
        self,
        kind: Extremum,
        axis: usize,
        excluded: Option<&[bool]>,
    ) -> Result<(Var<'t>, Vec<usize>)> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        if let Some(mask) = excluded {
            if mask.len() != x.len() {
                return Err(shape_err("exclusion mask does not match tensor"));
            }
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut vals = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best: Option<(usize, f64)> = None;
                for l in 0..len {
                    let k = (o * len + l) * inner + i;
                    if excluded.is_some_and(|m| m[k]) {
                        continue;
                    }
                    let v = x.data()[k];
                    let better = match best {
                        None => true,
                        Some((_, b)) => match kind {
                            Extremum::Min => v < b,
                            Extremum::Max => v > b,
                        },
                    };
                    if better {
                        best = Some((l, v));
                    }
                }
                let (l, v) = best.ok_or_else(|| {
                    Error::Degenerate("every entry of a reduction slice is excluded".into())
                })?;
                vals.push(v);
                arg.push(l);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let state = ExtremumState { axis, arg: arg.clone() };
        let v = self.tape.push(Tensor { shape, data: vals }, Op::Extremum(self.id, state), self.requires_grad());
        Ok((v, arg))
    }

    pub fn min_axis(self, axis: usize) -> Result<Var<'t>> {
        Ok(self.extremum_axis(Extremum::Min, axis, None)?.0)
    }

    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        Ok(self.extremum_axis(Extremum::Max, axis, None)?.0)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = Tensor::clone(&x).reshaped(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[r, c] = x.shape() else {
            return Err(shape_err(format!("transpose needs 2-D, got {:?}", x.shape())));
        };
        let data = transpose_data(x.data(), r, c);
        Ok(self.tape.push(Tensor { shape: vec![c, r], data }, Op::Transpose(self.id), self.requires_grad()))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let tape = first.tape;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        check_axis(&base, axis)?;
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().enumerate().any(|(k, &d)| k != axis && d != base[k])
            {
                return Err(shape_err(format!("concat {:?} with {:?} on axis {axis}", base, s)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids = parts.iter().map(|p| p.id).collect();
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(Tensor { shape, data }, Op::Concat(ids, axis), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        if start + len > n {
            return Err(shape_err(format!("narrow {start}+{len} exceeds {n}")));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.push(Tensor { shape, data }, Op::Narrow(self.id, start, axis), self.requires_grad()))
    }

    /// Selects rows (indices into axis 0), repeats allowed.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rows = *x.shape().first().ok_or_else(|| shape_err("gather on a scalar"))?;
        let width = x.len() / rows.max(1);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(shape_err(format!("gather index {i} out of {rows} rows")));
            }
            data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        Ok(self.tape.push(Tensor { shape, data }, Op::Gather(self.id, idx.to_vec()), self.requires_grad()))
    }

    /// Product of two 2-D tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(shape_err(format!("matmul needs 2-D, got {:?} and {:?}", a.shape(), b.shape())));
        };
        if k != k2 {
            return Err(shape_err(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
        }
        let data = gemm::matmul(MatRef::row_major(a.data(), m, k), MatRef::row_major(b.data(), k, n));
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor { shape: vec![m, n], data }, Op::MatMul(self.id, other.id), rg))
    }
}

pub(crate) fn transpose_data(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Dispatches the backward rule of `op`.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Unary(_, kind) => {
            let x = inputs[0].data();
            let y = output.data();
            let g = grad
                .iter()
                .enumerate()
                .map(|(k, &g)| match *kind {
                    UnaryKind::Neg => -g,
                    UnaryKind::Scale(s) => g * s,
                    UnaryKind::Offset(_) => g,
                    UnaryKind::Sqrt => {
                        if y[k] > 0.0 {
                            g * 0.5 / y[k]
                        } else {
                            0.0
                        }
                    }
                    UnaryKind::Abs => {
                        if x[k] > 0.0 {
                            g
                        } else if x[k] < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }
                    UnaryKind::Square => 2.0 * x[k] * g,
                    UnaryKind::LeakyRelu(slope) => {
                        if x[k] >= 0.0 {
                            g
                        } else {
                            g * slope
                        }
                    }
                })
                .collect();
            vec![Some(g)]
        }
        Op::Binary(_, _, kind) => {
            let (a, b) = (inputs[0], inputs[1]);
            let ma = index_map(a.shape(), output.shape());
            let mb = index_map(b.shape(), output.shape());
            let at = |k: usize| a.data()[ma.as_ref().map_or(k, |m| m[k])];
            let bt = |k: usize| b.data()[mb.as_ref().map_or(k, |m| m[k])];
            let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                BinaryKind::Add => (grad.to_vec(), grad.to_vec()),
                BinaryKind::Sub => (grad.to_vec(), grad.iter().map(|g| -g).collect()),
                BinaryKind::Mul => (
                    grad.iter().enumerate().map(|(k, g)| g * bt(k)).collect(),
                    grad.iter().enumerate().map(|(k, g)| g * at(k)).collect(),
                ),
                BinaryKind::Div => (
                    grad.iter().enumerate().map(|(k, g)| g / bt(k)).collect(),
                    grad.iter()
                        .enumerate()
                        .map(|(k, g)| -g * at(k) / (bt(k) * bt(k)))
                        .collect(),
                ),
                BinaryKind::Max => (
                    grad.iter().enumerate().map(|(k, &g)| if at(k) >= bt(k) { g } else { 0.0 }).collect(),
                    grad.iter().enumerate().map(|(k, &g)| if at(k) >= bt(k) { 0.0 } else { g }).collect(),
                ),
            };
            vec![
                needs[0].then(|| reduce_to(&ga, &ma, a.len())),
                needs[1].then(|| reduce_to(&gb, &mb, b.len())),
            ]
        }
        Op::Reduce(_, kind) => {
            let x = inputs[0];
            let g = match *kind {
                ReduceKind::Sum(None) => vec![grad[0]; x.len()],
                ReduceKind::Mean(None) => vec![grad[0] / x.len() as f64; x.len()],
                ReduceKind::Sum(Some(axis)) | ReduceKind::Mean(Some(axis)) => {
                    let (outer, len, inner) = axis_split(x.shape(), axis);
                    let scale = if matches!(kind, ReduceKind::Mean(_)) { 1.0 / len as f64 } else { 1.0 };
                    let mut g = vec![0.0; x.len()];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&grad[o * inner..(o + 1) * inner]) {
                                *d = s * scale;
                            }
                        }
                    }
                    g
                }
            };
            vec![Some(g)]
        }
        Op::Extremum(_, state) => {
            let x = inputs[0];
            let (_, len, inner) = axis_split(x.shape(), state.axis);
            let mut g = vec![0.0; x.len()];
            for (k, (&l, &gv)) in state.arg.iter().zip(grad).enumerate() {
                let (o, i) = (k / inner, k % inner);
                g[(o * len + l) * inner + i] += gv;
            }
            vec![Some(g)]
        }
        Op::Reshape(_) => vec![Some(grad.to_vec())],
        Op::Transpose(_) => {
            let s = inputs[0].shape();
            // grad has the transposed shape [c, r]
            vec![Some(transpose_data(grad, s[1], s[0]))]
        }
        Op::Concat(_, axis) => {
            let out_shape = output.shape();
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for (x, need) in inputs.iter().zip(needs) {
                let len = x.shape()[*axis];
                if *need {
                    let mut g = Vec::with_capacity(x.len());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        g.extend_from_slice(&grad[start..start + len * inner]);
                    }
                    res.push(Some(g));
                } else {
                    res.push(None);
                }
                offset += len;
            }
            res
        }
        Op::Narrow(_, start, axis) => {
            let x = inputs[0];
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let len = output.shape()[*axis];
            let mut g = vec![0.0; x.len()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                g[dst..dst + len * inner].copy_from_slice(&grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }
        Op::Gather(_, idx) => {
            let x = inputs[0];
            let width = x.len() / x.shape()[0].max(1);
            let mut g = vec![0.0; x.len()];
            for (r, &i) in idx.iter().enumerate() {
                for (d, s) in g[i * width..(i + 1) * width].iter_mut().zip(&grad[r * width..(r + 1) * width]) {
                    *d += s;
                }
            }
            vec![Some(g)]
        }
        Op::MatMul(_, _) => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let gm = MatRef::row_major(grad, m, n);
            let ga = needs[0].then(|| gemm::matmul(gm, MatRef::row_major(b.data(), k, n).t()));
            let gb = needs[1].then(|| gemm::matmul(MatRef::row_major(a.data(), m, k).t(), gm));
            vec![ga, gb]
        }
        Op::Conv2d(_, _, geom) => spatial::conv2d_backward(geom, inputs[0], inputs[1], grad, needs),
        Op::AvgPool2(_) => vec![Some(spatial::avg_pool2_backward(inputs[0].shape(), grad))],
        Op::Resize(_) => vec![Some(spatial::resize_backward(inputs[0].shape(), output.shape(), grad))],
        Op::GridSample(_, _) => spatial::grid_sample_backward(inputs[0], inputs[1], grad, needs),
        Op::Custom(_, op) => op.backward(inputs, output, grad, needs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, objective, Tape};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        assert!((x.leaky_relu(0.2).item() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn broadcast_rows_and_columns() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let col = tape.leaf(t(&[2, 1], &[10., 20.]));
        let row = tape.leaf(t(&[3], &[1., 2., 3.]));
        let y = x.add(col).unwrap().mul(row).unwrap();
        assert_eq!(y.value().data(), &[11., 24., 39., 24., 50., 78.]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(col).data(), &[6., 6.]);
        assert_eq!(g.wrt(row).data(), &[35., 37., 39.]);
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(a.div(b), Err(Error::DivisionByZero(_))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(a.add(b), Err(Error::Shape(_))));
        assert!(matches!(a.matmul(a), Err(Error::Shape(_))));
    }

    #[test]
    fn min_routes_gradient_to_first_argmin() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[3., 1., 1., 0., 5., 0.]));
        let (m, arg) = x.extremum_axis(Extremum::Min, 1, None).unwrap();
        assert_eq!(arg, vec![1, 0]);
        assert_eq!(m.value().data(), &[1., 0.]);
        let g = tape.backward(m.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0., 1., 0., 1., 0., 0.]);
    }

    #[test]
    fn masked_min_skips_excluded_entries() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.1, 0.9, 0.2, 0.3]));
        let mask = [true, false, false, false];
        let (m, arg) = x.extremum_axis(Extremum::Min, 1, Some(&mask)).unwrap();
        assert_eq!(arg, vec![1, 0]);
        assert_eq!(m.value().data(), &[0.9, 0.2]);
        let all = [true, true, false, false];
        assert!(x.extremum_axis(Extremum::Min, 1, Some(&all)).is_err());
    }

    #[test]
    fn concat_narrow_gather_round_trip() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t(&[2, 1], &[5., 6.]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1., 2., 5., 3., 4., 6.]);
        let n = c.narrow(1, 1, 2).unwrap();
        assert_eq!(n.value().data(), &[2., 5., 4., 6.]);
        let gth = c.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(gth.shape(), vec![3, 3]);
        let g = tape.backward(gth.sum()).unwrap();
        assert_eq!(g.wrt(a).data(), &[1., 1., 2., 2.]);
        assert_eq!(g.wrt(b).data(), &[1., 2.]);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let x0 = Tensor::new(vec![3, 4], (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0 + 0.05).collect())
            .unwrap();
        let w = Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let f = objective(|tape, x| {
            let w = tape.constant(w.clone());
            let h = x.matmul(w)?.leaky_relu(0.2);
            let norms = h.square().sum_axis(1)?.offset(0.5).sqrt()?;
            let r = h.div(norms.reshape(&[3, 1])?)?;
            let m = r.max_axis(0)?.sum();
            let t = r.transpose()?.abs().mean_axis(1)?.sum();
            m.add(t)?.mul(x.mean())
        });
        let err = finite_diff_check(f, &x0, 1e-6).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
