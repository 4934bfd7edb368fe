//! Elementwise, matrix and shape primitives.

use crate::error::{dim_err, shape_err, Result};
use crate::linalg::{gemm, MatRef};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{axis_split, check_axis, Tensor};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numpy-style broadcast of two shapes (shorter shape is left-padded with 1).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => shape_err(op, a, b),
        })
        .collect()
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast to it.
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut padded = vec![1; rank - in_shape.len()];
    padded.extend_from_slice(in_shape);
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let (oa, ob) = (
        broadcast_offsets(&shape, a.shape()),
        broadcast_offsets(&shape, b.shape()),
    );
    let (da, db) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(shape, data)
}

pub(crate) fn broadcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    broadcast_binary("mul", g, other, |x, y| x * y).expect("shapes validated in forward")
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub(crate) fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let offsets = broadcast_offsets(g.shape(), shape);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for (&o, &v) in offsets.iter().zip(g.data()) {
        od[o] += v;
    }
    out
}

pub(crate) fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut data = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        data.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

pub(crate) fn narrow_tensor(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let src = x.data();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&src[base..base + len * inner]);
    }
    Tensor::new(shape, data).unwrap()
}

pub(crate) fn narrow_backward(g: &Tensor, in_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, n, inner) = axis_split(in_shape, axis);
    let len = g.shape()[axis];
    let mut out = Tensor::zeros(in_shape);
    let od = out.data_mut();
    let gd = g.data();
    for o in 0..outer {
        let dst = (o * n + start) * inner;
        let src = o * len * inner;
        od[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
    }
    out
}

pub(crate) fn mean_axis_backward(g: &Tensor, in_shape: &[usize], axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(in_shape, axis);
    let scale = 1.0 / n as f64;
    let gd = g.data();
    let mut out = Tensor::zeros(in_shape);
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..n {
            for k in 0..inner {
                od[(o * n + i) * inner + k] = gd[o * inner + k] * scale;
            }
        }
    }
    out
}

struct MatMulDims {
    batch: usize,
    n: usize,
    k: usize,
    m: usize,
    /// `b` is a single matrix shared by every batch entry.
    shared_b: bool,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(MatMulDims, Vec<usize>)> {
    let (bk, bm, b_batch) = match (b.len(), trans_b) {
        (2, false) => (b[0], b[1], None),
        (2, true) => (b[1], b[0], None),
        (3, false) => (b[1], b[2], Some(b[0])),
        (3, true) => (b[2], b[1], Some(b[0])),
        _ => return shape_err("matmul", a, b),
    };
    if a.len() < 2 || a[a.len() - 1] != bk {
        return shape_err("matmul", a, b);
    }
    match b_batch {
        None => {
            let k = a[a.len() - 1];
            let rows: usize = a[..a.len() - 1].iter().product();
            let mut out = a[..a.len() - 1].to_vec();
            out.push(bm);
            Ok((
                MatMulDims {
                    batch: 1,
                    n: rows,
                    k,
                    m: bm,
                    shared_b: true,
                },
                out,
            ))
        }
        Some(bb) => {
            if a.len() != 3 || a[0] != bb {
                return shape_err("matmul", a, b);
            }
            Ok((
                MatMulDims {
                    batch: bb,
                    n: a[1],
                    k: a[2],
                    m: bm,
                    shared_b: false,
                },
                vec![bb, a[1], bm],
            ))
        }
    }
}

fn b_view<'a>(data: &'a [f64], d: &MatMulDims, trans_b: bool) -> MatRef<'a> {
    if trans_b {
        MatRef::transposed(data, d.m, d.k)
    } else {
        MatRef::new(data, d.k, d.m)
    }
}

pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    trans_b: bool,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (d, _) = matmul_dims(a.shape(), b.shape(), trans_b).expect("validated in forward");
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let (sa, sb, sg) = (
        d.n * d.k,
        if d.shared_b { 0 } else { d.k * d.m },
        d.n * d.m,
    );
    let ga = need_a.then(|| {
        let mut out = vec![0.0; ad.len()];
        for i in 0..d.batch {
            let gv = MatRef::new(&gd[i * sg..(i + 1) * sg], d.n, d.m);
            let bslice = &bd[i * sb..i * sb + d.k * d.m];
            // dA = dC · Bᵀ where B is the logical k × m operand
            let bt = if trans_b {
                MatRef::new(bslice, d.m, d.k)
            } else {
                MatRef::transposed(bslice, d.k, d.m)
            };
            gemm(gv, bt, &mut out[i * sa..(i + 1) * sa], false);
        }
        Tensor::new(a.shape().to_vec(), out).unwrap()
    });
    let gb = need_b.then(|| {
        let mut out = vec![0.0; bd.len()];
        for i in 0..d.batch {
            let av = &ad[i * sa..(i + 1) * sa];
            let gv = &gd[i * sg..(i + 1) * sg];
            let dst = &mut out[i * sb..i * sb + d.k * d.m];
            let accumulate = d.shared_b && i > 0;
            if trans_b {
                // B stored m × k: dB = dCᵀ · A
                gemm(
                    MatRef::transposed(gv, d.n, d.m),
                    MatRef::new(av, d.n, d.k),
                    dst,
                    accumulate,
                );
            } else {
                gemm(
                    MatRef::transposed(av, d.n, d.k),
                    MatRef::new(gv, d.n, d.m),
                    dst,
                    accumulate,
                );
            }
        }
        Tensor::new(b.shape().to_vec(), out).unwrap()
    });
    (ga, gb)
}

impl Tape {
    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Broadcasting elementwise difference.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn elementwise(&mut self, x: Var, kind: Activation) -> Var {
        let src = self.value(x);
        match kind {
            Activation::Relu => {
                let v = src.map(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 });
                self.push(v, Op::Relu(x))
            }
            Activation::Tanh => {
                let v = src.map(f64::tanh);
                self.push(v, Op::Tanh(x))
            }
            Activation::Sigmoid => {
                let v = src.map(sigmoid);
                self.push(v, Op::Sigmoid(x))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.elementwise(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(x, Activation::Sigmoid)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a single `k × m` matrix applied to every row of `a`
    /// (any leading shape), or a batch `B × k × m` paired with `a: B × n × k`.
    /// With `trans_b`, `b` is stored transposed (`m × k`).
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (d, out_shape) = matmul_dims(self.shape(a), self.shape(b), trans_b)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; d.batch * d.n * d.m];
        let sb = if d.shared_b { 0 } else { d.k * d.m };
        for i in 0..d.batch {
            gemm(
                MatRef::new(&ad[i * d.n * d.k..(i + 1) * d.n * d.k], d.n, d.k),
                b_view(&bd[i * sb..i * sb + d.k * d.m], &d, trans_b),
                &mut out[i * d.n * d.m..(i + 1) * d.n * d.m],
                false,
            );
        }
        let v = Tensor::new(out_shape, out)?;
        Ok(self.push(v, Op::MatMul { a, b, trans_b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// `x · w + b` with the bias broadcast over rows.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wshape = self.shape(w);
        if wshape.len() != 2 || self.shape(b) != [wshape[1]] {
            return shape_err("dense", self.shape(w), self.shape(b));
        }
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return dim_err("permute", format!("invalid axes {axes:?} for rank {rank}"));
        }
        let v = permute_tensor(self.value(x), axes);
        Ok(self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return dim_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        check_axis("narrow", shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return dim_err(
                "narrow",
                format!("range {start}..{} outside axis {axis} of {shape:?}", start + len),
            );
        }
        let v = narrow_tensor(self.value(x), axis, start, len);
        Ok(self.push(v, Op::Narrow { x, axis, start }))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("mean_axis", &shape, axis)?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let scale = 1.0 / n as f64;
        data.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::MeanAxis { x, axis }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }
}
