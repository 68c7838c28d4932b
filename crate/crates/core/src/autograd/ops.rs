//! Differentiable tensor operations.
//!
//! Broadcasting is limited to two cases: a scalar right operand, and a right
//! operand whose shape is a trailing suffix of the left shape (bias vectors,
//! positional tables).

use super::{Tape, Var};
use crate::error::TensorError;
use crate::tensor::{gemm, Element, MatView, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }
}

/// How `rhs` broadcasts against `lhs`: `rhs` repeats every `period` elements.
fn broadcast_period(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize, TensorError> {
    let rhs_len: usize = rhs.iter().product();
    if lhs == rhs || rhs_len == 1 {
        return Ok(rhs_len);
    }
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(rhs_len);
    }
    Err(TensorError::ShapeMismatch { op, left: lhs.to_vec(), right: rhs.to_vec() })
}

/// `f(lhs[i], rhs[i % period])` without a per-element division.
fn periodic_zip<T: Element>(lhs: &[T], rhs: &[T], period: usize, f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(lhs.len());
    for chunk in lhs.chunks(period.max(1)) {
        out.extend(chunk.iter().zip(rhs).map(|(&x, &y)| f(x, y)));
    }
    out
}

/// Sum a full-size gradient down to a broadcast operand of `period` elements.
fn reduce_periodic<T: Element>(g: &[T], period: usize, shape: Vec<usize>) -> Tensor<T> {
    let mut out = vec![T::zero(); period];
    for chunk in g.chunks(period) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    Tensor::from_parts(shape, out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// `tanh` through a single `exp`; saturates cleanly to ±1.
fn fast_tanh<T: Element>(u: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_forward<T: Element>(x: T) -> T {
    let (c, a, half) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_A), T::from_f64_lossy(0.5));
    half * x * (T::one() + fast_tanh(c * (x + a * x * x * x)))
}

fn gelu_derivative<T: Element>(x: T) -> T {
    let (c, a, half) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_A), T::from_f64_lossy(0.5));
    let three = T::from_f64_lossy(3.0);
    let t = fast_tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Scalar tanh-approximation GELU, exposed for oracles and tests.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu_forward::<f64>(x)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Element> Var<'t, T> {
    fn binary(self, rhs: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>, TensorError> {
        let a = self.value();
        let b = rhs.value();
        let period = broadcast_period(kind.name(), a.shape(), b.shape())?;
        let out = periodic_zip(a.data(), b.data(), period, |x, y| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        });
        let value = Tensor::from_parts(a.shape().to_vec(), out);
        let b_shape = b.shape().to_vec();
        let full = period == a.len();
        self.tape.record(
            kind.name(),
            value,
            &[self, rhs],
            Box::new(move |g| {
                let gd = g.data();
                let (ga, gb) = match kind {
                    Binary::Add | Binary::Sub => {
                        let gb = if full { g.clone() } else { reduce_periodic(gd, period, b_shape.clone()) };
                        (g.clone(), gb)
                    }
                    Binary::Mul => {
                        let ga = periodic_zip(gd, b.data(), period, |v, y| v * y);
                        let gb_full: Vec<T> = gd.iter().zip(a.data()).map(|(&v, &x)| v * x).collect();
                        let gb = if full {
                            Tensor::from_parts(b_shape.clone(), gb_full)
                        } else {
                            reduce_periodic(&gb_full, period, b_shape.clone())
                        };
                        (Tensor::from_parts(g.shape().to_vec(), ga), gb)
                    }
                };
                let gb = if kind == Binary::Sub { gb.map(|v| -v) } else { gb };
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(rhs, Binary::Mul)
    }

    /// Multiply by a constant scalar.
    pub fn scale(self, c: f64) -> Result<Var<'t, T>, TensorError> {
        let c = T::from_f64_lossy(c);
        let value = self.value().map(|v| v * c);
        self.tape.record("scale", value, &[self], Box::new(move |g| vec![Some(g.map(|v| v * c))]))
    }

    /// Multiply elementwise by a constant tensor of the same shape (dropout masks).
    pub fn mul_const(self, mask: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        if x.shape() != mask.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                left: x.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let value = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect(),
        );
        let mask = mask.clone();
        self.tape.record(
            "mul_const",
            value,
            &[self],
            Box::new(move |g| {
                let gd = g.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), gd))]
            }),
        )
    }

    /// Scale each slice along the leading axis by its own constant factor.
    pub fn scale_leading(self, factors: &[T]) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let lead = x.shape().first().copied().unwrap_or(0);
        if lead != factors.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scale_leading",
                left: x.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let row = x.len() / lead.max(1);
        let apply = move |src: &[T], factors: &[T]| -> Vec<T> {
            src.chunks(row.max(1)).zip(factors).flat_map(|(c, &f)| c.iter().map(move |&v| v * f)).collect()
        };
        let value = Tensor::from_parts(x.shape().to_vec(), apply(x.data(), factors));
        let factors = factors.to_vec();
        self.tape.record(
            "scale_leading",
            value,
            &[self],
            Box::new(move |g| vec![Some(Tensor::from_parts(g.shape().to_vec(), apply(g.data(), &factors)))]),
        )
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(self) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.record(
            "sum",
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]),
        )
    }

    pub fn mean(self) -> Result<Var<'t, T>, TensorError> {
        let n = self.value().len().max(1);
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn relu(self) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let value = x.map(|v| v.max(T::zero()));
        self.tape.record(
            "relu",
            value,
            &[self],
            Box::new(move |g| {
                let gd = g.data().iter().zip(x.data()).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() });
                vec![Some(Tensor::from_parts(g.shape().to_vec(), gd.collect()))]
            }),
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(self) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let value = x.map(gelu_forward);
        self.tape.record(
            "gelu",
            value,
            &[self],
            Box::new(move |g| {
                let gd = g.data().iter().zip(x.data()).map(|(&g, &v)| g * gelu_derivative(v));
                vec![Some(Tensor::from_parts(g.shape().to_vec(), gd.collect()))]
            }),
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let original = x.shape().to_vec();
        let value = x.reshape(shape)?;
        self.tape.record(
            "reshape",
            value,
            &[self],
            Box::new(move |g| vec![Some(g.reshape(original.clone()).expect("same element count"))]),
        )
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let value = permute_tensor(&x, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.record("permute", value, &[self], Box::new(move |g| vec![Some(permute_tensor(g, &inverse))]))
    }

    /// Matrix product.
    ///
    /// * `a[..., K] · b[K, N] -> [..., N]` (leading axes of `a` are flattened
    ///   into rows), or
    /// * batched `a[B, M, K] · b[B, K, N] -> [B, M, N]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let a = self.value();
        let b = rhs.value();
        let mismatch =
            || TensorError::ShapeMismatch { op: "matmul", left: a.shape().to_vec(), right: b.shape().to_vec() };
        if a.rank() < 2 {
            return Err(TensorError::RankTooLow { op: "matmul", rank: a.rank(), min: 2 });
        }
        match b.rank() {
            2 => {
                let (k, n) = (b.shape()[0], b.shape()[1]);
                if *a.shape().last().unwrap() != k {
                    return Err(mismatch());
                }
                let m = a.len() / k.max(1);
                let mut out = vec![T::zero(); m * n];
                gemm(a.data(), MatView::plain(m, k), b.data(), MatView::plain(k, n), &mut out, false);
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = n;
                let value = Tensor::from_parts(shape, out);
                self.tape.record(
                    "matmul",
                    value,
                    &[self, rhs],
                    Box::new(move |g| {
                        let mut da = vec![T::zero(); m * k];
                        gemm(g.data(), MatView::plain(m, n), b.data(), MatView::t(k, n), &mut da, false);
                        let mut db = vec![T::zero(); k * n];
                        gemm(a.data(), MatView::t(m, k), g.data(), MatView::plain(m, n), &mut db, false);
                        vec![
                            Some(Tensor::from_parts(a.shape().to_vec(), da)),
                            Some(Tensor::from_parts(b.shape().to_vec(), db)),
                        ]
                    }),
                )
            }
            3 => {
                if a.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
                    return Err(mismatch());
                }
                let (batch, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
                let mut out = vec![T::zero(); batch * m * n];
                for i in 0..batch {
                    gemm(
                        &a.data()[i * m * k..],
                        MatView::plain(m, k),
                        &b.data()[i * k * n..],
                        MatView::plain(k, n),
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
                let value = Tensor::from_parts(vec![batch, m, n], out);
                self.tape.record(
                    "matmul",
                    value,
                    &[self, rhs],
                    Box::new(move |g| {
                        let mut da = vec![T::zero(); batch * m * k];
                        let mut db = vec![T::zero(); batch * k * n];
                        for i in 0..batch {
                            let gi = &g.data()[i * m * n..];
                            gemm(
                                gi,
                                MatView::plain(m, n),
                                &b.data()[i * k * n..],
                                MatView::t(k, n),
                                &mut da[i * m * k..(i + 1) * m * k],
                                false,
                            );
                            gemm(
                                &a.data()[i * m * k..],
                                MatView::t(m, k),
                                gi,
                                MatView::plain(m, n),
                                &mut db[i * k * n..(i + 1) * k * n],
                                false,
                            );
                        }
                        vec![
                            Some(Tensor::from_parts(a.shape().to_vec(), da)),
                            Some(Tensor::from_parts(b.shape().to_vec(), db)),
                        ]
                    }),
                )
            }
            _ => Err(mismatch()),
        }
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(TensorError::Index { op: "softmax", index: axis, extent: x.rank() });
        }
        let y = softmax_tensor(&x, axis);
        let out = y.clone();
        self.tape.record(
            "softmax",
            y,
            &[self],
            Box::new(move |g| {
                let (outer, n, inner) = axis_split(out.shape(), axis);
                let (yd, gd) = (out.data(), g.data());
                let mut dx = vec![T::zero(); yd.len()];
                if inner == 1 {
                    let n = n.max(1);
                    for ((y, g), d) in yd.chunks(n).zip(gd.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot = y.iter().zip(g).fold(T::zero(), |acc, (&y, &g)| acc + y * g);
                        for ((d, &y), &g) in d.iter_mut().zip(y).zip(g) {
                            *d = y * (g - dot);
                        }
                    }
                    return vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))];
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot = (0..n).fold(T::zero(), |acc, j| acc + yd[idx(j)] * gd[idx(j)]);
                        for j in 0..n {
                            dx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))]
            }),
        )
    }

    /// Layer normalization over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let d = *x.shape().last().ok_or(TensorError::RankTooLow { op: "layer_norm", rank: 0, min: 1 })?;
        for p in [&gv, &bv] {
            if p.shape() != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: x.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let rows = x.len() / d.max(1);
        let eps_t = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).expect("usize fits");
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        let (xd, gd, bd) = (x.data(), gv.data(), bv.data());
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let is = T::one() / (var + eps_t).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let shape = x.shape().to_vec();
        self.tape.record(
            "layer_norm",
            value,
            &[self, gamma, beta],
            Box::new(move |g| {
                let gdat = g.data();
                let gam = gv.data();
                let mut dx = vec![T::zero(); gdat.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        let i = r * d + j;
                        let dh = gdat[i] * gam[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * xhat[i];
                        dgamma[j] = dgamma[j] + gdat[i] * xhat[i];
                        dbeta[j] = dbeta[j] + gdat[i];
                    }
                    for j in 0..d {
                        let i = r * d + j;
                        let dh = gdat[i] * gam[j];
                        dx[i] = inv_std[r] / dn * (dn * dh - sum_dh - xhat[i] * sum_dh_h);
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), dx)),
                    Some(Tensor::from_parts(vec![d], dgamma)),
                    Some(Tensor::from_parts(vec![d], dbeta)),
                ]
            }),
        )
    }
}

/// Softmax of a plain tensor along `axis`.
pub fn softmax_tensor<T: Element>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    if inner == 1 {
        for (src, dst) in xd.chunks(n.max(1)).zip(y.chunks_mut(n.max(1))) {
            let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - max).exp();
                total = total + *d;
            }
            let inv = T::one() / total;
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        return Tensor::from_parts(x.shape().to_vec(), y);
    }
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).fold(T::neg_infinity(), |m, j| m.max(xd[idx(j)]));
            let mut total = T::zero();
            for j in 0..n {
                let e = (xd[idx(j)] - max).exp();
                y[idx(j)] = e;
                total = total + e;
            }
            for j in 0..n {
                y[idx(j)] = y[idx(j)] / total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), y)
}

fn permute_tensor<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..xd.len() {
        out.push(xd[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

impl<T: Element> Tape<T> {
    /// Convenience: constant scalar on this tape.
    pub fn scalar(&self, value: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::from_f64_lossy(value)))
    }
}
