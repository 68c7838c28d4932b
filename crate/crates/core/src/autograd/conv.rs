//! NHWC convolution and max pooling.
//!
//! Convolution is cross-correlation (no kernel flip) lowered to a single gemm
//! through an im2col buffer. Same-padding follows the usual
//! `out = ceil(in / stride)` rule with the odd pad cell placed after the
//! input; padded cells are zero for convolution and never win a max-pool.

use super::Var;
use crate::error::TensorError;
use crate::tensor::{gemm, Element, MatView, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize), TensorError> {
    if kernel == 0 || stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv_output_len",
            reason: format!("kernel {kernel} and stride {stride} must be positive"),
        });
    }
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(TensorError::KernelTooLarge { op: "conv", kernel: (kernel, kernel), padded: (input, input) });
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

struct Geometry {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
    stride: usize,
}

impl Geometry {
    fn new(
        op: &'static str,
        x: &[usize],
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self, TensorError> {
        if x.len() != 4 {
            return Err(TensorError::RankTooLow { op, rank: x.len(), min: 4 });
        }
        let (batch, h, w, c) = (x[0], x[1], x[2], x[3]);
        let check = |dim: usize, k: usize| {
            conv_output_len(dim, k, stride, padding).map_err(|e| match e {
                TensorError::KernelTooLarge { .. } => {
                    TensorError::KernelTooLarge { op, kernel: (kh, kw), padded: (h, w) }
                }
                other => other,
            })
        };
        let (out_h, pad_top) = check(h, kh)?;
        let (out_w, pad_left) = check(w, kw)?;
        Ok(Geometry { batch, h, w, c, kh, kw, out_h, out_w, pad_top, pad_left, stride })
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if it
    /// falls inside the unpadded input.
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&p| p < extent)
    }
}

fn im2col<T: Element>(x: &[T], g: &Geometry) -> Vec<T> {
    let patch = g.kh * g.kw * g.c;
    let mut cols = vec![T::zero(); g.batch * g.out_h * g.out_w * patch];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else { continue };
                        let src = ((b * g.h + iy) * g.w + ix) * g.c;
                        let off = (ky * g.kw + kx) * g.c;
                        dst[off..off + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Element>(cols: &[T], g: &Geometry) -> Vec<T> {
    let patch = g.kh * g.kw * g.c;
    let mut dx = vec![T::zero(); g.batch * g.h * g.w * g.c];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else { continue };
                        let dst = ((b * g.h + iy) * g.w + ix) * g.c;
                        let off = (ky * g.kw + kx) * g.c;
                        for ch in 0..g.c {
                            dx[dst + ch] = dx[dst + ch] + src[off + ch];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

impl<'t, T: Element> Var<'t, T> {
    /// 2-D cross-correlation: `x[B,H,W,C] ⋆ w[kh,kw,C,F] + b[F]`.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        if w.rank() != 4 {
            return Err(TensorError::RankTooLow { op: "conv2d", rank: w.rank(), min: 4 });
        }
        let (kh, kw, wc, f) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let g = Geometry::new("conv2d", x.shape(), kh, kw, stride, padding)?;
        if wc != g.c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if b.shape() != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let rows = g.batch * g.out_h * g.out_w;
        let patch = kh * kw * g.c;
        let cols = im2col(x.data(), &g);
        let mut out = vec![T::zero(); rows * f];
        for r in 0..rows {
            out[r * f..(r + 1) * f].copy_from_slice(b.data());
        }
        gemm(&cols, MatView::plain(rows, patch), w.data(), MatView::plain(patch, f), &mut out, true);
        let value = Tensor::from_parts(vec![g.batch, g.out_h, g.out_w, f], out);
        let x_shape = x.shape().to_vec();
        let w_shape = w.shape().to_vec();
        self.tape.record(
            "conv2d",
            value,
            &[self, weight, bias],
            Box::new(move |grad| {
                let gd = grad.data();
                let mut dcols = vec![T::zero(); rows * patch];
                gemm(gd, MatView::plain(rows, f), w.data(), MatView::t(patch, f), &mut dcols, false);
                let dx = col2im(&dcols, &g);
                let mut dw = vec![T::zero(); patch * f];
                gemm(&cols, MatView::t(rows, patch), gd, MatView::plain(rows, f), &mut dw, false);
                let mut db = vec![T::zero(); f];
                for chunk in gd.chunks(f) {
                    for (acc, &v) in db.iter_mut().zip(chunk) {
                        *acc = *acc + v;
                    }
                }
                vec![
                    Some(Tensor::from_parts(x_shape.clone(), dx)),
                    Some(Tensor::from_parts(w_shape.clone(), dw)),
                    Some(Tensor::from_parts(vec![f], db)),
                ]
            }),
        )
    }

    /// Windowed max over `x[B,H,W,C]`. The gradient goes to the first maximal
    /// element of each window in row-major window order.
    pub fn maxpool2d(self, pool: usize, stride: usize, padding: Padding) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let g = Geometry::new("maxpool2d", x.shape(), pool, pool, stride, padding)?;
        let xd = x.data();
        let n_out = g.batch * g.out_h * g.out_w * g.c;
        let mut out = Vec::with_capacity(n_out);
        let mut argmax = Vec::with_capacity(n_out);
        for b in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for ch in 0..g.c {
                        let mut best: Option<(T, usize)> = None;
                        for ky in 0..pool {
                            let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else { continue };
                            for kx in 0..pool {
                                let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else { continue };
                                let idx = ((b * g.h + iy) * g.w + ix) * g.c + ch;
                                if best.is_none_or(|(v, _)| xd[idx] > v) {
                                    best = Some((xd[idx], idx));
                                }
                            }
                        }
                        let (v, idx) = best.expect("every same/valid window overlaps the input");
                        out.push(v);
                        argmax.push(idx);
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![g.batch, g.out_h, g.out_w, g.c], out);
        let x_shape = x.shape().to_vec();
        let x_len = x.len();
        self.tape.record(
            "maxpool2d",
            value,
            &[self],
            Box::new(move |grad| {
                let mut dx = vec![T::zero(); x_len];
                for (&idx, &gv) in argmax.iter().zip(grad.data()) {
                    dx[idx] = dx[idx] + gv;
                }
                vec![Some(Tensor::from_parts(x_shape.clone(), dx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    /// Direct nested-loop cross-correlation, independent of im2col.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        padding: Padding,
    ) -> Tensor<f64> {
        let (bn, h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, f) = (w.shape()[0], w.shape()[1], w.shape()[3]);
        let (oh, pt) = conv_output_len(h, kh, stride, padding).unwrap();
        let (ow, pl) = conv_output_len(wd, kw, stride, padding).unwrap();
        Tensor::from_fn([bn, oh, ow, f], |i| {
            let fo = i % f;
            let ox = (i / f) % ow;
            let oy = (i / f / ow) % oh;
            let bb = i / f / ow / oh;
            let mut acc = b[fo];
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    let ix = (ox * stride + kx) as isize - pl as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    for ch in 0..c {
                        acc += x.at(&[bb, iy as usize, ix as usize, ch]) * w.at(&[ky, kx, ch, fo]);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn same_and_valid_lengths() {
        assert_eq!(conv_output_len(28, 3, 2, Padding::Same).unwrap(), (14, 0));
        assert_eq!(conv_output_len(14, 3, 2, Padding::Same).unwrap(), (7, 0));
        assert_eq!(conv_output_len(28, 3, 1, Padding::Same).unwrap(), (28, 1));
        assert_eq!(conv_output_len(3, 2, 1, Padding::Valid).unwrap(), (2, 0));
        assert!(matches!(conv_output_len(2, 3, 1, Padding::Valid), Err(TensorError::KernelTooLarge { .. })));
    }

    #[test]
    fn scaling_kernel() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([1, 3, 3, 1]));
        let w = tape.leaf(Tensor::full([1, 1, 1, 1], 2.0));
        let b = tape.leaf(Tensor::zeros([1]));
        let y = x.conv2d(w, b, 1, Padding::Valid).unwrap().value();
        assert_eq!(y.data(), &[2.0; 9]);
    }

    #[test]
    fn delta_kernel_same_padding_is_identity() {
        let tape = Tape::<f64>::new();
        let xv = Tensor::from_fn([2, 5, 4, 1], |i| (i as f64 * 0.37).sin());
        let x = tape.leaf(xv.clone());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.leaf(Tensor::new([3, 3, 1, 1], k).unwrap());
        let b = tape.leaf(Tensor::zeros([1]));
        let y = x.conv2d(w, b, 1, Padding::Same).unwrap().value();
        assert_eq!(y, xv);
    }

    #[test]
    fn hand_case_valid() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([1, 3, 3, 1], |i| i as f64 + 1.0));
        let w = tape.leaf(Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros([1]));
        let y = x.conv2d(w, b, 1, Padding::Valid).unwrap().value();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn matches_naive_oracle_multichannel_strided() {
        let tape = Tape::<f64>::new();
        let xv = Tensor::from_fn([2, 7, 6, 3], |i| ((i * 37) % 17) as f64 / 17.0 - 0.5);
        let wv = Tensor::from_fn([3, 3, 3, 4], |i| ((i * 11) % 13) as f64 / 13.0 - 0.5);
        let bv = vec![0.1, -0.2, 0.3, 0.0];
        for (stride, pad) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)] {
            let y = tape
                .leaf(xv.clone())
                .conv2d(tape.leaf(wv.clone()), tape.leaf(Tensor::new([4], bv.clone()).unwrap()), stride, pad)
                .unwrap()
                .value();
            let oracle = naive_conv(&xv, &wv, &bv, stride, pad);
            assert_eq!(y.shape(), oracle.shape());
            assert!(y.max_abs_diff(&oracle).unwrap() < 1e-12, "stride {stride} {pad:?}");
        }
    }

    #[test]
    fn conv_errors() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 2, 2, 1]));
        let w = tape.leaf(Tensor::zeros([3, 3, 1, 1]));
        let b = tape.leaf(Tensor::zeros([1]));
        assert!(matches!(x.conv2d(w, b, 1, Padding::Valid), Err(TensorError::KernelTooLarge { .. })));
        let w2 = tape.leaf(Tensor::zeros([1, 1, 2, 1]));
        assert!(matches!(x.conv2d(w2, b, 1, Padding::Valid), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn maxpool_cases() {
        let tape = Tape::<f64>::new();
        let c = tape.leaf(Tensor::full([1, 5, 5, 2], 0.7));
        let y = c.maxpool2d(3, 2, Padding::Same).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.7));

        let x = tape.leaf(Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(x.maxpool2d(2, 2, Padding::Valid).unwrap().value().data(), &[4.0]);

        // 4x4 ramp, pool 3 stride 2 same: output 2x2, pad 0 before / 1 after.
        // Windows: rows {0,1,2} or {2,3}, cols likewise; max at bottom-right.
        let ramp = tape.leaf(Tensor::from_fn([1, 4, 4, 1], |i| i as f64));
        let y = ramp.maxpool2d(3, 2, Padding::Same).unwrap().value();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[10.0, 11.0, 14.0, 15.0]);

        let xv = Tensor::from_fn([1, 3, 4, 2], |i| (i as f64 * 1.3).sin());
        let id = tape.leaf(xv.clone()).maxpool2d(1, 1, Padding::Valid).unwrap().value();
        assert_eq!(id, xv);
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 2, 2, 1], 1.0));
        let y = x.maxpool2d(2, 2, Padding::Valid).unwrap();
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
