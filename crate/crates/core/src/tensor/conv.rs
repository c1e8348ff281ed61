//! Dense kernels behind the tape ops: im2col convolution, block reshuffles,
//! pooling. Pure functions on array views; the tape ops in `ops` wire them
//! together with their adjoints.
//!
//! Image tensors are `[channels, height, width]` in C order throughout.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel larger than padded input");
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds `x` into a `[ci*kh*kw, oh*ow]` patch matrix with zero padding.
pub fn im2col<S: Scalar>(
    x: &ArrayView3<'_, S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<S> {
    let (ci, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<S>::zeros((ci * kh * kw, oh * ow));
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let mut row_view = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row_view[oy * ow + ox] = x[(c, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto an image.
pub fn col2im<S: Scalar>(
    cols: &ArrayView2<'_, S>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<S> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    assert_eq!(cols.dim(), (ci * kh * kw, oh * ow), "col2im shape mismatch");
    let mut x = Array3::<S>::zeros((ci, h, w));
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let row_view = cols.row(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(c, iy as usize, ix as usize)] += row_view[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// `y[o] = sum_i W[o,i,:,:] * patch_i + b[o]`, via im2col and one matmul.
pub fn conv2d_fwd<S: Scalar>(
    x: &ArrayView3<'_, S>,
    w: &ArrayView4<'_, S>,
    b: Option<&ArrayView1<'_, S>>,
    stride: usize,
    pad: usize,
) -> Array3<S> {
    let (ci, h, wd) = x.dim();
    let (co, wci, kh, kw) = w.dim();
    assert_eq!(ci, wci, "conv input channels {ci} vs kernel {wci}");
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(wd, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let wm = w.to_shape((co, ci * kh * kw)).expect("kernel reshape");
    let mut y = wm.dot(&cols);
    if let Some(b) = b {
        for (mut row, &bo) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row.mapv_inplace(|v| v + bo);
        }
    }
    y.into_shape_with_order((co, oh, ow)).expect("conv output reshape")
}

/// Gradients of [`conv2d_fwd`] with respect to input, kernel and bias.
pub fn conv2d_bwd<S: Scalar>(
    x: &ArrayView3<'_, S>,
    w: &ArrayView4<'_, S>,
    gy: &ArrayView3<'_, S>,
    stride: usize,
    pad: usize,
) -> (Array3<S>, ndarray::Array4<S>, Array1<S>) {
    let (ci, h, wd) = x.dim();
    let (co, _, kh, kw) = w.dim();
    let (gco, oh, ow) = gy.dim();
    assert_eq!(gco, co, "conv grad channels");
    let gym = gy.to_shape((co, oh * ow)).expect("grad reshape");
    // Patches are recomputed here rather than kept from the forward pass;
    // the matmuls dominate anyway and the tape stays small.
    let cols = im2col(x, kh, kw, stride, pad);
    let gw = gym
        .dot(&cols.t())
        .into_shape_with_order((co, ci, kh, kw))
        .expect("kernel grad reshape");
    let gb = gym.sum_axis(Axis(1));
    let wm = w.to_shape((co, ci * kh * kw)).expect("kernel reshape");
    let gcols = wm.t().dot(&gym);
    let gx = col2im(&gcols.view(), ci, h, wd, kh, kw, stride, pad);
    (gx, gw, gb)
}

/// `[C,H,W] -> [C*b^2, H/b, W/b]`. Output channel `o*C + c` holds input
/// channel `c` sampled at block offset `o = oy*b + ox`, so the first `C`
/// output channels are the top-left subsample of the input.
pub fn space_to_depth<S: Scalar>(x: &ArrayView3<'_, S>, b: usize) -> Array3<S> {
    let (c, h, w) = x.dim();
    assert!(b > 0 && h % b == 0 && w % b == 0, "block {b} must divide {h}x{w}");
    let (oh, ow) = (h / b, w / b);
    let mut y = Array3::<S>::zeros((c * b * b, oh, ow));
    for oy in 0..b {
        for ox in 0..b {
            let o = oy * b + ox;
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        y[(o * c + ch, i, j)] = x[(ch, i * b + oy, j * b + ox)];
                    }
                }
            }
        }
    }
    y
}

/// Inverse (and adjoint) of [`space_to_depth`].
pub fn depth_to_space<S: Scalar>(x: &ArrayView3<'_, S>, b: usize) -> Array3<S> {
    let (cb, oh, ow) = x.dim();
    assert!(b > 0 && cb % (b * b) == 0, "channels {cb} not divisible by {}", b * b);
    let c = cb / (b * b);
    let mut y = Array3::<S>::zeros((c, oh * b, ow * b));
    for oy in 0..b {
        for ox in 0..b {
            let o = oy * b + ox;
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        y[(ch, i * b + oy, j * b + ox)] = x[(o * c + ch, i, j)];
                    }
                }
            }
        }
    }
    y
}

/// Mean over non-overlapping `f x f` blocks.
pub fn avg_pool2<S: Scalar>(x: &ArrayView3<'_, S>, f: usize) -> Array3<S> {
    let (c, h, w) = x.dim();
    assert!(f > 0 && h % f == 0 && w % f == 0, "pool factor {f} must divide {h}x{w}");
    let (oh, ow) = (h / f, w / f);
    let inv = S::from_f64_lossy(1.0 / (f * f) as f64);
    let mut y = Array3::<S>::zeros((c, oh, ow));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = S::zero();
                for di in 0..f {
                    for dj in 0..f {
                        acc += x[(ch, i * f + di, j * f + dj)];
                    }
                }
                y[(ch, i, j)] = acc * inv;
            }
        }
    }
    y
}

/// Repeats each pixel into an `f x f` block.
pub fn upsample_nearest<S: Scalar>(x: &ArrayView3<'_, S>, f: usize) -> Array3<S> {
    let (c, h, w) = x.dim();
    assert!(f > 0);
    let mut y = Array3::<S>::zeros((c, h * f, w * f));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(ch, i, j)];
                for di in 0..f {
                    for dj in 0..f {
                        y[(ch, i * f + di, j * f + dj)] = v;
                    }
                }
            }
        }
    }
    y
}

/// Sum over non-overlapping blocks; adjoint of [`upsample_nearest`].
pub fn block_sum<S: Scalar>(x: &ArrayView3<'_, S>, f: usize) -> Array3<S> {
    let (c, h, w) = x.dim();
    assert!(f > 0 && h % f == 0 && w % f == 0);
    let (oh, ow) = (h / f, w / f);
    let mut y = Array3::<S>::zeros((c, oh, ow));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = S::zero();
                for di in 0..f {
                    for dj in 0..f {
                        acc += x[(ch, i * f + di, j * f + dj)];
                    }
                }
                y[(ch, i, j)] = acc;
            }
        }
    }
    y
}
