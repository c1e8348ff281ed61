//! Differentiable tensor operations on [`Var`]. Each op computes its value
//! eagerly and, when a parent is tracked, records a closure that maps the
//! output gradient to parent gradients.
//!
//! Image ops expect `[C, H, W]`; vector ops expect rank 1. Reductions yield
//! a single-element rank-1 tensor so losses compose uniformly.

use super::{conv, BackwardFn, Var};
use crate::error::CoreError;
use crate::scalar::{sc, Scalar};
use crate::Result;
use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, Ix1, Ix2, Ix3, Ix4};

fn view3<S: Scalar>(a: &ArrayD<S>) -> ArrayView3<'_, S> {
    a.view().into_dimensionality::<Ix3>().expect("expected a [C,H,W] tensor")
}

fn view2<S: Scalar>(a: &ArrayD<S>) -> ArrayView2<'_, S> {
    a.view().into_dimensionality::<Ix2>().expect("expected a rank-2 tensor")
}

fn view1<S: Scalar>(a: &ArrayD<S>) -> ArrayView1<'_, S> {
    a.view().into_dimensionality::<Ix1>().expect("expected a rank-1 tensor")
}

fn view4<S: Scalar>(a: &ArrayD<S>) -> ArrayView4<'_, S> {
    a.view().into_dimensionality::<Ix4>().expect("expected a rank-4 tensor")
}

impl<'t, S: Scalar> Var<'t, S> {
    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t, S>) -> Var<'t, S> {
        assert!(std::ptr::eq(self.tape(), rhs.tape()), "vars from different tapes");
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = &*a * &*b;
        let (aid, atr) = (self.id(), self.tracked());
        let (bid, btr) = (rhs.id(), rhs.tracked());
        let backward: Option<BackwardFn<S>> = if atr || btr {
            Some(Box::new(move |g, store| {
                if atr {
                    store.accumulate(aid, &g * &*b);
                }
                if btr {
                    store.accumulate(bid, &g * &*a);
                }
            }))
        } else {
            None
        };
        self.tape().push(out, atr || btr, backward)
    }

    /// Multiplication by a compile-time-known scalar.
    pub fn scale(self, c: S) -> Var<'t, S> {
        let a = self.value();
        let out = a.mapv(|v| v * c);
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| store.accumulate(aid, g.mapv(|v| v * c))))
        } else {
            None
        };
        self.tape().push(out, atr, backward)
    }

    pub fn add_scalar(self, c: S) -> Var<'t, S> {
        let a = self.value();
        let out = a.mapv(|v| v + c);
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> =
            if atr { Some(Box::new(move |g, store| store.accumulate(aid, g))) } else { None };
        self.tape().push(out, atr, backward)
    }

    /// `x * sigmoid(x)`, the activation used by every network here.
    pub fn silu(self) -> Var<'t, S> {
        let a = self.value();
        let one = S::one();
        let sig = move |v: S| one / (one + (-v).exp());
        let out = a.mapv(|v| v * sig(v));
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                let mut gx = g;
                gx.zip_mut_with(&a, |gv, &x| {
                    let s = sig(x);
                    *gv = *gv * (s * (one + x * (one - s)));
                });
                store.accumulate(aid, gx);
            }))
        } else {
            None
        };
        self.tape().push(out, atr, backward)
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(self) -> Var<'t, S> {
        let a = self.value();
        let out = a.mapv(|v| v.tanh());
        let shared = out.clone();
        let one = S::one();
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                let mut gx = g;
                gx.zip_mut_with(&shared, |gv, &y| {
                    *gv = *gv * (one - y * y);
                });
                store.accumulate(aid, gx);
            }))
        } else {
            None
        };
        self.tape().push(out, atr, backward)
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient passes through inside
    /// the interval and is zero outside it, so clamped coordinates stop
    /// steering whatever loss sits above them.
    pub fn clamp(self, lo: S, hi: S) -> Var<'t, S> {
        let a = self.value();
        let out = a.mapv(|v| if v < lo { lo } else if v > hi { hi } else { v });
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                let mut gx = g;
                gx.zip_mut_with(&a, |gv, &x| {
                    if x < lo || x > hi {
                        *gv = S::zero();
                    }
                });
                store.accumulate(aid, gx);
            }))
        } else {
            None
        };
        self.tape().push(out, atr, backward)
    }

    /// Stops gradient flow: same value, constant node.
    pub fn detach(self) -> Var<'t, S> {
        self.tape().constant_shared(self.value())
    }

    pub fn sum(self) -> Var<'t, S> {
        let a = self.value();
        let total: S = a.iter().copied().sum();
        let shape = a.shape().to_vec();
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                store.accumulate(aid, ArrayD::from_elem(shape.as_slice(), g[[0]]));
            }))
        } else {
            None
        };
        self.tape().push(ArrayD::from_elem(vec![1], total), atr, backward)
    }

    pub fn mean(self) -> Var<'t, S> {
        let n = self.len();
        self.sum().scale(sc(1.0 / n as f64))
    }

    /// `sum(x^2)` fused into one node.
    pub fn sum_squares(self) -> Var<'t, S> {
        let a = self.value();
        let total: S = a.iter().map(|&v| v * v).sum();
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                let two_g = sc::<S>(2.0) * g[[0]];
                store.accumulate(aid, a.mapv(|v| v * two_g));
            }))
        } else {
            None
        };
        self.tape().push(ArrayD::from_elem(vec![1], total), atr, backward)
    }

    /// Mean squared difference against another var, as a `[1]` tensor.
    pub fn mse(self, rhs: Var<'t, S>) -> Var<'t, S> {
        let n = self.len();
        (self - rhs).sum_squares().scale(sc(1.0 / n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, S> {
        let a = self.value();
        let orig: Vec<usize> = a.shape().to_vec();
        assert_eq!(
            a.len(),
            shape.iter().product::<usize>(),
            "reshape {orig:?} -> {shape:?} changes element count"
        );
        let out = a
            .as_ref()
            .clone()
            .into_shape_with_order(shape)
            .expect("contiguous reshape");
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                store.accumulate(aid, g.into_shape_with_order(orig.as_slice()).expect("reshape"));
            }))
        } else {
            None
        };
        self.tape().push(out, atr, backward)
    }

    pub fn flatten(self) -> Var<'t, S> {
        let n = self.len();
        self.reshape(&[n])
    }

    /// Stacks `rhs` below `self` along the channel axis.
    pub fn concat_channels(self, rhs: Var<'t, S>) -> Var<'t, S> {
        assert!(std::ptr::eq(self.tape(), rhs.tape()), "vars from different tapes");
        let (a, b) = (self.value(), rhs.value());
        let (av, bv) = (view3(&a), view3(&b));
        let (c1, h, w) = av.dim();
        let (c2, h2, w2) = bv.dim();
        assert_eq!((h, w), (h2, w2), "concat spatial mismatch");
        let out = ndarray::concatenate(Axis(0), &[av, bv]).expect("concat");
        let (aid, atr) = (self.id(), self.tracked());
        let (bid, btr) = (rhs.id(), rhs.tracked());
        let backward: Option<BackwardFn<S>> = if atr || btr {
            Some(Box::new(move |g, store| {
                if atr {
                    store.accumulate(aid, g.slice(ndarray::s![0..c1, .., ..]).to_owned().into_dyn());
                }
                if btr {
                    store.accumulate(
                        bid,
                        g.slice(ndarray::s![c1..c1 + c2, .., ..]).to_owned().into_dyn(),
                    );
                }
            }))
        } else {
            None
        };
        self.tape().push(out.into_dyn(), atr || btr, backward)
    }

    /// Channels `start..start+len` of a `[C,H,W]` tensor.
    pub fn slice_channels(self, start: usize, len: usize) -> Var<'t, S> {
        let a = self.value();
        let av = view3(&a);
        let (c, h, w) = av.dim();
        assert!(start + len <= c, "slice {start}..{} out of {c} channels", start + len);
        let out = av.slice(ndarray::s![start..start + len, .., ..]).to_owned().into_dyn();
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                let mut gx = ArrayD::<S>::zeros(vec![c, h, w]);
                gx.slice_mut(ndarray::s![start..start + len, .., ..]).assign(&g);
                store.accumulate(aid, gx);
            }))
        } else {
            None
        };
        self.tape().push(out, atr, backward)
    }

    pub fn space_to_depth(self, b: usize) -> Var<'t, S> {
        let a = self.value();
        let out = conv::space_to_depth(&view3(&a), b).into_dyn();
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                store.accumulate(aid, conv::depth_to_space(&view3(&g), b).into_dyn());
            }))
        } else {
            None
        };
        self.tape().push(out, atr, backward)
    }

    pub fn depth_to_space(self, b: usize) -> Var<'t, S> {
        let a = self.value();
        let out = conv::depth_to_space(&view3(&a), b).into_dyn();
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                store.accumulate(aid, conv::space_to_depth(&view3(&g), b).into_dyn());
            }))
        } else {
            None
        };
        self.tape().push(out, atr, backward)
    }

    pub fn avg_pool(self, f: usize) -> Var<'t, S> {
        let a = self.value();
        let out = conv::avg_pool2(&view3(&a), f).into_dyn();
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                let inv = sc::<S>(1.0 / (f * f) as f64);
                let up = conv::upsample_nearest(&view3(&g), f).mapv(|v| v * inv);
                store.accumulate(aid, up.into_dyn());
            }))
        } else {
            None
        };
        self.tape().push(out, atr, backward)
    }

    pub fn upsample_nearest(self, f: usize) -> Var<'t, S> {
        let a = self.value();
        let out = conv::upsample_nearest(&view3(&a), f).into_dyn();
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                store.accumulate(aid, conv::block_sum(&view3(&g), f).into_dyn());
            }))
        } else {
            None
        };
        self.tape().push(out, atr, backward)
    }

    /// Spatial mean per channel: `[C,H,W] -> [C]`.
    pub fn global_mean_pool(self) -> Var<'t, S> {
        let a = self.value();
        let av = view3(&a);
        let (c, h, w) = av.dim();
        let inv = sc::<S>(1.0 / (h * w) as f64);
        let out: Vec<S> = (0..c)
            .map(|ch| av.index_axis(Axis(0), ch).iter().copied().sum::<S>() * inv)
            .collect();
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                let mut gx = ArrayD::<S>::zeros(vec![c, h, w]);
                for ch in 0..c {
                    let gv = g[[ch]] * inv;
                    gx.index_axis_mut(Axis(0), ch).fill(gv);
                }
                store.accumulate(aid, gx);
            }))
        } else {
            None
        };
        self.tape().push(ArrayD::from_shape_vec(vec![c], out).expect("pool shape"), atr, backward)
    }

    /// 2-D convolution, `x:[Ci,H,W] * w:[Co,Ci,Kh,Kw] + b:[Co]`.
    pub fn conv2d(self, w: Var<'t, S>, b: Var<'t, S>, stride: usize, pad: usize) -> Var<'t, S> {
        let (xa, wa, ba) = (self.value(), w.value(), b.value());
        let out = conv::conv2d_fwd(&view3(&xa), &view4(&wa), Some(&view1(&ba)), stride, pad);
        let (xid, xtr) = (self.id(), self.tracked());
        let (wid, wtr) = (w.id(), w.tracked());
        let (bid, btr) = (b.id(), b.tracked());
        let tracked = xtr || wtr || btr;
        let backward: Option<BackwardFn<S>> = if tracked {
            Some(Box::new(move |g, store| {
                let gv = view3(&g);
                let (co, oh, ow) = gv.dim();
                let gym = gv.to_shape((co, oh * ow)).expect("grad reshape");
                let xv = view3(&xa);
                let wv = view4(&wa);
                let (ci, h, wd) = xv.dim();
                let (_, _, kh, kw) = wv.dim();
                if wtr {
                    let cols = conv::im2col(&xv, kh, kw, stride, pad);
                    let gw = gym
                        .dot(&cols.t())
                        .into_shape_with_order((co, ci, kh, kw))
                        .expect("kernel grad");
                    store.accumulate(wid, gw.into_dyn());
                }
                if btr {
                    store.accumulate(bid, gym.sum_axis(Axis(1)).into_dyn());
                }
                if xtr {
                    let wm = wv.to_shape((co, ci * kh * kw)).expect("kernel reshape");
                    let gcols = wm.t().dot(&gym);
                    let gx = conv::col2im(&gcols.view(), ci, h, wd, kh, kw, stride, pad);
                    store.accumulate(xid, gx.into_dyn());
                }
            }))
        } else {
            None
        };
        self.tape().push(out.into_dyn(), tracked, backward)
    }

    /// Affine map, `x:[n] -> w:[m,n]*x + b:[m]`.
    pub fn dense(self, w: Var<'t, S>, b: Var<'t, S>) -> Var<'t, S> {
        let (xa, wa, ba) = (self.value(), w.value(), b.value());
        let (xv, wv, bv) = (view1(&xa), view2(&wa), view1(&ba));
        let (m, n) = wv.dim();
        assert_eq!(xv.len(), n, "dense input {} vs weight columns {n}", xv.len());
        assert_eq!(bv.len(), m, "dense bias {} vs weight rows {m}", bv.len());
        let out = (wv.dot(&xv) + bv).into_dyn();
        let (xid, xtr) = (self.id(), self.tracked());
        let (wid, wtr) = (w.id(), w.tracked());
        let (bid, btr) = (b.id(), b.tracked());
        let tracked = xtr || wtr || btr;
        let backward: Option<BackwardFn<S>> = if tracked {
            Some(Box::new(move |g, store| {
                if wtr {
                    let gm = view1(&g).insert_axis(Axis(1));
                    let xm = view1(&xa).insert_axis(Axis(0));
                    store.accumulate(wid, gm.dot(&xm).into_dyn());
                }
                if btr {
                    store.accumulate(bid, g.clone());
                }
                if xtr {
                    store.accumulate(xid, view2(&wa).t().dot(&view1(&g)).into_dyn());
                }
            }))
        } else {
            None
        };
        self.tape().push(out, tracked, backward)
    }

    /// Adds a per-channel bias to a `[C,H,W]` tensor.
    pub fn add_channel_bias(self, b: Var<'t, S>) -> Var<'t, S> {
        let (xa, ba) = (self.value(), b.value());
        let xv = view3(&xa);
        let bv = view1(&ba);
        let (c, _, _) = xv.dim();
        assert_eq!(bv.len(), c, "channel bias {} vs channels {c}", bv.len());
        let mut out = xv.to_owned();
        for (mut plane, &bc) in out.axis_iter_mut(Axis(0)).zip(bv.iter()) {
            plane.mapv_inplace(|v| v + bc);
        }
        let (xid, xtr) = (self.id(), self.tracked());
        let (bid, btr) = (b.id(), b.tracked());
        let tracked = xtr || btr;
        let backward: Option<BackwardFn<S>> = if tracked {
            Some(Box::new(move |g, store| {
                if btr {
                    let gv = view3(&g);
                    let gb: Vec<S> = gv
                        .axis_iter(Axis(0))
                        .map(|plane| plane.iter().copied().sum())
                        .collect();
                    store.accumulate(bid, ArrayD::from_shape_vec(vec![gb.len()], gb).expect("bias"));
                }
                if xtr {
                    store.accumulate(xid, g);
                }
            }))
        } else {
            None
        };
        self.tape().push(out.into_dyn(), tracked, backward)
    }

    /// Rescales a rank-1 vector so its squared norm equals `target_sq_norm`.
    /// Errors on an all-zero input.
    pub fn power_normalize(self, target_sq_norm: S) -> Result<Var<'t, S>> {
        let a = self.value();
        let av = view1(&a);
        let nsq: S = av.iter().map(|&v| v * v).sum();
        if nsq == S::zero() {
            return Err(CoreError::ZeroSignal);
        }
        if !target_sq_norm.is_finite() || target_sq_norm <= S::zero() {
            return Err(CoreError::InvalidParameter(format!(
                "target squared norm must be positive and finite, got {target_sq_norm}"
            )));
        }
        let norm = nsq.sqrt();
        let c = target_sq_norm.sqrt() / norm;
        let out = a.mapv(|v| v * c);
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                // y = s*x/|x|; dy/dx = (s/|x|)(I - xhat xhat^T).
                let xhat = a.mapv(|v| v / norm);
                let dot: S = xhat.iter().zip(g.iter()).map(|(&h, &gv)| h * gv).sum();
                let gx = ndarray::Zip::from(&g).and(&xhat).map_collect(|&gv, &h| c * (gv - h * dot));
                store.accumulate(aid, gx);
            }))
        } else {
            None
        };
        Ok(self.tape().push(out, atr, backward))
    }

    /// Softmax cross-entropy of rank-1 logits against a class index.
    pub fn cross_entropy_logits(self, class: usize) -> Var<'t, S> {
        let a = self.value();
        let av = view1(&a);
        let k = av.len();
        assert!(class < k, "class {class} out of {k} logits");
        let m = av.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = m + av.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
        let ce = lse - av[class];
        let (aid, atr) = (self.id(), self.tracked());
        let backward: Option<BackwardFn<S>> = if atr {
            Some(Box::new(move |g, store| {
                let g0 = g[[0]];
                let mut gx = a.mapv(|v| (v - lse).exp() * g0);
                gx[[class]] -= g0;
                store.accumulate(aid, gx);
            }))
        } else {
            None
        };
        self.tape().push(ArrayD::from_elem(vec![1], ce), atr, backward)
    }
}

macro_rules! binary_elementwise {
    ($trait:ident, $method:ident, $apply:expr, $ga:expr, $gb:expr) => {
        impl<'t, S: Scalar> std::ops::$trait for Var<'t, S> {
            type Output = Var<'t, S>;
            fn $method(self, rhs: Var<'t, S>) -> Var<'t, S> {
                assert!(std::ptr::eq(self.tape(), rhs.tape()), "vars from different tapes");
                let (a, b) = (self.value(), rhs.value());
                assert_eq!(a.shape(), b.shape(), concat!(stringify!($method), " shape mismatch"));
                let out = $apply(&*a, &*b);
                let (aid, atr) = (self.id(), self.tracked());
                let (bid, btr) = (rhs.id(), rhs.tracked());
                let backward: Option<BackwardFn<S>> = if atr || btr {
                    Some(Box::new(move |g: ArrayD<S>, store: &mut super::GradStore<S>| {
                        if btr {
                            store.accumulate(bid, $gb(&g));
                        }
                        if atr {
                            store.accumulate(aid, $ga(g));
                        }
                    }))
                } else {
                    None
                };
                self.tape().push(out, atr || btr, backward)
            }
        }
    };
}

binary_elementwise!(
    Add,
    add,
    |a: &ArrayD<S>, b: &ArrayD<S>| a + b,
    |g| g,
    |g: &ArrayD<S>| g.clone()
);
binary_elementwise!(
    Sub,
    sub,
    |a: &ArrayD<S>, b: &ArrayD<S>| a - b,
    |g| g,
    |g: &ArrayD<S>| g.mapv(|v: S| -v)
);
