//! Layers, initialization and the optimizer shared by every model here.
//!
//! Models are plain structs of [`Param`]s; they implement [`ParamSet`] so the
//! optimizer and the checkpoint code can walk their parameters by name
//! without knowing the architecture.

use crate::error::CoreError;
use crate::rng::uniform_array;
use crate::scalar::{sc, Scalar};
use crate::tensor::{Param, Session, Var};
use crate::Result;
use ndarray::ArrayD;
use rand::Rng;
use std::collections::HashMap;

/// Walks a model's parameters in a stable architecture-defined order.
pub trait ParamSet<S: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>));
}

/// Snapshot of all parameters, in visit order, for checkpointing.
pub fn named_params<S: Scalar>(model: &impl ParamSet<S>) -> Vec<(String, ArrayD<S>)> {
    let mut out = Vec::new();
    model.visit(&mut |p| out.push((p.name.clone(), p.value().clone())));
    out
}

/// Restores parameters from a name-keyed map. Every parameter must be
/// present with a matching shape; extra entries are rejected.
pub fn load_params<S: Scalar>(
    model: &mut impl ParamSet<S>,
    mut values: HashMap<String, ArrayD<S>>,
) -> Result<()> {
    let mut missing = Vec::new();
    model.visit_mut(&mut |p| match values.remove(&p.name) {
        Some(v) if v.shape() == p.value().shape() => p.set(v),
        Some(v) => missing.push(format!(
            "{}: shape {:?} does not match expected {:?}",
            p.name,
            v.shape(),
            p.value().shape()
        )),
        None => missing.push(format!("{}: absent", p.name)),
    });
    if !missing.is_empty() {
        return Err(CoreError::InvalidParameter(format!(
            "parameter restore failed: {}",
            missing.join("; ")
        )));
    }
    if !values.is_empty() {
        let mut extra: Vec<_> = values.into_keys().collect();
        extra.sort();
        return Err(CoreError::InvalidParameter(format!(
            "parameter restore failed: unexpected entries {extra:?}"
        )));
    }
    Ok(())
}

pub fn param_count<S: Scalar>(model: &impl ParamSet<S>) -> usize {
    let mut n = 0;
    model.visit(&mut |p| n += p.value().len());
    n
}

/// 2-D convolution layer. Weights and biases initialize uniformly in
/// `±1/sqrt(fan_in)`; the `zeroed` constructor is for output layers that
/// should start as the identity-on-nothing map.
pub struct Conv2d<S: Scalar> {
    pub w: Param<S>,
    pub b: Param<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        Conv2d {
            w: Param::new(format!("{name}.w"), uniform_array(rng, &[out_c, in_c, k, k], bound)),
            b: Param::new(format!("{name}.b"), uniform_array(rng, &[out_c], bound)),
            stride,
            pad,
        }
    }

    pub fn zeroed(name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: Param::new(format!("{name}.w"), ArrayD::zeros(vec![out_c, in_c, k, k])),
            b: Param::new(format!("{name}.b"), ArrayD::zeros(vec![out_c])),
            stride,
            pad,
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        x.conv2d(s.param(&self.w), s.param(&self.b), self.stride, self.pad)
    }
}

impl<S: Scalar> ParamSet<S> for Conv2d<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Fully connected layer on rank-1 vectors.
pub struct Dense<S: Scalar> {
    pub w: Param<S>,
    pub b: Param<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Dense {
            w: Param::new(format!("{name}.w"), uniform_array(rng, &[out_dim, in_dim], bound)),
            b: Param::new(format!("{name}.b"), uniform_array(rng, &[out_dim], bound)),
        }
    }

    pub fn zeroed(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Dense {
            w: Param::new(format!("{name}.w"), ArrayD::zeros(vec![out_dim, in_dim])),
            b: Param::new(format!("{name}.b"), ArrayD::zeros(vec![out_dim])),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        x.dense(s.param(&self.w), s.param(&self.b))
    }
}

impl<S: Scalar> ParamSet<S> for Dense<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Adam with bias correction. Moments are keyed by parameter name so the
/// optimizer survives checkpoint round trips of the model it drives.
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<String, ArrayD<S>>,
    v: HashMap<String, ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    /// Applies one update from name-keyed gradients. Parameters without a
    /// gradient entry are left untouched.
    pub fn step(&mut self, model: &mut impl ParamSet<S>, grads: &HashMap<String, ArrayD<S>>) {
        self.t += 1;
        let b1 = sc::<S>(self.beta1);
        let b2 = sc::<S>(self.beta2);
        let one_b1 = sc::<S>(1.0 - self.beta1);
        let one_b2 = sc::<S>(1.0 - self.beta2);
        let corr1 = sc::<S>(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let corr2 = sc::<S>(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lr = sc::<S>(self.lr);
        let eps = sc::<S>(self.eps);
        model.visit_mut(&mut |p| {
            let Some(g) = grads.get(&p.name) else { return };
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(g.shape()));
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(g.shape()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| *mv = b1 * *mv + one_b1 * gv);
            ndarray::Zip::from(&mut *v)
                .and(g)
                .for_each(|vv, &gv| *vv = b2 * *vv + one_b2 * gv * gv);
            let value = p.value_mut();
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv * corr1;
                    let vhat = vv * corr2;
                    *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}
