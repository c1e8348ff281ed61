//! Invertible lifting network that mimics the transmission degradation.
//!
//! Each level squeezes the image 2x2 into channels, splits it into a coarse
//! branch (the top-left subsample, `C` channels) and a detail branch (`3C`
//! channels), then runs alternating predict/update couplings:
//!
//! ```text
//! d <- d - P(c)        c <- c + U(d)
//! ```
//!
//! Whatever the coupling networks' weights, the map is exactly invertible by
//! reversing the order and flipping the signs. Training pushes the coarse
//! output of a clean image toward the pooled degraded observation, so the
//! detail branch learns to carry exactly what the channel destroys.
//!
//! Coupling networks end in a zeroed convolution, so a freshly built network
//! is the bare squeeze-and-split.

use crate::error::CoreError;
use crate::nn::{Adam, Conv2d, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{avg_pool2, Param, Session, Tape, Var};
use crate::Result;
use ndarray::{ArrayD, Ix3};
use rand::{Rng, RngExt};

/// Two-convolution coupling network, `in_c -> hidden -> out_c`, zero-initialized output.
///
/// The output is soft-limited to `±COUPLING_BOUND` by a scaled tanh. Small
/// corrections pass through almost unchanged, while inputs far outside the
/// training distribution saturate, so the coupling falls back toward the
/// plain lifting step (and its gradient toward zero) instead of
/// extrapolating wildly. Sampling feeds such inputs to the network long
/// before the trajectory resembles an image.
struct LiftBlock<S: Scalar> {
    conv1: Conv2d<S>,
    conv2: Conv2d<S>,
}

/// Soft output limit for coupling networks.
const COUPLING_BOUND: f64 = 0.5;

impl<S: Scalar> LiftBlock<S> {
    fn new<R: Rng + ?Sized>(
        name: &str,
        rng: &mut R,
        in_c: usize,
        hidden: usize,
        out_c: usize,
    ) -> Self {
        LiftBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), rng, in_c, hidden, 3, 1, 1),
            conv2: Conv2d::zeroed(&format!("{name}.conv2"), hidden, out_c, 3, 1, 1),
        }
    }

    fn forward<'t>(&self, s: &Session<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let raw = self.conv2.forward(s, self.conv1.forward(s, x).silu());
        let b = crate::scalar::sc::<S>(COUPLING_BOUND);
        raw.scale(S::one() / b).tanh().scale(b)
    }
}

impl<S: Scalar> ParamSet<S> for LiftBlock<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

/// One predict/update coupling pair.
struct LiftPair<S: Scalar> {
    predict: LiftBlock<S>,
    update: LiftBlock<S>,
}

impl<S: Scalar> ParamSet<S> for LiftPair<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.predict.visit(f);
        self.update.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.predict.visit_mut(f);
        self.update.visit_mut(f);
    }
}

/// Architecture knobs for the invertible network.
#[derive(Debug, Clone)]
pub struct InnArch {
    /// Image channels.
    pub channels: usize,
    /// Squeeze-and-lift levels; the coarse output lives at `1/2^levels` scale.
    pub levels: usize,
    /// Coupling pairs per level.
    pub pairs: usize,
    /// Hidden width of each coupling network.
    pub hidden: usize,
}

impl Default for InnArch {
    fn default() -> Self {
        InnArch { channels: 3, levels: 1, pairs: 2, hidden: 16 }
    }
}

/// Multi-level invertible lifting network.
pub struct Inn<S: Scalar> {
    pub arch: InnArch,
    levels: Vec<Vec<LiftPair<S>>>,
}

impl<S: Scalar> Inn<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, rng: &mut R, arch: InnArch) -> Self {
        assert!(arch.channels > 0 && arch.levels > 0 && arch.pairs > 0 && arch.hidden > 0);
        let c = arch.channels;
        let levels = (0..arch.levels)
            .map(|l| {
                (0..arch.pairs)
                    .map(|p| LiftPair {
                        predict: LiftBlock::new(
                            &format!("{name}.l{l}.p{p}.predict"),
                            rng,
                            c,
                            arch.hidden,
                            3 * c,
                        ),
                        update: LiftBlock::new(
                            &format!("{name}.l{l}.p{p}.update"),
                            rng,
                            3 * c,
                            arch.hidden,
                            c,
                        ),
                    })
                    .collect()
            })
            .collect();
        Inn { arch, levels }
    }

    /// Validates that an image shape fits this network's geometry.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let div = 1 << self.arch.levels;
        let ok = shape.len() == 3
            && shape[0] == self.arch.channels
            && shape[1] % div == 0
            && shape[2] % div == 0
            && shape[1] >= div
            && shape[2] >= div;
        if !ok {
            return Err(CoreError::shape_mismatch(
                format!(
                    "[{}, H, W] with H, W divisible by {div}",
                    self.arch.channels
                ),
                shape,
            ));
        }
        Ok(())
    }

    /// Decomposes an image into a coarse branch and one detail tensor per
    /// level (finest first). Detail `l` has shape `[3C, H/2^(l+1), W/2^(l+1)]`.
    pub fn forward<'t>(
        &self,
        s: &Session<'t, S>,
        x: Var<'t, S>,
    ) -> Result<(Var<'t, S>, Vec<Var<'t, S>>)> {
        self.check_input(&x.shape())?;
        let c_ch = self.arch.channels;
        let mut coarse = x;
        let mut details = Vec::with_capacity(self.arch.levels);
        for pairs in &self.levels {
            let sq = coarse.space_to_depth(2);
            let mut c = sq.slice_channels(0, c_ch);
            let mut d = sq.slice_channels(c_ch, 3 * c_ch);
            for pair in pairs {
                d = d - pair.predict.forward(s, c);
                c = c + pair.update.forward(s, d);
            }
            details.push(d);
            coarse = c;
        }
        Ok((coarse, details))
    }

    /// Exact inverse of [`Inn::forward`]: rebuilds an image from a coarse
    /// branch (possibly a substituted observation) and per-level details.
    pub fn inverse<'t>(
        &self,
        s: &Session<'t, S>,
        coarse: Var<'t, S>,
        details: &[Var<'t, S>],
    ) -> Result<Var<'t, S>> {
        if details.len() != self.arch.levels {
            return Err(CoreError::shape_mismatch(
                format!("{} detail tensors", self.arch.levels),
                details.len(),
            ));
        }
        let c_ch = self.arch.channels;
        let cs = coarse.shape();
        if cs.len() != 3 || cs[0] != c_ch {
            return Err(CoreError::shape_mismatch(format!("[{c_ch}, h, w] coarse"), cs));
        }
        let mut c = coarse;
        for (pairs, &dv) in self.levels.iter().zip(details.iter()).rev() {
            let want = [3 * c_ch, c.shape()[1], c.shape()[2]];
            if dv.shape() != want {
                return Err(CoreError::shape_mismatch(format!("{want:?} detail"), dv.shape()));
            }
            let mut d = dv;
            for pair in pairs.iter().rev() {
                c = c - pair.update.forward(s, d);
                d = d + pair.predict.forward(s, c);
            }
            c = c.concat_channels(d).depth_to_space(2);
        }
        Ok(c)
    }

    /// Value-level forward on a fresh inference tape.
    pub fn forward_values(&self, x: &ArrayD<S>) -> Result<(ArrayD<S>, Vec<ArrayD<S>>)> {
        let tape = Tape::new();
        let sess = Session::new(&tape, false);
        let (c, d) = self.forward(&sess, sess.constant(x.clone()))?;
        let dv = d.iter().map(|v| v.value().as_ref().clone()).collect();
        Ok((c.value().as_ref().clone(), dv))
    }

    /// Value-level inverse on a fresh inference tape.
    pub fn invert_values(&self, coarse: &ArrayD<S>, details: &[ArrayD<S>]) -> Result<ArrayD<S>> {
        let tape = Tape::new();
        let sess = Session::new(&tape, false);
        let c = sess.constant(coarse.clone());
        let d: Vec<_> = details.iter().map(|a| sess.constant(a.clone())).collect();
        Ok(self.inverse(&sess, c, &d)?.value().as_ref().clone())
    }
}

impl<S: Scalar> ParamSet<S> for Inn<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        for pairs in &self.levels {
            for p in pairs {
                p.visit(f);
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for pairs in &mut self.levels {
            for p in pairs {
                p.visit_mut(f);
            }
        }
    }
}

/// The coarse-scale view of an observation: average pooling by `2^levels`.
/// This is the target the coarse branch trains toward and the value swapped
/// in for it during guided sampling.
pub fn coarse_target<S: Scalar>(y: &ArrayD<S>, levels: usize) -> Result<ArrayD<S>> {
    let f = 1 << levels;
    let shape = y.shape().to_vec();
    if shape.len() != 3 || shape[1] % f != 0 || shape[2] % f != 0 {
        return Err(CoreError::shape_mismatch(
            format!("[C, H, W] with H, W divisible by {f}"),
            shape,
        ));
    }
    let v = y.view().into_dimensionality::<Ix3>().expect("rank 3");
    Ok(avg_pool2(&v, f).into_dyn())
}

/// Options for coarse-consistency training.
#[derive(Debug, Clone)]
pub struct InnTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Trains the network so the coarse branch of each clean image matches the
/// pooled degraded observation. `pairs` holds `(clean, degraded)` images.
pub fn train_inn<S: Scalar, R: Rng + ?Sized>(
    inn: &mut Inn<S>,
    pairs: &[(ArrayD<S>, ArrayD<S>)],
    cfg: &InnTrainConfig,
    rng: &mut R,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<crate::diffusion::TrainStats> {
    if pairs.is_empty() {
        return Err(CoreError::InvalidParameter("coarse-consistency training needs pairs".into()));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(CoreError::InvalidParameter("steps and batch must be positive".into()));
    }
    let levels = inn.arch.levels;
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads: std::collections::HashMap<String, ArrayD<S>> = Default::default();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let (x, y) = &pairs[rng.random_range(0..pairs.len())];
            let target = coarse_target(y, levels)?;
            let tape = Tape::new();
            let sess = Session::new(&tape, true);
            let (c, _) = inn.forward(&sess, sess.constant(x.clone()))?;
            let loss = c.mse(sess.constant(target));
            batch_loss += loss.item().to_f64_lossy();
            let mut store = tape.backward(loss);
            for (name, g) in sess.grads_by_name(&mut store) {
                match grads.get_mut(&name) {
                    Some(acc) => *acc += &g,
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        let scale = crate::scalar::sc::<S>(1.0 / cfg.batch as f64);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        batch_loss /= cfg.batch as f64;
        if !batch_loss.is_finite() {
            return Err(CoreError::Diverged { step, loss: batch_loss });
        }
        opt.step(inn, &grads);
        losses.push(batch_loss);
        on_step(step, batch_loss);
    }
    Ok(crate::diffusion::summarize_losses(&losses))
}
