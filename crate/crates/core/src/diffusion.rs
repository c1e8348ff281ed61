//! Denoising diffusion over images: noise schedule, a small residual U-Net
//! noise predictor, its training loss, and ancestral sampling.
//!
//! Conventions: timesteps run `1..=T`; `alpha_bar(0) = 1`. The forward
//! marginal is `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
//! The reverse step uses the posterior standard deviation
//! `sigma_t = sqrt(beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t))`,
//! which is exactly zero at `t = 1`. Schedule constants are computed and
//! stored in f64 and narrowed at the point of use.

use crate::error::CoreError;
use crate::nn::{Conv2d, Dense, ParamSet};
use crate::rng::normal_array;
use crate::scalar::{sc, Scalar};
use crate::tensor::{Param, Session, Tape, Var};
use crate::Result;
use ndarray::ArrayD;
use rand::{Rng, RngExt};

/// Precomputed schedule constants.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t in 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
    /// Posterior std per timestep, `sigmas[t]` for `t in 1..=T`.
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Variances interpolated linearly from `beta_start` to `beta_end`.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(CoreError::InvalidParameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(CoreError::InvalidParameter(format!(
                "variances must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_steps + 1);
        alpha_bars.push(1.0);
        let mut running = 1.0;
        for &b in &betas {
            running *= 1.0 - b;
            alpha_bars.push(running);
        }
        let sigmas: Vec<f64> = (1..=t_steps)
            .map(|t| {
                (betas[t - 1] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t])).sqrt()
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars, sigmas })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(CoreError::TimestepOutOfRange { t, t_max: self.t_max() });
        }
        Ok(())
    }

    /// `beta_t`, valid for `t in 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t`, valid for `t in 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior std `sigma_t`, valid for `t in 1..=T`; `sigma_1 = 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Coefficients `(a, b)` of the posterior mean `a x_t + b x_0`.
    pub fn posterior_mean_coeffs(&self, t: usize) -> (f64, f64) {
        let alpha_t = 1.0 - self.beta(t);
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let a = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let b = ab_prev.sqrt() * self.beta(t) / (1.0 - ab_t);
        (a, b)
    }

    /// Forward marginal draw `x_t` from `x_0` and a noise realization.
    pub fn q_sample<S: Scalar>(
        &self,
        x0: &ArrayD<S>,
        t: usize,
        eps: &ArrayD<S>,
    ) -> Result<ArrayD<S>> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(CoreError::shape_mismatch(format!("{:?}", x0.shape()), eps.shape()));
        }
        let ab = self.alpha_bar(t);
        let (ca, cb) = (sc::<S>(ab.sqrt()), sc::<S>((1.0 - ab).sqrt()));
        Ok(ndarray::Zip::from(x0).and(eps).map_collect(|&x, &e| ca * x + cb * e))
    }

    /// Inverts the forward marginal at `t` given a noise estimate.
    pub fn predict_x0<S: Scalar>(
        &self,
        xt: &ArrayD<S>,
        t: usize,
        eps_hat: &ArrayD<S>,
    ) -> Result<ArrayD<S>> {
        self.check_t(t)?;
        if xt.shape() != eps_hat.shape() {
            return Err(CoreError::shape_mismatch(format!("{:?}", xt.shape()), eps_hat.shape()));
        }
        let ab = self.alpha_bar(t);
        let inv = 1.0 / ab.sqrt();
        let (ca, cb) = (sc::<S>(inv), sc::<S>((1.0 - ab).sqrt() * inv));
        Ok(ndarray::Zip::from(xt).and(eps_hat).map_collect(|&x, &e| ca * x - cb * e))
    }

    /// Tape version of [`predict_x0`]; `t` must already be validated.
    pub fn predict_x0_var<'t, S: Scalar>(
        &self,
        xt: Var<'t, S>,
        eps_hat: Var<'t, S>,
        t: usize,
    ) -> Var<'t, S> {
        let ab = self.alpha_bar(t);
        let inv = 1.0 / ab.sqrt();
        xt.scale(sc(inv)) - eps_hat.scale(sc((1.0 - ab).sqrt() * inv))
    }

    /// One ancestral step: posterior mean plus `sigma_t z`.
    pub fn posterior_step<S: Scalar>(
        &self,
        xt: &ArrayD<S>,
        x0: &ArrayD<S>,
        t: usize,
        z: &ArrayD<S>,
    ) -> Result<ArrayD<S>> {
        self.check_t(t)?;
        let (a, b) = self.posterior_mean_coeffs(t);
        let (a, b, s) = (sc::<S>(a), sc::<S>(b), sc::<S>(self.sigma(t)));
        let mut out = ndarray::Zip::from(xt).and(x0).map_collect(|&x, &x0v| a * x + b * x0v);
        ndarray::Zip::from(&mut out).and(z).for_each(|o, &zv| *o += s * zv);
        Ok(out)
    }
}

/// Sinusoidal features of a timestep, the denoiser's time input.
pub fn time_embedding<S: Scalar>(t: usize, dim: usize) -> ArrayD<S> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even and >= 2");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (-(10_000f64.ln()) * i as f64 / denom).exp();
        let angle = t as f64 * freq;
        out.push(sc::<S>(angle.sin()));
        out.push(sc::<S>(angle.cos()));
    }
    ArrayD::from_shape_vec(vec![dim], out).expect("embedding shape")
}

/// Pre-activation residual block with a per-channel time-embedding bias.
/// The second convolution starts zeroed, so a fresh block is an identity
/// (plus channel projection when widths differ).
pub struct ResBlock<S: Scalar> {
    conv1: Conv2d<S>,
    conv2: Conv2d<S>,
    emb: Dense<S>,
    skip: Option<Conv2d<S>>,
}

impl<S: Scalar> ResBlock<S> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        emb_c: usize,
    ) -> Self {
        ResBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), rng, in_c, out_c, 3, 1, 1),
            conv2: Conv2d::zeroed(&format!("{name}.conv2"), out_c, out_c, 3, 1, 1),
            emb: Dense::new(&format!("{name}.emb"), rng, emb_c, out_c),
            skip: (in_c != out_c)
                .then(|| Conv2d::new(&format!("{name}.skip"), rng, in_c, out_c, 1, 1, 0)),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, S>, x: Var<'t, S>, e: Var<'t, S>) -> Var<'t, S> {
        let h = self.conv1.forward(s, x.silu());
        let h = h.add_channel_bias(self.emb.forward(s, e));
        let h = self.conv2.forward(s, h.silu());
        let base = match &self.skip {
            Some(p) => p.forward(s, x),
            None => x,
        };
        base + h
    }
}

impl<S: Scalar> ParamSet<S> for ResBlock<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.emb.visit(f);
        if let Some(p) = &self.skip {
            p.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.emb.visit_mut(f);
        if let Some(p) = &mut self.skip {
            p.visit_mut(f);
        }
    }
}

/// Architecture knobs for the noise predictor.
#[derive(Debug, Clone)]
pub struct DenoiserArch {
    /// Image channels.
    pub channels: usize,
    /// Width at full resolution; doubles at each of the two downsamplings.
    pub base: usize,
    /// Sinusoidal embedding size (even).
    pub emb_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch { channels: 3, base: 16, emb_dim: 32 }
    }
}

/// Noise predictor `eps_hat(x_t, t)`: a three-scale residual U-Net with
/// nearest-neighbor upsampling and additive skip connections. Its output
/// layer starts zeroed, so the initial prediction is identically zero.
pub struct Denoiser<S: Scalar> {
    pub arch: DenoiserArch,
    emb1: Dense<S>,
    emb2: Dense<S>,
    conv_in: Conv2d<S>,
    rb_down1: ResBlock<S>,
    down1: Conv2d<S>,
    rb_down2: ResBlock<S>,
    down2: Conv2d<S>,
    rb_mid: ResBlock<S>,
    up1: Conv2d<S>,
    rb_up1: ResBlock<S>,
    up2: Conv2d<S>,
    rb_up2: ResBlock<S>,
    conv_out: Conv2d<S>,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, rng: &mut R, arch: DenoiserArch) -> Self {
        let (c, b) = (arch.channels, arch.base);
        let e = arch.emb_dim * 2;
        Denoiser {
            emb1: Dense::new(&format!("{name}.emb1"), rng, arch.emb_dim, e),
            emb2: Dense::new(&format!("{name}.emb2"), rng, e, e),
            conv_in: Conv2d::new(&format!("{name}.conv_in"), rng, c, b, 3, 1, 1),
            rb_down1: ResBlock::new(&format!("{name}.rb_down1"), rng, b, b, e),
            down1: Conv2d::new(&format!("{name}.down1"), rng, b, 2 * b, 3, 2, 1),
            rb_down2: ResBlock::new(&format!("{name}.rb_down2"), rng, 2 * b, 2 * b, e),
            down2: Conv2d::new(&format!("{name}.down2"), rng, 2 * b, 4 * b, 3, 2, 1),
            rb_mid: ResBlock::new(&format!("{name}.rb_mid"), rng, 4 * b, 4 * b, e),
            up1: Conv2d::new(&format!("{name}.up1"), rng, 4 * b, 2 * b, 3, 1, 1),
            rb_up1: ResBlock::new(&format!("{name}.rb_up1"), rng, 2 * b, 2 * b, e),
            up2: Conv2d::new(&format!("{name}.up2"), rng, 2 * b, b, 3, 1, 1),
            rb_up2: ResBlock::new(&format!("{name}.rb_up2"), rng, b, b, e),
            conv_out: Conv2d::zeroed(&format!("{name}.conv_out"), b, c, 3, 1, 1),
            arch,
        }
    }

    /// Predicted noise for `x_t` at timestep `t`. Input spatial size must be
    /// divisible by 4 (two downsamplings).
    pub fn forward<'t>(&self, s: &Session<'t, S>, xt: Var<'t, S>, t: usize) -> Var<'t, S> {
        let e_raw = s.constant(time_embedding(t, self.arch.emb_dim));
        let e = self.emb2.forward(s, self.emb1.forward(s, e_raw).silu());
        let h0 = self.conv_in.forward(s, xt);
        let h1 = self.rb_down1.forward(s, h0, e);
        let h2 = self.rb_down2.forward(s, self.down1.forward(s, h1), e);
        let h3 = self.rb_mid.forward(s, self.down2.forward(s, h2), e);
        let u1 = self.up1.forward(s, h3.upsample_nearest(2)) + h2;
        let u1 = self.rb_up1.forward(s, u1, e);
        let u2 = self.up2.forward(s, u1.upsample_nearest(2)) + h1;
        let u2 = self.rb_up2.forward(s, u2, e);
        self.conv_out.forward(s, u2.silu())
    }
}

impl<S: Scalar> ParamSet<S> for Denoiser<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.emb1.visit(f);
        self.emb2.visit(f);
        self.conv_in.visit(f);
        self.rb_down1.visit(f);
        self.down1.visit(f);
        self.rb_down2.visit(f);
        self.down2.visit(f);
        self.rb_mid.visit(f);
        self.up1.visit(f);
        self.rb_up1.visit(f);
        self.up2.visit(f);
        self.rb_up2.visit(f);
        self.conv_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.emb1.visit_mut(f);
        self.emb2.visit_mut(f);
        self.conv_in.visit_mut(f);
        self.rb_down1.visit_mut(f);
        self.down1.visit_mut(f);
        self.rb_down2.visit_mut(f);
        self.down2.visit_mut(f);
        self.rb_mid.visit_mut(f);
        self.up1.visit_mut(f);
        self.rb_up1.visit_mut(f);
        self.up2.visit_mut(f);
        self.rb_up2.visit_mut(f);
        self.conv_out.visit_mut(f);
    }
}

/// Per-sample noise-prediction loss: mean squared error between the model's
/// prediction at a random-noised `x_t` and the noise that produced it.
pub fn eps_loss<'t, S: Scalar>(
    den: &Denoiser<S>,
    sched: &NoiseSchedule,
    sess: &Session<'t, S>,
    x0: &ArrayD<S>,
    t: usize,
    eps: &ArrayD<S>,
) -> Result<Var<'t, S>> {
    let xt = sched.q_sample(x0, t, eps)?;
    let pred = den.forward(sess, sess.constant(xt), t);
    Ok(pred.mse(sess.constant(eps.clone())))
}

/// Extra pull applied to each sampling step by a restoration method.
pub trait GuidanceHook<S: Scalar> {
    /// Builds the scalar residual whose gradient with respect to `x_t`
    /// steers the step. `x0_t` is the current clean-image estimate.
    fn residual<'t>(
        &self,
        sess: &Session<'t, S>,
        x_t: Var<'t, S>,
        x0_t: Var<'t, S>,
    ) -> Result<Var<'t, S>>;

    /// Step size multiplying the residual gradient at timestep `t`.
    fn step_size(&self, t: usize) -> S;
}

/// Ancestral sampling from pure noise, optionally steered by a guidance
/// hook. The RNG is consumed identically with and without a hook (one
/// initial draw plus one per step for `t > 1`), so guided and unguided
/// trajectories under the same seed share every noise realization.
///
/// `x0_range` projects the clean estimate onto the given interval before
/// it drives the posterior mean and any guidance, the usual guard in
/// ancestral-sampling implementations. Near `t = T` the division by
/// `sqrt(alpha_bar)` amplifies small noise-prediction errors into clean
/// estimates far outside the data range; left unprojected they pump energy
/// into the trajectory until it leaves the distribution the denoiser was
/// trained on. Pass `None` for the unprojected textbook step.
pub fn sample<S: Scalar, R: Rng + ?Sized>(
    den: &Denoiser<S>,
    sched: &NoiseSchedule,
    shape: &[usize],
    rng: &mut R,
    hook: Option<&dyn GuidanceHook<S>>,
    x0_range: Option<(S, S)>,
) -> Result<ArrayD<S>> {
    let mut x: ArrayD<S> = normal_array(rng, shape);
    for t in (1..=sched.t_max()).rev() {
        let z: Option<ArrayD<S>> = (t > 1).then(|| normal_array(rng, shape));
        x = sample_step(den, sched, x, t, z, hook, x0_range)?;
    }
    Ok(x)
}

/// One reverse step shared by both samplers; exposed for trajectory tests.
pub fn sample_step<S: Scalar>(
    den: &Denoiser<S>,
    sched: &NoiseSchedule,
    x: ArrayD<S>,
    t: usize,
    z: Option<ArrayD<S>>,
    hook: Option<&dyn GuidanceHook<S>>,
    x0_range: Option<(S, S)>,
) -> Result<ArrayD<S>> {
    sched.check_t(t)?;
    if let Some((lo, hi)) = x0_range {
        if !(lo < hi) {
            return Err(CoreError::InvalidParameter(format!(
                "clean-estimate range must satisfy lo < hi, got ({lo}, {hi})"
            )));
        }
    }
    let tape = Tape::new();
    let sess = Session::new(&tape, false);
    let xt = if hook.is_some() { sess.input(x.clone()) } else { sess.constant(x.clone()) };
    let eps = den.forward(&sess, xt, t);
    let mut x0t = sched.predict_x0_var(xt, eps, t);
    if let Some((lo, hi)) = x0_range {
        x0t = x0t.clamp(lo, hi);
    }
    let zeros;
    let z_ref = match &z {
        Some(z) => z,
        None => {
            zeros = ArrayD::zeros(x.shape());
            &zeros
        }
    };
    let mut next = sched.posterior_step(&x, &x0t.value(), t, z_ref)?;
    if let Some(h) = hook {
        let r = h.residual(&sess, xt, x0t)?;
        let mut store = tape.backward(r);
        let gx = store
            .take(xt.id())
            .ok_or_else(|| CoreError::InvalidParameter("guidance residual ignores x_t".into()))?;
        let step = h.step_size(t);
        ndarray::Zip::from(&mut next).and(&gx).for_each(|n, &g| *n = *n - step * g);
    }
    Ok(next)
}

/// Options for denoiser training.
#[derive(Debug, Clone)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Loss summary of a training run: `initial` averages the first few steps,
/// `last` averages the final tenth.
#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    pub initial: f64,
    pub last: f64,
}

pub(crate) fn summarize_losses(losses: &[f64]) -> TrainStats {
    assert!(!losses.is_empty());
    let head = losses.len().min(5);
    let tail = (losses.len() / 10).max(1);
    let initial = losses[..head].iter().sum::<f64>() / head as f64;
    let last = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
    TrainStats { initial, last }
}

/// Trains the noise predictor on a set of clean images with uniformly drawn
/// timesteps. Reports the per-step batch loss through `on_step`.
pub fn train_denoiser<S: Scalar, R: Rng + ?Sized>(
    den: &mut Denoiser<S>,
    sched: &NoiseSchedule,
    images: &[ArrayD<S>],
    cfg: &DiffusionTrainConfig,
    rng: &mut R,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<TrainStats> {
    if images.is_empty() {
        return Err(CoreError::InvalidParameter("denoiser training needs images".into()));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(CoreError::InvalidParameter("steps and batch must be positive".into()));
    }
    let mut opt = crate::nn::Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads: std::collections::HashMap<String, ArrayD<S>> = Default::default();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let img = &images[rng.random_range(0..images.len())];
            let t = rng.random_range(1..=sched.t_max());
            let eps: ArrayD<S> = normal_array(rng, img.shape());
            let tape = Tape::new();
            let sess = Session::new(&tape, true);
            let loss = eps_loss(den, sched, &sess, img, t, &eps)?;
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
        let scale = sc::<S>(1.0 / cfg.batch as f64);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        batch_loss /= cfg.batch as f64;
        if !batch_loss.is_finite() {
            return Err(CoreError::Diverged { step, loss: batch_loss });
        }
        opt.step(den, &grads);
        losses.push(batch_loss);
        on_step(step, batch_loss);
    }
    Ok(summarize_losses(&losses))
}
