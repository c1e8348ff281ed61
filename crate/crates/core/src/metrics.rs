//! Distortion and perceptual metrics.
//!
//! PSNR is computed on images mapped to `[0, 1]` (peak 1), clamping first.
//! The perceptual distance compares deep features of a small convolutional
//! classifier: at three depths, feature vectors are unit-normalized across
//! channels at each spatial position, and the squared differences are
//! averaged spatially and summed over depths. The extractor trains in-repo
//! on a self-labeled task (recognizing which synthetic degradation was
//! applied to an image), so it needs no external labels or weights.

use crate::error::CoreError;
use crate::nn::{Adam, Conv2d, Dense, ParamSet};
use crate::rng::normal_array;
use crate::scalar::{sc, Scalar};
use crate::tensor::{Param, Session, Tape, Var};
use crate::Result;
use ndarray::{ArrayD, Ix3};
use rand::{Rng, RngExt};

/// Maps `[-1, 1]` signal range to clamped `[0, 1]` display range. NaN
/// passes through so a diverged input cannot masquerade as a black pixel.
pub fn to_unit_range<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
    let (zero, one, half) = (S::zero(), S::one(), sc::<S>(0.5));
    x.mapv(|v| if v.is_nan() { v } else { ((v + one) * half).max(zero).min(one) })
}

/// Plain mean squared error between equal-shaped arrays.
pub fn mse<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CoreError::shape_mismatch(format!("{:?}", a.shape()), b.shape()));
    }
    let n = a.len().max(1);
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio in dB over `[0, 1]` images (inputs are clamped
/// to that range first, NaN preserved). Identical images yield
/// `f64::INFINITY`; any NaN input yields NaN.
pub fn psnr<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>) -> Result<f64> {
    let clamp = |x: &ArrayD<S>| {
        x.mapv(|v| if v.is_nan() { v } else { v.max(S::zero()).min(S::one()) })
    };
    let m = mse(&clamp(a), &clamp(b))?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Gaussian blur with replicate borders, separable passes. `sigma <= 0`
/// returns the input unchanged.
pub fn gaussian_blur<S: Scalar>(x: &ArrayD<S>, sigma: f64) -> ArrayD<S> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let v = x.view().into_dimensionality::<Ix3>().expect("blur expects [C,H,W]");
    let (c, h, w) = v.dim();
    let r = (2.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = weights.iter().sum();
    let weights: Vec<S> = weights.into_iter().map(|wv| sc(wv / norm)).collect();
    let mut tmp = ndarray::Array3::<S>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = S::zero();
                for (wi, &wt) in weights.iter().enumerate() {
                    let jj = (j as isize + wi as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += wt * v[(ch, i, jj)];
                }
                tmp[(ch, i, j)] = acc;
            }
        }
    }
    let mut out = ndarray::Array3::<S>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = S::zero();
                for (wi, &wt) in weights.iter().enumerate() {
                    let ii = (i as isize + wi as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += wt * tmp[(ch, ii, j)];
                }
                out[(ch, i, j)] = acc;
            }
        }
    }
    out.into_dyn()
}

/// Feature extractor geometry.
#[derive(Debug, Clone)]
pub struct ExtractorArch {
    pub channels: usize,
    /// Widths of the three stride-2 stages.
    pub widths: [usize; 3],
    pub classes: usize,
}

impl Default for ExtractorArch {
    fn default() -> Self {
        ExtractorArch { channels: 3, widths: [16, 32, 64], classes: DEGRADATION_CLASSES }
    }
}

/// Small convolutional classifier whose intermediate activations serve as
/// the perceptual feature space.
pub struct FeatureExtractor<S: Scalar> {
    pub arch: ExtractorArch,
    c1: Conv2d<S>,
    c2: Conv2d<S>,
    c3: Conv2d<S>,
    head: Dense<S>,
}

impl<S: Scalar> FeatureExtractor<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, rng: &mut R, arch: ExtractorArch) -> Self {
        let [w1, w2, w3] = arch.widths;
        FeatureExtractor {
            c1: Conv2d::new(&format!("{name}.c1"), rng, arch.channels, w1, 3, 2, 1),
            c2: Conv2d::new(&format!("{name}.c2"), rng, w1, w2, 3, 2, 1),
            c3: Conv2d::new(&format!("{name}.c3"), rng, w2, w3, 3, 2, 1),
            head: Dense::new(&format!("{name}.head"), rng, w3, arch.classes),
            arch,
        }
    }

    /// Activations at the three tap depths.
    pub fn features<'t>(&self, s: &Session<'t, S>, x: Var<'t, S>) -> [Var<'t, S>; 3] {
        let f1 = self.c1.forward(s, x).silu();
        let f2 = self.c2.forward(s, f1).silu();
        let f3 = self.c3.forward(s, f2).silu();
        [f1, f2, f3]
    }

    /// Class logits for the self-labeled degradation task.
    pub fn logits<'t>(&self, s: &Session<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let [_, _, f3] = self.features(s, x);
        self.head.forward(s, f3.global_mean_pool())
    }
}

impl<S: Scalar> ParamSet<S> for FeatureExtractor<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.c1.visit(f);
        self.c2.visit(f);
        self.c3.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
        self.c3.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Per-position unit normalization across channels, then mean squared
/// difference per layer, summed over the three layers.
pub fn perceptual_distance<S: Scalar>(
    ext: &FeatureExtractor<S>,
    a: &ArrayD<S>,
    b: &ArrayD<S>,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CoreError::shape_mismatch(format!("{:?}", a.shape()), b.shape()));
    }
    let tape = Tape::new();
    let sess = Session::new(&tape, false);
    let fa = ext.features(&sess, sess.constant(a.clone()));
    let fb = ext.features(&sess, sess.constant(b.clone()));
    let mut total = 0.0;
    for (va, vb) in fa.iter().zip(fb.iter()) {
        let na = unit_normalize_channels(&va.value());
        let nb = unit_normalize_channels(&vb.value());
        let (c, h, w) = na.dim();
        let mut acc = 0.0;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let d = (na[(ch, i, j)] - nb[(ch, i, j)]).to_f64_lossy();
                    acc += d * d;
                }
            }
        }
        total += acc / (h * w) as f64;
    }
    Ok(total)
}

fn unit_normalize_channels<S: Scalar>(f: &ArrayD<S>) -> ndarray::Array3<S> {
    let v = f.view().into_dimensionality::<Ix3>().expect("features are [C,H,W]");
    let (c, h, w) = v.dim();
    let eps = sc::<S>(1e-10);
    let mut out = ndarray::Array3::<S>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut nsq = S::zero();
            for ch in 0..c {
                let x = v[(ch, i, j)];
                nsq += x * x;
            }
            let inv = S::one() / (nsq + eps).sqrt();
            for ch in 0..c {
                out[(ch, i, j)] = v[(ch, i, j)] * inv;
            }
        }
    }
    out
}

/// Number of self-labeled degradation classes.
pub const DEGRADATION_CLASSES: usize = 5;

/// Applies the degradation for a class label: 0 clean, 1 and 2 additive
/// Gaussian noise of increasing strength, 3 and 4 Gaussian blur of
/// increasing radius.
pub fn degrade_for_class<S: Scalar, R: Rng + ?Sized>(
    x: &ArrayD<S>,
    class: usize,
    rng: &mut R,
) -> Result<ArrayD<S>> {
    match class {
        0 => Ok(x.clone()),
        1 | 2 => {
            let sigma = if class == 1 { 0.08 } else { 0.25 };
            let noise: ArrayD<S> = normal_array(rng, x.shape());
            let s = sc::<S>(sigma);
            Ok(ndarray::Zip::from(x).and(&noise).map_collect(|&v, &n| v + s * n))
        }
        3 | 4 => Ok(gaussian_blur(x, if class == 3 { 0.8 } else { 1.6 })),
        _ => Err(CoreError::InvalidParameter(format!(
            "degradation class {class} out of 0..{DEGRADATION_CLASSES}"
        ))),
    }
}

/// Options for extractor training.
#[derive(Debug, Clone)]
pub struct ExtractorTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Trains the classifier to recognize which degradation was applied. Labels
/// are generated on the fly, so any image set works.
pub fn train_extractor<S: Scalar, R: Rng + ?Sized>(
    ext: &mut FeatureExtractor<S>,
    images: &[ArrayD<S>],
    cfg: &ExtractorTrainConfig,
    rng: &mut R,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<crate::diffusion::TrainStats> {
    if images.is_empty() {
        return Err(CoreError::InvalidParameter("extractor training needs images".into()));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(CoreError::InvalidParameter("steps and batch must be positive".into()));
    }
    let classes = ext.arch.classes.min(DEGRADATION_CLASSES);
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads: std::collections::HashMap<String, ArrayD<S>> = Default::default();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let img = &images[rng.random_range(0..images.len())];
            let class = rng.random_range(0..classes);
            let degraded = degrade_for_class(img, class, rng)?;
            let tape = Tape::new();
            let sess = Session::new(&tape, true);
            let loss = ext.logits(&sess, sess.constant(degraded)).cross_entropy_logits(class);
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
        opt.step(ext, &grads);
        losses.push(batch_loss);
        on_step(step, batch_loss);
    }
    Ok(crate::diffusion::summarize_losses(&losses))
}
