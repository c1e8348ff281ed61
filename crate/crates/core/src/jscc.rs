//! Learned joint source-channel coding of images.
//!
//! The encoder maps an image straight to `2k` reals, power-normalized into
//! `k` unit-average-power complex symbols; the decoder maps the noisy
//! symbols back to an image. Both are trained jointly end to end through the
//! channel on reconstruction error, with the training SNR redrawn uniformly
//! per batch so one codec covers the whole operating range.

use crate::channel::{awgn_noise, noise_sigma_sq};
use crate::error::CoreError;
use crate::nn::{Adam, Conv2d, Dense, ParamSet};
use crate::scalar::{sc, Scalar};
use crate::tensor::{Param, Session, Tape, Var};
use crate::Result;
use ndarray::ArrayD;
use rand::{Rng, RngExt};

/// Geometry and capacity of the codec.
#[derive(Debug, Clone)]
pub struct JsccArch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Complex channel symbols per image.
    pub symbols: usize,
    /// Encoder base width; the decoder mirrors it.
    pub base: usize,
    /// Average power constraint per complex symbol.
    pub avg_power: f64,
}

impl JsccArch {
    pub fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            return Err(CoreError::InvalidParameter(format!(
                "image size {}x{} must be divisible by 8",
                self.height, self.width
            )));
        }
        if self.symbols == 0 || self.channels == 0 || self.base == 0 {
            return Err(CoreError::InvalidParameter(
                "symbols, channels and base width must be positive".into(),
            ));
        }
        if !(self.avg_power.is_finite() && self.avg_power > 0.0) {
            return Err(CoreError::InvalidParameter(format!(
                "average power must be positive, got {}",
                self.avg_power
            )));
        }
        Ok(())
    }

    /// Source dimensions per image.
    pub fn source_dims(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Channel uses per source dimension.
    pub fn bandwidth_ratio(&self) -> f64 {
        crate::channel::bandwidth_ratio(self.source_dims(), self.symbols)
    }

    fn bottleneck(&self) -> (usize, usize, usize) {
        (2 * self.base, self.height / 8, self.width / 8)
    }
}

/// Image to `2k` power-normalized reals: three stride-2 convolutions and a
/// dense head.
pub struct Encoder<S: Scalar> {
    c1: Conv2d<S>,
    c2: Conv2d<S>,
    c3: Conv2d<S>,
    head: Dense<S>,
}

/// `2k` reals back to an image: dense stem, three upsampling convolutions,
/// and a linear output convolution.
pub struct Decoder<S: Scalar> {
    head: Dense<S>,
    u1: Conv2d<S>,
    u2: Conv2d<S>,
    u3: Conv2d<S>,
    out: Conv2d<S>,
}

/// Encoder/decoder pair with its geometry.
pub struct Jscc<S: Scalar> {
    pub arch: JsccArch,
    enc: Encoder<S>,
    dec: Decoder<S>,
}

impl<S: Scalar> Jscc<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, rng: &mut R, arch: JsccArch) -> Result<Self> {
        arch.validate()?;
        let (c, b) = (arch.channels, arch.base);
        let (bc, bh, bw) = arch.bottleneck();
        let flat = bc * bh * bw;
        let enc = Encoder {
            c1: Conv2d::new(&format!("{name}.enc.c1"), rng, c, b, 3, 2, 1),
            c2: Conv2d::new(&format!("{name}.enc.c2"), rng, b, 2 * b, 3, 2, 1),
            c3: Conv2d::new(&format!("{name}.enc.c3"), rng, 2 * b, 2 * b, 3, 2, 1),
            head: Dense::new(&format!("{name}.enc.head"), rng, flat, 2 * arch.symbols),
        };
        let dec = Decoder {
            head: Dense::new(&format!("{name}.dec.head"), rng, 2 * arch.symbols, flat),
            u1: Conv2d::new(&format!("{name}.dec.u1"), rng, 2 * b, 2 * b, 3, 1, 1),
            u2: Conv2d::new(&format!("{name}.dec.u2"), rng, 2 * b, b, 3, 1, 1),
            u3: Conv2d::new(&format!("{name}.dec.u3"), rng, b, b.div_ceil(2), 3, 1, 1),
            out: Conv2d::new(&format!("{name}.dec.out"), rng, b.div_ceil(2), c, 3, 1, 1),
        };
        Ok(Jscc { arch, enc, dec })
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let want = [self.arch.channels, self.arch.height, self.arch.width];
        if shape != want {
            return Err(CoreError::shape_mismatch(format!("{want:?}"), shape));
        }
        Ok(())
    }

    /// Encodes an image to the normalized codeword: `2k` reals with squared
    /// norm `k * avg_power`.
    pub fn encode<'t>(&self, s: &Session<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        self.check_image(&x.shape())?;
        let h = self.enc.c1.forward(s, x).silu();
        let h = self.enc.c2.forward(s, h).silu();
        let h = self.enc.c3.forward(s, h).silu();
        let raw = self.enc.head.forward(s, h.flatten());
        raw.power_normalize(sc(self.arch.symbols as f64 * self.arch.avg_power))
    }

    /// Decodes a (noisy) codeword into an image estimate.
    pub fn decode<'t>(&self, s: &Session<'t, S>, z: Var<'t, S>) -> Result<Var<'t, S>> {
        let want = [2 * self.arch.symbols];
        if z.shape() != want {
            return Err(CoreError::shape_mismatch(format!("{want:?}"), z.shape()));
        }
        let (bc, bh, bw) = self.arch.bottleneck();
        let h = self.dec.head.forward(s, z).reshape(&[bc, bh, bw]).silu();
        let h = self.dec.u1.forward(s, h.upsample_nearest(2)).silu();
        let h = self.dec.u2.forward(s, h.upsample_nearest(2)).silu();
        let h = self.dec.u3.forward(s, h.upsample_nearest(2)).silu();
        Ok(self.dec.out.forward(s, h))
    }

    /// Value-level encode on a fresh inference tape.
    pub fn encode_values(&self, x: &ArrayD<S>) -> Result<ArrayD<S>> {
        let tape = Tape::new();
        let sess = Session::new(&tape, false);
        Ok(self.encode(&sess, sess.constant(x.clone()))?.value().as_ref().clone())
    }

    /// Value-level decode on a fresh inference tape.
    pub fn decode_values(&self, z: &ArrayD<S>) -> Result<ArrayD<S>> {
        let tape = Tape::new();
        let sess = Session::new(&tape, false);
        Ok(self.decode(&sess, sess.constant(z.clone()))?.value().as_ref().clone())
    }

    /// Full transmission: encode, corrupt with channel noise of total
    /// variance `sigma_sq` per symbol, decode.
    pub fn transmit<R: Rng + ?Sized>(
        &self,
        x: &ArrayD<S>,
        sigma_sq: f64,
        rng: &mut R,
    ) -> Result<ArrayD<S>> {
        let mut z = self.encode_values(x)?;
        crate::channel::add_awgn_real(&mut z, sigma_sq, rng)?;
        self.decode_values(&z)
    }
}

impl<S: Scalar> ParamSet<S> for Jscc<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.enc.c1.visit(f);
        self.enc.c2.visit(f);
        self.enc.c3.visit(f);
        self.enc.head.visit(f);
        self.dec.head.visit(f);
        self.dec.u1.visit(f);
        self.dec.u2.visit(f);
        self.dec.u3.visit(f);
        self.dec.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.enc.c1.visit_mut(f);
        self.enc.c2.visit_mut(f);
        self.enc.c3.visit_mut(f);
        self.enc.head.visit_mut(f);
        self.dec.head.visit_mut(f);
        self.dec.u1.visit_mut(f);
        self.dec.u2.visit_mut(f);
        self.dec.u3.visit_mut(f);
        self.dec.out.visit_mut(f);
    }
}

/// Reconstruction loss for one image through the noisy channel, on-tape so
/// encoder and decoder train jointly through the noise addition.
pub fn jscc_loss<'t, S: Scalar, R: Rng + ?Sized>(
    jscc: &Jscc<S>,
    sess: &Session<'t, S>,
    x: &ArrayD<S>,
    sigma_sq: f64,
    rng: &mut R,
) -> Result<Var<'t, S>> {
    let xv = sess.constant(x.clone());
    let z = jscc.encode(sess, xv)?;
    let n = awgn_noise::<S, _>(2 * jscc.arch.symbols, sigma_sq, rng)?;
    let y = jscc.decode(sess, z + sess.constant(n))?;
    Ok(y.mse(xv))
}

/// Options for joint codec training.
#[derive(Debug, Clone)]
pub struct JsccTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Per-batch training SNR is drawn uniformly from this range (dB).
    pub snr_lo_db: f64,
    pub snr_hi_db: f64,
}

/// Joint end-to-end training over the AWGN channel.
pub fn train_jscc<S: Scalar, R: Rng + ?Sized>(
    jscc: &mut Jscc<S>,
    images: &[ArrayD<S>],
    cfg: &JsccTrainConfig,
    rng: &mut R,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<crate::diffusion::TrainStats> {
    if images.is_empty() {
        return Err(CoreError::InvalidParameter("codec training needs images".into()));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(CoreError::InvalidParameter("steps and batch must be positive".into()));
    }
    if !(cfg.snr_lo_db <= cfg.snr_hi_db) {
        return Err(CoreError::InvalidParameter(format!(
            "SNR range [{}, {}] is empty",
            cfg.snr_lo_db, cfg.snr_hi_db
        )));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let snr = if cfg.snr_lo_db == cfg.snr_hi_db {
            cfg.snr_lo_db
        } else {
            rng.random_range(cfg.snr_lo_db..cfg.snr_hi_db)
        };
        let sigma_sq = noise_sigma_sq(jscc.arch.avg_power, snr)?;
        let mut grads: std::collections::HashMap<String, ArrayD<S>> = Default::default();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let img = &images[rng.random_range(0..images.len())];
            let tape = Tape::new();
            let sess = Session::new(&tape, true);
            let loss = jscc_loss(jscc, &sess, img, sigma_sq, rng)?;
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
        opt.step(jscc, &grads);
        losses.push(batch_loss);
        on_step(step, batch_loss);
    }
    Ok(crate::diffusion::summarize_losses(&losses))
}
