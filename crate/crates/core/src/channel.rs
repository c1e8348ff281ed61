//! Complex AWGN channel model.
//!
//! A codeword of `2k` reals is interpreted as `k` complex symbols (re, im
//! interleaved). The transmit-side power constraint fixes the squared norm
//! of the codeword to `k * avg_power`, i.e. unit average power per complex
//! symbol when `avg_power` is 1. Channel noise is circularly symmetric:
//! total complex variance `sigma_sq`, split evenly as `sigma_sq / 2` per
//! real component. SNR in dB is `10 log10(avg_power / sigma_sq)`.

use crate::error::CoreError;
use crate::rng::standard_normal;
use crate::scalar::{sc, Scalar};
use crate::Result;
use ndarray::ArrayD;
use num_complex::Complex;
use rand::Rng;

/// Noise variance that realizes `snr_db` at the given average symbol power.
pub fn noise_sigma_sq(avg_power: f64, snr_db: f64) -> Result<f64> {
    if !(avg_power.is_finite() && avg_power > 0.0) {
        return Err(CoreError::InvalidParameter(format!(
            "average power must be positive and finite, got {avg_power}"
        )));
    }
    if !snr_db.is_finite() {
        return Err(CoreError::InvalidParameter(format!("SNR must be finite, got {snr_db} dB")));
    }
    Ok(avg_power * 10f64.powf(-snr_db / 10.0))
}

/// Inverse of [`noise_sigma_sq`].
pub fn snr_db(avg_power: f64, sigma_sq: f64) -> Result<f64> {
    if !(avg_power.is_finite() && avg_power > 0.0) {
        return Err(CoreError::InvalidParameter(format!(
            "average power must be positive and finite, got {avg_power}"
        )));
    }
    if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
        return Err(CoreError::InvalidNoiseVariance(sigma_sq));
    }
    Ok(10.0 * (avg_power / sigma_sq).log10())
}

/// Interleaved reals to complex symbols. Errors on odd input length.
pub fn pack_complex<S: Scalar>(v: &[S]) -> Result<Vec<Complex<S>>> {
    if v.len() % 2 != 0 {
        return Err(CoreError::OddRealLength(v.len()));
    }
    Ok(v.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect())
}

pub fn unpack_complex<S: Scalar>(z: &[Complex<S>]) -> Vec<S> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

/// Rescales a real codeword so its squared norm is `k * avg_power`, where
/// `k = len / 2` complex symbols. Errors on odd length or an all-zero input.
pub fn power_normalize_codeword<S: Scalar>(v: &ArrayD<S>, avg_power: f64) -> Result<ArrayD<S>> {
    if v.ndim() != 1 {
        return Err(CoreError::shape_mismatch("rank-1 codeword", v.shape()));
    }
    if v.len() % 2 != 0 {
        return Err(CoreError::OddRealLength(v.len()));
    }
    let k = v.len() / 2;
    let target = sc::<S>(k as f64 * avg_power);
    let nsq: S = v.iter().map(|&x| x * x).sum();
    if nsq == S::zero() {
        return Err(CoreError::ZeroSignal);
    }
    let c = (target / nsq).sqrt();
    Ok(v.mapv(|x| x * c))
}

/// Mean squared magnitude per complex symbol.
pub fn avg_symbol_power<S: Scalar>(z: &[Complex<S>]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    z.iter().map(|c| (c.norm_sqr()).to_f64_lossy()).sum::<f64>() / z.len() as f64
}

/// Adds circularly symmetric Gaussian noise of total variance `sigma_sq`
/// per symbol: independent `N(0, sigma_sq/2)` on each real component.
pub fn add_awgn<S: Scalar, R: Rng + ?Sized>(
    z: &mut [Complex<S>],
    sigma_sq: f64,
    rng: &mut R,
) -> Result<()> {
    let std = component_std::<S>(sigma_sq)?;
    for c in z.iter_mut() {
        c.re += std * standard_normal::<S, _>(rng);
        c.im += std * standard_normal::<S, _>(rng);
    }
    Ok(())
}

/// Same channel acting on the interleaved real view of the codeword; draws
/// noise in the identical order as [`add_awgn`], so the two representations
/// stay interchangeable under a shared RNG.
pub fn add_awgn_real<S: Scalar, R: Rng + ?Sized>(
    v: &mut ArrayD<S>,
    sigma_sq: f64,
    rng: &mut R,
) -> Result<()> {
    if v.len() % 2 != 0 {
        return Err(CoreError::OddRealLength(v.len()));
    }
    let std = component_std::<S>(sigma_sq)?;
    for x in v.iter_mut() {
        *x += std * standard_normal::<S, _>(rng);
    }
    Ok(())
}

/// Noise realization with the same statistics, returned instead of applied.
/// Used where the noisy codeword must stay on a gradient tape.
pub fn awgn_noise<S: Scalar, R: Rng + ?Sized>(
    len: usize,
    sigma_sq: f64,
    rng: &mut R,
) -> Result<ArrayD<S>> {
    if len % 2 != 0 {
        return Err(CoreError::OddRealLength(len));
    }
    let std = component_std::<S>(sigma_sq)?;
    let data: Vec<S> = (0..len).map(|_| std * standard_normal::<S, _>(rng)).collect();
    Ok(ArrayD::from_shape_vec(vec![len], data).expect("noise shape"))
}

fn component_std<S: Scalar>(sigma_sq: f64) -> Result<S> {
    if !(sigma_sq.is_finite() && sigma_sq >= 0.0) {
        return Err(CoreError::InvalidNoiseVariance(sigma_sq));
    }
    Ok(sc((sigma_sq / 2.0).sqrt()))
}

/// Bandwidth compression ratio: complex channel uses per source dimension.
pub fn bandwidth_ratio(source_dims: usize, symbols: usize) -> f64 {
    symbols as f64 / source_dims as f64
}
