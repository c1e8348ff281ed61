//! Joint source-channel coding of images over a complex AWGN channel, with an
//! invertible-network-guided diffusion sampler that restores perceptual detail
//! lost at very low channel bandwidth.
//!
//! The pipeline has three trained parts and one fixed one:
//!
//! * [`jscc`]: a convolutional encoder/decoder pair that maps an image to `k`
//!   power-normalized complex channel symbols and back ([`channel`] adds the
//!   noise in between).
//! * [`inn`]: a lifting-scheme invertible network trained so that its coarse
//!   branch mimics the end-to-end degradation of the transmission above.
//! * [`diffusion`]: a DDPM denoiser over the clean-image distribution, plus
//!   the schedule arithmetic shared by both samplers.
//! * [`guided`]: the restoration sampler that pulls each diffusion step toward
//!   consistency with the received reconstruction through the inverse INN.
//!
//! All numerics are generic over the scalar type via [`Scalar`] (`f32` or
//! `f64`); gradients come from the small reverse-mode tape in [`tensor`].

pub mod channel;
pub mod diffusion;
pub mod error;
pub mod guided;
pub mod inn;
pub mod jscc;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::CoreError;
pub use scalar::Scalar;

/// Single-precision image tensor, the default working type.
pub type TensorF32 = ndarray::ArrayD<f32>;
/// Double-precision image tensor, used where tolerance checks want headroom.
pub type TensorF64 = ndarray::ArrayD<f64>;

pub type Result<T> = std::result::Result<T, CoreError>;
