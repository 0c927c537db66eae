//! EEG-spectrogram to fMRI-volume synthesis.
//!
//! A self-contained pipeline: a dense tensor engine with reverse-mode
//! differentiation, STFT preprocessing, a multi-directional convolution and
//! attention encoder, a state-space U-Net decoder, SSIM/MSE losses and a
//! deterministic training harness.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two instantiations.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
