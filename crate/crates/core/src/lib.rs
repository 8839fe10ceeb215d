//! Text-CAPTCHA breaking toolkit: synthesis, GAN background denoising,
//! border-tracing segmentation, CNN recognition and the experiment harness.

pub mod error;
pub mod eval;
pub mod gan;
pub mod image;
pub mod nn;
pub mod ops;
pub mod pipeline;
pub mod recognize;
pub mod segment;
pub mod synth;

pub use error::{Error, Result};
pub use image::CaptchaImage;
