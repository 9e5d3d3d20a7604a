//! Desk-scale blind image restoration pipeline.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`numerics`]: dense f32 tensors, reverse-mode autodiff, Adam, and
//!   deterministic `(seed, stream)` random streams;
//! - [`imaging`]: PNG I/O, procedural training images, PSNR/SSIM;
//! - [`degradation`]: the two-stage blur/resize/noise degradation model with
//!   serializable per-image plans;
//! - [`restoration`]: a window-attention regression network trained to remove
//!   degradations (stage one);
//! - [`diffusion`]: a toy latent diffusion stack with a zero-initialized
//!   conditioning branch (stage two);
//! - [`guidance`]: latent-guided sampling for the fidelity-realness
//!   trade-off;
//! - [`checkpoint`]: the binary parameter container shared by all networks.

pub mod degradation;
pub mod error;
pub mod restoration;
pub mod imaging;
pub mod nn;
pub mod numerics;

pub use error::{Error, Result};
