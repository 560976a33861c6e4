//! Desk-scale controllable-diffusion cloud removal.
//!
//! The crate trains and runs a small prompt-conditioned diffusion model that
//! removes synthetic thin/thick cloud cover from paired imagery on CPU. It is
//! organized around a handful of self-contained subsystems:
//!
//! - [`tensor`]: f64 tensors with tape-based reverse-mode differentiation
//! - [`imagery`]: PNG/PPM I/O and raster/model-space conversion
//! - [`synthcloud`]: procedural paired (clean, cloudy) corpus generation
//! - [`metrics`]: PSNR, SSIM, Gram style loss, perceptual distance, complexity
//! - [`grouping`]: k-means complexity clustering and progressive stage plans
//! - [`lora`]: low-rank adapters with merge/unmerge and alpha rescaling
//! - [`net`]: the conditional U-Net denoiser with control branch and FreeU
//! - [`diffusion`]: noise schedule, guided sampling, training loop, evaluation
//! - [`cli`]: command-line surface and run configuration
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod grouping;
pub mod imagery;
pub mod lora;
pub mod metrics;
pub mod net;
pub mod synthcloud;
pub mod tensor;

pub use error::{Error, Result};
