//! Joint co-training of cycle-consistent domain translation, stereo matching
//! and optical flow, tied together by differentiable multi-scale feature
//! warping.
//!
//! The crate is organised bottom-up:
//!
//! - [`gradcore`]: rank-4 tensors and a reverse-mode differentiation tape.
//! - [`netlib`]: generators, discriminators, stereo/flow networks and a frozen
//!   feature extractor, all composed from `gradcore` kernels.
//! - [`warp`]: disparity/flow warping and the multi-scale warping losses.
//! - [`losses`]: adversarial, cycle, perceptual, cosine, correlation,
//!   mode-seeking and supervised terms, and the three training objectives.
//! - [`scenegen`]: procedural paired domains with exact ground truth.
//! - [`trainer`]: the alternating optimization schedule, Adam/AdamW,
//!   checkpoints and logs.
//! - [`metrics`]: EPE, D1/F1, threshold rates, PSNR, SSIM.
//! - [`config`]: flat `key=value` run configuration.

pub mod config;
pub mod error;
pub mod gradcore;
pub mod losses;
pub mod metrics;
pub mod netlib;
pub mod scenegen;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
