//! Core algorithms for a desk-scale coarse-to-fine image restoration trainer.
//!
//! The pipeline: synthetic scenes with known object inventories ([`scenegen`])
//! are degraded by a parametric blur/noise/jpeg/resize chain ([`degrade`]),
//! tokenized into a unified text/image vocabulary ([`codec`]), and restored by
//! a small autoregressive policy ([`policy`]) that emits an interleaved
//! text/image reasoning trace ([`trace`]). Training combines supervised
//! cold-start with group relative policy optimization ([`train`]) driven by
//! four rule-based rewards ([`rewards`]). [`metrics`] holds PSNR/SSIM.
//!
//! Everything here is `no_std + alloc`: pure functions of seeds and inputs,
//! deterministic across platforms. IO, file formats and the CLI live in the
//! companion `stepsr` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod codec;
pub mod degrade;
pub mod image;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod scenegen;
pub mod tensor;
pub mod trace;
pub mod train;

pub use image::RgbImage;
