//! Box-supervised class-agnostic object segmentation.
//!
//! A small, framework-free implementation of joint MIL + pixel-supervised
//! training with three segmentation heads and a detached weight-transfer
//! MLP, together with the proxy-mask merge/drop pipeline and the instance
//! segmentation metrics used to judge it. Everything runs on a CPU in
//! double precision and is validated on a deterministic synthetic dataset.
//!
//! Module map:
//!
//! - [`diffcore`]: dense tensors, a recording graph with exact backward
//!   rules, and a finite-difference gradient checker.
//! - [`geometry`]: integer-pixel boxes and binary masks.
//! - [`bags`]: positive/negative multiple-instance bags from a box.
//! - [`losses`]: MIL loss with smooth term, blended pixel loss, total loss.
//! - [`heads`]: toy backbone, segmentation heads, weight-transfer MLP.
//! - [`augment`]: patch extraction and box jitter.
//! - [`sampler`]: fixed-ratio mixed batches.
//! - [`trainer`]: the joint training loop.
//! - [`proxymask`]: proxy-mask prediction, merging and dropping.
//! - [`metrics`]: IoU@k, mIoU*, mask AP.
//! - [`synthdata`]: seeded synthetic shapes dataset.
//! - [`gradsuite`]: finite-difference checks of the losses and the batch objective.

pub mod augment;
pub mod bags;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod heads;
pub mod image;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod proxymask;
pub mod rng;
pub mod sampler;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
