//! Infrared/visible image fusion with a learnable residual fusion network.
//!
//! The pipeline is an autoencoder whose encoder extracts deep features at
//! four scales, a residual fusion block (RFN) per scale that merges the
//! infrared and visible features, and a nest-connected decoder that
//! reconstructs the fused image. Training runs in two stages: the
//! autoencoder is fitted first, then frozen while the fusion blocks are
//! trained with a detail-preservation plus feature-enhancement objective.
//!
//! The crate also ships the classical handcrafted fusion strategies (add,
//! max, l1-norm, nuclear-norm, spatial/channel attention) as drop-in
//! replacements for the RFN blocks, and the six objective fusion-quality
//! metrics (En, SD, MI, Nabf, SCD, MS-SSIM).
//!
//! Everything runs on the CPU via a small reverse-mode autodiff core whose
//! kernels are data-parallel (rayon, `parallel` feature) with a bit-identical
//! sequential fallback.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
