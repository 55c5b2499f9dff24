//! Geometry-guided direct pose regression toolkit.
//!
//! The crate bundles pose parameterizations ([`geometry`]), an analytic
//! synthetic sphere renderer ([`synth`]), classical EPnP/RANSAC ([`pnp`]),
//! pose metrics ([`metrics`]), a small reverse-mode autodiff engine ([`nn`])
//! and the convolutional Patch-PnP network built on it ([`patch_pnp`]).
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the precision used by the benchmark.

pub mod error;
pub mod geometry;
pub mod gradient_suite;
pub mod metrics;
pub mod nn;
pub mod patch_pnp;
pub mod pnp;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double precision pose.
pub type Pose64 = geometry::Pose<f64>;
/// Double precision rotation.
pub type Rotation64 = geometry::RotationMatrix<f64>;
/// Double precision intrinsics.
pub type Intrinsics64 = geometry::CameraIntrinsics<f64>;
/// Double precision image box.
pub type BBox64 = geometry::BBox<f64>;
/// Double precision 2D-3D correspondences.
pub type Correspondences64 = pnp::CorrespondenceSet<f64>;
/// Single precision tensor used for training.
pub type Tensor32 = nn::Tensor<f32>;
/// Double precision tensor used for gradient checks.
pub type Tensor64 = nn::Tensor<f64>;
/// The network at training precision.
pub type PatchPnp32 = patch_pnp::PatchPnp<f32>;
