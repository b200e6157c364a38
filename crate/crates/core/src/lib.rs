//! XL-MIMO channel estimation toolkit.
//!
//! Channel generation ([`channel`]), LS/LMMSE baselines ([`estimation`]), a
//! small CNN engine ([`nn`]), the residual denoiser and its training loop
//! ([`xlcnet`]), pruning and affine quantization ([`compression`]), and the
//! file formats and experiment plumbing used by the CLI ([`io`], [`config`],
//! [`sweep`]).
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations the toolkit actually uses.

pub mod channel;
pub mod compression;
pub mod config;
pub mod error;
pub mod estimation;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod sweep;
pub mod xlcnet;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training and inference precision.
pub type Model32 = xlcnet::Model<f32>;
/// Gradient checking precision.
pub type Model64 = xlcnet::Model<f64>;
pub type Tensor32 = nn::Tensor4<f32>;
pub type Tensor64 = nn::Tensor4<f64>;
pub type Grid32 = estimation::Grid<f32>;
pub type Grid64 = estimation::Grid<f64>;
/// Channel simulation runs in `f64`.
pub type ChannelSpec = channel::HybridChannelSpec<f64>;
pub type Geometry = channel::ArrayGeometry<f64>;
pub type ChannelVector = channel::ComplexVector<f64>;
pub type CovarianceMatrix = linalg::ComplexMatrix<f64>;
