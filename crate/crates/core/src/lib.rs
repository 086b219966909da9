//! Asymmetric KV-cache merging.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense vectors/matrices, softmax, one-sided Jacobi SVD, projections.
//! - [`attention`]: single-head attention forward pass with exact key gradients and
//!   rank-one Hessian blocks.
//! - [`merge`]: key/value merge rules (gradient-free closed form, exact pseudoinverse
//!   forms, diagonal-Fisher baseline, mean control).
//! - [`spectral`]: spectral-energy decomposition of adjacent-token cosine similarity.
//! - [`cache`]: sink + body KV cache with chunked pairwise compression.
//! - [`oracle`]: independent brute-force verifiers (finite differences, dense solves).
//! - [`harness`]: synthetic models, token streams and the decode simulator.
//! - [`verify`]: the self-check suite run by the `kvmerge verify` command.
//!
//! All math is generic over [`Scalar`] (`f32`/`f64`); the `*64` aliases below are what
//! the CLI and the tolerances in the test suites are written against.

pub mod attention;
pub mod cache;
mod error;
pub mod harness;
pub mod merge;
pub mod numerics;
pub mod oracle;
mod scalar;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vector64 = numerics::Vector<f64>;
pub type Matrix64 = numerics::Matrix<f64>;
pub type Snapshot64 = attention::AttentionSnapshot<f64>;
pub type KvCache64 = cache::KvCache<f64>;
pub type Profile64 = spectral::SpectralProfile<f64>;
pub type Model64 = harness::SyntheticModel<f64>;

pub type Vector32 = numerics::Vector<f32>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Snapshot32 = attention::AttentionSnapshot<f32>;
pub type KvCache32 = cache::KvCache<f32>;
