// SPDX-License-Identifier: MIT OR Apache-2.0

//! # latent-lens
//!
//! Sparse autoencoders (SAEs) for corpora of fixed-dimension dense
//! embeddings, such as speaker embeddings, plus the tooling to interpret them:
//!
//! - [`embedding_store`]: corpora, label sets and the EMBC binary format.
//! - [`synth`]: synthetic corpora with planted attributes and known ground truth.
//! - [`sae`]: TopK / ReLU+L1 autoencoders, analytic gradients, Adam training,
//!   dead-latent tracking and SAEC checkpoints.
//! - [`gridsearch`]: resumable sweeps over latent dimension × k.
//! - [`probe`]: logistic-regression probing that finds the latent index most
//!   tied to a labeled attribute and scores it as a standalone detector.
//! - [`steering`]: overwrite one latent before decoding and measure how the
//!   reconstruction moves between two class centroids.
//! - [`splitting`]: follow labeled samples across models of growing latent
//!   dimension and report where one feature divides into several.

pub mod embedding_store;
pub mod error;
pub mod fsutil;
pub mod gridsearch;
pub mod linalg;
pub mod probe;
pub mod sae;
pub mod splitting;
pub mod steering;
pub mod synth;

pub use error::{Error, Result};
