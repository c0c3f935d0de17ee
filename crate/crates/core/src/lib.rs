//! Bi-temporal change detection: a Siamese hierarchical-attention network
//! trained under a progressive foreground-balanced sampling curriculum.
//!
//! The crate is organised along the processing chain:
//!
//! * [`data`] loads image pairs, tiles them into patches and reports class balance.
//! * [`pfbs`] turns a sampling policy into a per-epoch training manifest.
//! * [`nn`] holds the differentiable building blocks (convolution, batch norm,
//!   attention cores) with hand-written backward passes.
//! * [`model`] assembles them into the network and handles checkpoints.
//! * [`losses`], [`metrics`], [`trainer`] and [`reporting`] cover optimisation,
//!   evaluation and the exported artefacts.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pfbs;
pub mod reporting;
pub mod trainer;

pub use error::{Error, Result};
