//! Edge-variational graph convolutional networks.
//!
//! Semi-supervised node classification on a population graph whose edge
//! weights are produced by a learnable pairwise association encoder from
//! per-subject metadata, trained end to end with a Chebyshev spectral GCN,
//! and Monte-Carlo edge dropout for topology-related predictive
//! uncertainty.

pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod pae;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use numcore::{Matrix, Tape, Var};
