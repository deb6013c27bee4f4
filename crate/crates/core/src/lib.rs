//! Downscaling emulators mapping coarse global-model fields to
//! regional-model resolution.
//!
//! Four architectures share one numerics engine: a single-variable vision
//! transformer, a multi-variable transformer with one decoder (1E1D), a
//! shared encoder with one decoder per variable (1EMD), and a residual
//! U-Net. The crate also carries a synthetic paired-field generator, the
//! training loop, and the evaluation metrics.

pub mod datapipe;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use datapipe::{Dataset, Manifest, NormStats, SynthParams};
pub use evaluation::{MetricsReport, SsimOptions};
pub use models::{Arch, Model, ModelConfig};
pub use training::{AdamW, Schedule};
