//! Stepwise goal-driven recurrent trajectory prediction.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`graph`], [`nn`], [`optim`]: a small dense-tensor engine with
//!   reverse-mode differentiation, a gated recurrent cell and Adam.
//! - [`model`]: encoder, stepwise goal estimator with attention aggregators,
//!   conditional VAE and decoder.
//! - [`loss`], [`metrics`]: training objective and evaluation metrics.
//! - [`data`]: dataset loaders, windowing, normalization, splits and
//!   synthetic generators.
//! - [`train`]: optimization loop, evaluation driver and checkpoints.
//! - [`config`]: the flat `key = value` run configuration.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};
