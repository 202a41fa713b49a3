//! Multi-modal traffic accident anticipation.
//!
//! The pipeline encodes three per-frame modalities (a rendered scene grid, a
//! short token description and a driver attention map), fuses them, runs a
//! bidirectional GRU over time and predicts a per-frame accident probability,
//! a spatial risk map and an adaptive alert threshold. Everything is trained
//! and evaluated on the built-in synthetic scenario generator in [`sim`].

pub mod alert;
pub mod autograd;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
