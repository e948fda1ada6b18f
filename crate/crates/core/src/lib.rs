//! Multi-source spatial prediction with learned per-source fidelity.
//!
//! Each data source gets its own graph neural network over a K-nearest
//! neighbor graph of its samples; per-source estimates are fused with
//! fidelity scores that are learned jointly with the network weights.

pub mod data;
pub mod error;
pub mod fidelity;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{DmspError, ErrorKind, Result};
