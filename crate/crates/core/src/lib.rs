//! Divide-and-conquer spatio-temporal graph learning with exact unlearning.
//!
//! A graph is split into correlation-preserving subgraphs, each with its own
//! frozen forecaster, and a sparse meta-graph of key, boundary and ganglion
//! vertices bridges them. Deleting nodes retrains only the touched subgraphs
//! plus the small global layer, and the result is certified bit-identical to a
//! from-scratch run on the purged data.

pub mod bench;
pub mod digest;
pub mod error;
pub mod esc;
pub mod ggb;
pub mod neural;
pub mod stgraph;
pub mod tensor;
pub mod unlearn;

pub use error::{Error, Result};
