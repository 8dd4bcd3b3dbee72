//! Desk-scale instance search: a jointly trained detector and compact
//! near-binary representation, bit-parallel Hamming retrieval over large
//! galleries, and the detection / retrieval / identification evaluation
//! harness, all on a deterministic synthetic dataset.

pub mod config;
pub mod crl;
pub mod detector;
pub mod error;
pub mod index;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthgen;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
