//! Semantic-aware low-light image enhancement.
//!
//! The crate covers image I/O and Retinex analysis ([`imagecore`]), dataset
//! ingestion and batching ([`dataset`]), a frozen segmentation provider
//! ([`ssn`]), the enhancement network ([`net`]), its losses ([`losses`]),
//! quality metrics ([`metrics`]) and the training/ablation loop
//! ([`trainer`]).

pub mod dataset;
mod error;
pub mod imagecore;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod ssn;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
