//! Single-object point-cloud tracking with coarse-to-fine box prediction.
//!
//! See the crate README and the `examples/` directory for runnable entry
//! points; each major capability has one example.

pub mod bench;
pub mod cli;
pub mod cloud;
pub mod compare;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geom;
pub mod heads;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod net;
pub mod sim;
pub mod tensor;
pub mod track;
pub mod train;

pub use error::{Error, Result};
