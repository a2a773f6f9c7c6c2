//! Domain-adaptive human activity recognition on mmWave radar point clouds.
//!
//! The crate covers the whole pipeline: ingestion and standardization of
//! heterogeneous radar sources, dynamic-point densification, motion feature
//! recalibration, text-guided classification, training, evaluation and a
//! synthetic radar scene generator.

pub mod archive;
pub mod clip;
pub mod config;
pub mod d2r;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod mfr;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod taxonomy;
pub mod train;

pub use error::{Error, ErrorKind, Result};
