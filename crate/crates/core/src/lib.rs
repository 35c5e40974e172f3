//! Anatomy-guided masked-autoencoder pre-training and query-based lesion
//! detection for 3D vascular volumes.
//!
//! The crate is organised along the pipeline:
//! [`synthvasc`] generates phantom cases, [`geometry`] provides distance maps
//! and cube math, [`sampling`] draws crops and mask plans, [`model`] holds the
//! factorized-attention transformer, [`training`] the objectives and loops,
//! and [`evaluation`] the inference and FROC protocol.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod grid;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod synthvasc;
pub mod training;

pub use error::{Error, Result};
