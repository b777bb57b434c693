//! Multi-view image to 3D shape retrieval: a consensus-guided multi-view
//! aggregator, a normal-aware point-cloud transformer, two-stage
//! contrastive training, and a cosine retrieval index.

pub mod container;
pub mod data;
pub mod encoder3d;
pub mod error;
pub mod geometry;
pub mod mvagg;
pub mod nn;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
