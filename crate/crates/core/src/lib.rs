//! Voxelized point-cloud and language model.
//!
//! A sparse voxel U-Net encodes colored point clouds, a word-level
//! transformer encodes text, and a query transformer decoder refines latent
//! object queries, a scene query and text queries against the voxel features.
//! Five functional heads (classification, mask, grounding, text generation and
//! text-shape matching) are combined per task to produce semantic and
//! instance segmentation, grounded segmentation, captions, retrieval rankings
//! and shape classes.

pub mod decoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod router;
pub mod sparse;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
