//! Category-level garment pose tracking.
//!
//! Given a sequence of partial point clouds of a deforming garment and a
//! first-frame pose, the tracker predicts per-point canonical (NOCS)
//! coordinates for every frame and reconstructs the complete garment surface
//! in task space.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geom;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod nocs;
pub mod plot;
pub mod refiner;
pub mod render;
pub mod sparse;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod warpfield;

pub use error::{Error, Result};
