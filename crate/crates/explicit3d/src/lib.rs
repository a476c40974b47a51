//! Sparse scene-graph 3D object detection on a synthetic indoor benchmark.
//!
//! The pipeline builds a dense pairwise relatedness matrix over detected 2D
//! boxes, prunes it to a sparse scene graph by cluster sampling, runs
//! iterative edge-message passing over the survivors, and decodes both
//! independent camera-space box parameters and explicit relative rigid
//! transforms between object pairs. A holistic fusion step combines the two
//! routes through homogeneous-frame composition.

pub mod config;
pub mod decode;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graphnet;
pub mod loss;
pub mod model;
pub mod relatedness;
pub mod synthscene;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
