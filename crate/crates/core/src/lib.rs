//! Garment mesh deformation driven by a learned set of rigid anchors.
//!
//! The pipeline: a template garment mesh is covered by anchors initialised
//! with k-means; a recurrent network maps body motion to per-anchor rigid
//! transforms plus canonical-space vertex displacements; linear blend
//! skinning over each vertex's nearest anchors yields the deformed mesh.

pub mod anchors;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod simplify;
pub mod skinning;
pub mod training;

pub use error::{Error, Result};
