//! Partitioned statistical shape modeling with on-the-fly sparse
//! appearance refinement for thin tubular structures in 3D volumes.

pub mod cli;
pub mod features;
pub mod geometry;
pub mod metrics;
pub mod partition;
pub mod phantom;
pub mod pipeline;
pub mod shape;
pub mod sparse;
pub mod volume;
