//! Landmark sets, Procrustes alignment, point distribution models and
//! weighted per-partition shape fitting.

mod landmarks;
mod pdm;
mod procrustes;

use thiserror::Error;

pub use landmarks::TubeLandmarks;
pub(crate) use landmarks::any_orthogonal;
#[cfg(test)]
pub(crate) use landmarks::tests_support;
pub use pdm::{
    blend_overlap, build_pdm, build_pdm_with, deformation_vectors, landmark_weights, profile_statistics,
    weight_from_trace, DeformationField, PartitionShapeModel, Pdm, DEFAULT_RETENTION,
};
pub use procrustes::{fit_similarity, mean_similarity, procrustes_align, ProcrustesResult, Similarity};

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("topology mismatch: expected {expected:?} (stations, points per ring), got {got:?}")]
    TopologyMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("need at least {needed} shapes, got {got}")]
    InsufficientShapes { needed: usize, got: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape model has no modes of variation; add training variation")]
    NoModes,
    #[error("singular normal matrix in weighted fit")]
    Singular,
    #[error("landmark {0} is not covered by any partition")]
    Uncovered(usize),
    #[error("landmark weight {0} outside (0, 1]")]
    InvalidWeight(f64),
    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),
    #[error("landmark file: {0}")]
    Io(String),
}
