//! On-the-fly appearance learning from the subject's own initial
//! segmentation: per-partition k-SVD dictionaries over co-occurrence
//! features, residual indicators along surface normals, and boundary-pattern
//! landmark relocation.

mod boundary;
mod ksvd;
mod refine;

use thiserror::Error;

use crate::features::FeatureError;
use crate::geometry::GeometryError;
use crate::volume::VolumeError;

pub use boundary::{indicators_from_residuals, match_boundary, residual_indicator, BoundaryProfile};
pub use ksvd::{ksvd_train, omp, sparse_code, DictionaryDump, KsvdReport, SparseDictionary};
pub use refine::{refine_landmarks, refine_landmarks_with, RefineConfig, RefineOutcome};

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("need at least {needed} usable samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("feature dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("initial segmentation is empty")]
    EmptySegmentation,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}
