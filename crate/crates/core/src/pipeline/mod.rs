//! Training and hierarchical segmentation: scale schedule, partitioned
//! shape-model search, on-the-fly refinement and model bundles.

mod bundle;
mod schedule;
mod segment;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::features::FeatureError;
use crate::geometry::GeometryError;
use crate::metrics::MetricsError;
use crate::partition::PartitionError;
use crate::shape::{ShapeError, TubeLandmarks};
use crate::sparse::SparseError;
use crate::volume::VolumeError;

pub use bundle::{
    bundle_from_slice, load_bundle, save_bundle, to_json_bytes, ModelBundle, PartitionModelRecord, ProfileStats, ScaleModel,
    FORMAT_NAME, FORMAT_VERSION,
};
pub use schedule::{build_schedule, ScaleLevel, ScaleSchedule, DEFAULT_MAX_ITERS, DEFAULT_PROFILE_STEP_MM};
pub use segment::{segment, Init, RefineLevel, RefinementSummary, ScaleTrace, SegmentConfig, SegmentReport, Segmentation};
pub use train::{train, TrainConfig, TrainingCase, MIN_TRAINING_CASES};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} training cases, got {got}")]
    InsufficientCases { needed: usize, got: usize },
    #[error("case {id}: topology {got:?} differs from {expected:?} (stations, points per ring)")]
    TopologyMismatch { id: String, expected: (usize, usize), got: (usize, usize) },
    #[error("case {id}: {message}")]
    Case { id: String, message: String },
    #[error("search diverged at scale j={scale}, iteration {iteration}: mean movement grew three times in a row")]
    Divergence { scale: usize, iteration: usize, last_stable: Box<TubeLandmarks>, report: Box<SegmentReport> },
    #[error("bundle format version {found} is not supported (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("bundle schema violation: {0}")]
    Schema(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

impl PipelineError {
    /// Bad input or configuration, as opposed to a failed computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Self::InvalidConfig(_)
                | Self::InsufficientCases { .. }
                | Self::TopologyMismatch { .. }
                | Self::Case { .. }
                | Self::VersionMismatch { .. }
                | Self::Schema(_)
                | Self::Io { .. }
                | Self::Volume(_)
        )
    }
}
