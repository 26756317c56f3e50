//! Trained model bundle and its JSON serialization.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::metrics::HealthyRadiusStats;
use crate::partition::{Partitioning, SilhouettePoint};
use crate::shape::{DeformationField, PartitionShapeModel, Similarity, TubeLandmarks};

use super::schedule::ScaleSchedule;
use super::train::TrainConfig;
use super::PipelineError;

pub const FORMAT_NAME: &str = "pascal-model";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable form of a partition shape model. `modes[i]` is column `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionModelRecord {
    pub id: usize,
    pub landmarks: Vec<usize>,
    pub mean: Vec<f64>,
    pub modes: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PartitionModelRecord {
    pub fn from_model(m: &PartitionShapeModel) -> Self {
        Self {
            id: m.id,
            landmarks: m.landmarks.clone(),
            mean: m.mean.iter().copied().collect(),
            modes: m.modes.column_iter().map(|c| c.iter().copied().collect()).collect(),
            eigenvalues: m.eigenvalues.clone(),
            weights: m.weights.clone(),
        }
    }

    pub fn to_model(&self) -> Result<PartitionShapeModel, PipelineError> {
        let d = self.mean.len();
        if d != 3 * self.landmarks.len() || self.weights.len() != self.landmarks.len() {
            return Err(PipelineError::Schema(format!("partition {} has inconsistent lengths", self.id)));
        }
        if self.modes.len() != self.eigenvalues.len() || self.modes.iter().any(|c| c.len() != d) {
            return Err(PipelineError::Schema(format!("partition {} has malformed modes", self.id)));
        }
        let modes = DMatrix::from_fn(d, self.modes.len(), |r, c| self.modes[c][r]);
        Ok(PartitionShapeModel {
            id: self.id,
            landmarks: self.landmarks.clone(),
            mean: DVector::from_vec(self.mean.clone()),
            modes,
            eigenvalues: self.eigenvalues.clone(),
            weights: self.weights.clone(),
        })
    }
}

/// Appearance statistics of one landmark's training profiles. The
/// covariance is stored as its upper triangle, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileStats {
    pub mean: Vec<f64>,
    pub covariance_upper: Vec<f64>,
}

impl ProfileStats {
    pub fn from_parts(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let d = mean.len();
        let mut upper = Vec::with_capacity(d * (d + 1) / 2);
        for r in 0..d {
            for c in r..d {
                upper.push(cov[(r, c)]);
            }
        }
        Self { mean: mean.iter().copied().collect(), covariance_upper: upper }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        let mut it = self.covariance_upper.iter();
        for r in 0..d {
            for c in r..d {
                let v = *it.next().expect("validated length");
                m[(r, c)] = v;
                m[(c, r)] = v;
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleModel {
    pub partitioning: Partitioning,
    pub models: Vec<PartitionModelRecord>,
    /// One entry per landmark.
    pub appearance: Vec<ProfileStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format: String,
    pub version: u32,
    pub n_stations: usize,
    pub points_per_ring: usize,
    pub config: TrainConfig,
    pub schedule: ScaleSchedule,
    pub training_cases: Vec<String>,
    /// Run seed, echoed for provenance (training draws no random numbers).
    #[serde(default)]
    pub seed: u64,
    /// Mean shape in the model frame (mm, centred).
    pub mean_shape: Vec<[f64; 3]>,
    /// Average placement of the mean shape over the training images.
    pub mean_pose: Similarity,
    pub global_eigenvalues: Vec<f64>,
    pub deformation: DeformationField,
    pub silhouette: Vec<SilhouettePoint>,
    pub selected_partitions: usize,
    /// Landmark confidence weights from the finest-level profiles.
    pub weights: Vec<f64>,
    /// Coarse to fine, parallel to `schedule.levels`.
    pub scales: Vec<ScaleModel>,
    pub healthy: HealthyRadiusStats,
}

impl ModelBundle {
    pub fn n_landmarks(&self) -> usize {
        self.n_stations * self.points_per_ring
    }

    pub fn mean_landmarks(&self) -> Result<TubeLandmarks, PipelineError> {
        let pts = self.mean_shape.iter().map(|p| Vector3::from(*p)).collect();
        Ok(TubeLandmarks::from_rings(self.n_stations, self.points_per_ring, pts)?)
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_iterator(3 * self.mean_shape.len(), self.mean_shape.iter().flatten().copied())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let schema = |m: String| Err(PipelineError::Schema(m));
        if self.format != FORMAT_NAME {
            return schema(format!("format is {:?}, expected {FORMAT_NAME:?}", self.format));
        }
        if self.version != FORMAT_VERSION {
            return Err(PipelineError::VersionMismatch { found: self.version, supported: FORMAT_VERSION });
        }
        self.schedule.validate().map_err(|e| PipelineError::Schema(e.to_string()))?;
        let n = self.n_landmarks();
        if n == 0 || self.mean_shape.len() != n || self.weights.len() != n || self.deformation.len() != n {
            return schema(format!("per-landmark arrays must have {n} entries"));
        }
        if self.scales.len() != self.schedule.levels.len() {
            return schema(format!("{} scale models for {} schedule levels", self.scales.len(), self.schedule.levels.len()));
        }
        let dim = self.scales[0].appearance.first().map_or(0, |a| a.dim());
        for (i, (s, level)) in self.scales.iter().zip(&self.schedule.levels).enumerate() {
            let p = &s.partitioning;
            if p.k != level.partitions || p.n_stations != self.n_stations || p.points_per_ring != self.points_per_ring {
                return schema(format!("scale {i} partitioning disagrees with the schedule or topology"));
            }
            p.validate().map_err(|e| PipelineError::Schema(format!("scale {i}: {e}")))?;
            if s.models.len() != p.k {
                return schema(format!("scale {i} has {} models for {} partitions", s.models.len(), p.k));
            }
            let mut covered = vec![false; n];
            for (q, m) in s.models.iter().enumerate() {
                if m.id != q || m.landmarks != p.landmarks(q) {
                    return schema(format!("scale {i} model {q} does not match its partition"));
                }
                m.to_model()?;
                for &l in &m.landmarks {
                    covered[l] = true;
                }
            }
            if let Some(l) = covered.iter().position(|c| !c) {
                return schema(format!("landmark {l} is not covered at scale {i}"));
            }
            if s.appearance.len() != n
                || s.appearance.iter().any(|a| a.dim() != dim || a.covariance_upper.len() != dim * (dim + 1) / 2)
            {
                return schema(format!("scale {i} appearance statistics are malformed"));
            }
        }
        Ok(())
    }
}

/// Compact JSON with every float written as `d.dddddddddddddddde±x`
/// (17 significant digits).
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        if !value.is_finite() {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("non-finite value {value}")));
        }
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    /// serde_json routes NaN and infinities here; absent options are
    /// skipped, so a bundle never contains null.
    fn write_null<W: ?Sized + Write>(&mut self, _writer: &mut W) -> std::io::Result<()> {
        Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "null or non-finite value"))
    }
}

/// Serialize any value with the 17-digit float format.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, PipelineError> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SeventeenDigits);
    value.serialize(&mut ser).map_err(|e| PipelineError::Schema(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), PipelineError> {
    bundle.validate()?;
    let bytes = to_json_bytes(bundle)?;
    std::fs::write(path, bytes).map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })
}

pub fn bundle_from_slice(bytes: &[u8]) -> Result<ModelBundle, PipelineError> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| PipelineError::Schema(e.to_string()))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(FORMAT_NAME) => {}
        other => return Err(PipelineError::Schema(format!("format is {other:?}, expected {FORMAT_NAME:?}"))),
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| PipelineError::Schema("missing integer \"version\"".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(PipelineError::VersionMismatch { found: version.min(u32::MAX as u64) as u32, supported: FORMAT_VERSION });
    }
    let bundle: ModelBundle = serde_json::from_value(value).map_err(|e| PipelineError::Schema(e.to_string()))?;
    bundle.validate()?;
    Ok(bundle)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })?;
    bundle_from_slice(&bytes)
}
