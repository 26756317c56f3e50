//! Hierarchical partitioned shape-model search, then sparse refinement.

use log::{debug, info};
use nalgebra::{DMatrix, DVector, Rotation3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{appearance_profile, FeatureVolume};
use crate::geometry::{largest_component, voxelize};
use crate::shape::{blend_overlap, fit_similarity, PartitionShapeModel, Similarity, TubeLandmarks};
use crate::sparse::{refine_landmarks_with, RefineConfig, SparseDictionary};
use crate::volume::{BinaryMask, Volume3D};

use super::bundle::{ModelBundle, ProfileStats};
use super::PipelineError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Init {
    /// Mean shape at the average training placement.
    MeanPose,
    /// Mean shape moved onto the centroid and principal axis of the
    /// strongest spherical-flux response.
    FluxMoments,
    Transform { transform: Similarity },
    Landmarks { landmarks: TubeLandmarks },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineLevel {
    Coarsest,
    Finest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub init: Init,
    pub refine: bool,
    /// Scale whose partitioning groups the refinement dictionaries.
    pub refine_level: RefineLevel,
    /// Take the refinement patch size from that scale of the schedule.
    pub patch_from_schedule: bool,
    /// Refinement passes, each relearning dictionaries on the previous
    /// pass's surface.
    pub refine_rounds: usize,
    pub refinement: RefineConfig,
    /// Use the trained landmark weights (otherwise all ones).
    pub weighted: bool,
    /// Candidate positions on each side of a landmark, in profile steps.
    pub search_steps: usize,
    /// Convergence threshold on mean landmark movement, in voxels.
    pub tol_voxels: f64,
    /// Covariance ridge as a fraction of its trace.
    pub ridge: f64,
    /// Flux percentile kept by the moment initializer.
    pub flux_percentile: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            init: Init::MeanPose,
            refine: true,
            refine_level: RefineLevel::Coarsest,
            patch_from_schedule: true,
            refine_rounds: 3,
            refinement: RefineConfig::default(),
            weighted: true,
            search_steps: 5,
            tol_voxels: 0.25,
            ridge: 1e-6,
            flux_percentile: 99.5,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.refine && self.refine_rounds == 0 {
            return bad("refine_rounds must be at least 1 when refinement is on".into());
        }
        if self.search_steps == 0 {
            return bad("search_steps must be at least 1".into());
        }
        if !(self.tol_voxels > 0.0) {
            return bad(format!("tol_voxels {} must be positive", self.tol_voxels));
        }
        if !(self.ridge > 0.0) {
            return bad(format!("ridge {} must be positive", self.ridge));
        }
        if !(self.flux_percentile > 0.0 && self.flux_percentile < 100.0) {
            return bad(format!("flux_percentile {} must lie in (0, 100)", self.flux_percentile));
        }
        self.refinement.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleTrace {
    pub j: usize,
    pub partitions: usize,
    pub profile_step_mm: f64,
    /// Mean landmark movement (mm) after each iteration.
    pub movements: Vec<f64>,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementSummary {
    pub partitions: usize,
    pub rounds: usize,
    pub patch: [usize; 3],
    pub moved_landmarks: usize,
    pub mean_abs_displacement_mm: f64,
    pub max_abs_displacement_mm: f64,
    pub skipped_partitions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub initial_pose: Similarity,
    pub scales: Vec<ScaleTrace>,
    pub refinement: Option<RefinementSummary>,
    pub mask_voxels: usize,
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub landmarks: TubeLandmarks,
    pub mask: BinaryMask,
    /// Landmarks after the shape-model search, before refinement.
    pub model_landmarks: TubeLandmarks,
    pub report: SegmentReport,
    /// Dictionaries learned in the last refinement pass.
    pub dictionaries: Vec<SparseDictionary>,
}

/// Inverse Cholesky factor of a regularized profile covariance.
struct ProfileMetric {
    mean: DVector<f64>,
    l: DMatrix<f64>,
}

impl ProfileMetric {
    fn new(stats: &ProfileStats, ridge: f64) -> Result<Self, PipelineError> {
        let mut cov = stats.covariance();
        let d = cov.nrows();
        let eps = (ridge * cov.trace()).max(1e-12);
        for i in 0..d {
            cov[(i, i)] += eps;
        }
        let chol = cov.cholesky().ok_or_else(|| PipelineError::Schema("profile covariance is not positive definite".into()))?;
        Ok(Self { mean: DVector::from_vec(stats.mean.clone()), l: chol.l() })
    }

    fn distance(&self, g: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(g) - &self.mean;
        self.l.solve_lower_triangular(&diff).map_or(f64::INFINITY, |z| z.norm_squared())
    }
}

fn mean_movement(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let n = a.len() / 3;
    (0..n)
        .map(|l| {
            let d = Vector3::new(a[3 * l] - b[3 * l], a[3 * l + 1] - b[3 * l + 1], a[3 * l + 2] - b[3 * l + 2]);
            d.norm()
        })
        .sum::<f64>()
        / n as f64
}

/// Per-landmark best offset along the outward normal. Candidates are
/// visited 0, -1, +1, -2, ... and only a strictly smaller distance wins.
fn search_targets(
    fv: &FeatureVolume,
    current: &TubeLandmarks,
    metrics: &[ProfileMetric],
    half_len: usize,
    step: f64,
    steps: usize,
) -> Vec<Vector3<f64>> {
    let normals = current.outward_normals();
    (0..current.len())
        .into_par_iter()
        .map(|l| {
            let p = current.point(l);
            let n = normals[l];
            let mut best = (metrics[l].distance(&appearance_profile(fv, p, n, half_len, step)), 0i64);
            for m in 1..=steps as i64 {
                for o in [-m, m] {
                    let d = metrics[l].distance(&appearance_profile(fv, p + n * (o as f64 * step), n, half_len, step));
                    if d < best.0 {
                        best = (d, o);
                    }
                }
            }
            p + n * (best.1 as f64 * step)
        })
        .collect()
}

fn flux_moment_pose(fv: &FeatureVolume, bundle: &ModelBundle, percentile: f64) -> Result<Similarity, PipelineError> {
    let flux = &fv.flux;
    let thr = flux.percentile(percentile);
    let geom = flux.geometry().clone();
    let data: Vec<u8> = flux.data().iter().map(|&v| (v > thr) as u8).collect();
    let mask = BinaryMask::new(geom.clone(), data)?;
    let mask = largest_component(&mask);
    let pts: Vec<Vector3<f64>> = (0..geom.len())
        .filter(|&i| mask.data()[i] != 0)
        .map(|i| {
            let [x, y, z] = geom.coords(i);
            geom.voxel_center_mm(x, y, z)
        })
        .collect();
    if pts.len() < 2 {
        return Err(PipelineError::InvalidConfig("flux response too small to initialize".into()));
    }
    let (c_img, a_img) = principal_axis(&pts);
    let mean_pts: Vec<Vector3<f64>> = bundle.mean_shape.iter().map(|p| Vector3::from(*p)).collect();
    let (c_m, a_m) = principal_axis(&mean_pts);
    let r0 = bundle.mean_pose.rotation_matrix();
    let v = r0 * a_m;
    let target = if v.dot(&a_img) < 0.0 { -a_img } else { a_img };
    let rm = Rotation3::rotation_between(&v, &target).unwrap_or_else(Rotation3::identity);
    let r = rm.matrix() * r0;
    let s = bundle.mean_pose.scale;
    Ok(Similarity::from_parts(s, r, c_img - s * (r * c_m)))
}

fn principal_axis(pts: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let cov = pts.iter().map(|p| (p - c) * (p - c).transpose()).sum::<nalgebra::Matrix3<f64>>();
    let eig = SymmetricEigen::new(cov);
    let i = eig.eigenvalues.imax();
    (c, eig.eigenvectors.column(i).into_owned())
}

fn scale_models(bundle: &ModelBundle, s: usize, weighted: bool) -> Result<Vec<PartitionShapeModel>, PipelineError> {
    bundle.scales[s]
        .models
        .iter()
        .map(|r| {
            let mut m = r.to_model()?;
            if !weighted {
                m.weights.iter_mut().for_each(|w| *w = 1.0);
            }
            Ok(m)
        })
        .collect()
}

pub fn segment(vol: &Volume3D, bundle: &ModelBundle, cfg: &SegmentConfig) -> Result<Segmentation, PipelineError> {
    cfg.validate()?;
    bundle.validate()?;
    let fv = FeatureVolume::compute(vol, &bundle.config.features)?;
    let mean = bundle.mean_vector();
    let (n, kk) = (bundle.n_stations, bundle.points_per_ring);
    let x0 = match &cfg.init {
        Init::MeanPose => bundle.mean_pose.apply_vector(&mean),
        Init::FluxMoments => flux_moment_pose(&fv, bundle, cfg.flux_percentile)?.apply_vector(&mean),
        Init::Transform { transform } => transform.apply_vector(&mean),
        Init::Landmarks { landmarks } => {
            if landmarks.n_stations != n || landmarks.points_per_ring != kk {
                return Err(PipelineError::TopologyMismatch {
                    id: "initial landmarks".into(),
                    expected: (n, kk),
                    got: (landmarks.n_stations, landmarks.points_per_ring),
                });
            }
            landmarks.to_vector()
        }
    };
    let mut pose = fit_similarity(&mean, &x0);
    let mut shape = pose.inverse().apply_vector(&x0);
    let mut x = x0;
    let mut report = SegmentReport { initial_pose: pose.clone(), scales: Vec::new(), refinement: None, mask_voxels: 0 };
    let tol = cfg.tol_voxels * vol.geometry().min_spacing();
    let half = bundle.config.profile_half_len;

    for (s, level) in bundle.schedule.levels.iter().enumerate() {
        let models = scale_models(bundle, s, cfg.weighted)?;
        let metrics: Vec<ProfileMetric> =
            bundle.scales[s].appearance.iter().map(|a| ProfileMetric::new(a, cfg.ridge)).collect::<Result<_, _>>()?;
        let mut trace =
            ScaleTrace { j: level.j, partitions: level.partitions, profile_step_mm: level.profile_step_mm, movements: Vec::new(), converged: false };
        let mut stable = x.clone();
        let mut growing = 0usize;
        for it in 0..level.max_iters {
            let current = TubeLandmarks::from_vector(n, kk, &x)?;
            let targets = search_targets(&fv, &current, &metrics, half, level.profile_step_mm, cfg.search_steps);
            let y = DVector::from_iterator(3 * targets.len(), targets.iter().flat_map(|p| [p.x, p.y, p.z]));
            pose = fit_similarity(&shape, &y);
            let y_model = pose.inverse().apply_vector(&y);
            let recon: Vec<DVector<f64>> = models
                .iter()
                .map(|m| Ok(m.reconstruct(&m.fit(&m.restrict(&y_model))?)?))
                .collect::<Result<_, PipelineError>>()?;
            let parts: Vec<(&[usize], &DVector<f64>)> = models.iter().zip(&recon).map(|(m, r)| (m.landmarks.as_slice(), r)).collect();
            shape = blend_overlap(&parts, n, kk)?.to_vector();
            let next = pose.apply_vector(&shape);
            let movement = mean_movement(&next, &x);
            debug!("scale j={} iteration {it}: movement {movement:.4} mm", level.j);
            if trace.movements.last().is_some_and(|&prev| movement > prev) {
                if growing == 0 {
                    stable = x.clone();
                }
                growing += 1;
            } else {
                growing = 0;
            }
            trace.movements.push(movement);
            x = next;
            if growing >= 3 {
                report.scales.push(trace);
                return Err(PipelineError::Divergence {
                    scale: level.j,
                    iteration: it,
                    last_stable: Box::new(TubeLandmarks::from_vector(n, kk, &stable)?),
                    report: Box::new(report),
                });
            }
            if movement < tol {
                trace.converged = true;
                break;
            }
        }
        info!(
            "scale j={} ({} partitions): {} iterations, converged {}",
            level.j,
            level.partitions,
            trace.movements.len(),
            trace.converged
        );
        report.scales.push(trace);
    }

    let model_landmarks = TubeLandmarks::from_vector(n, kk, &x)?;
    let mut landmarks = model_landmarks.clone();
    let mut dictionaries = Vec::new();
    if cfg.refine {
        let s = match cfg.refine_level {
            RefineLevel::Coarsest => 0,
            RefineLevel::Finest => bundle.scales.len() - 1,
        };
        let mut rcfg = cfg.refinement.clone();
        if cfg.patch_from_schedule {
            rcfg.patch = bundle.schedule.levels[s].patch;
        }
        let part = &bundle.scales[s].partitioning;
        let mut skipped = Vec::new();
        for round in 0..cfg.refine_rounds {
            let out = refine_landmarks_with(vol, Some(&fv), &landmarks, part, &rcfg)?;
            debug!("refinement pass {round}: {} landmarks moved", out.displacements.iter().filter(|d| **d != 0.0).count());
            landmarks = out.landmarks;
            dictionaries = out.dictionaries;
            skipped = out.skipped;
        }
        let abs: Vec<f64> = (0..landmarks.len()).map(|l| (landmarks.point(l) - model_landmarks.point(l)).norm()).collect();
        report.refinement = Some(RefinementSummary {
            partitions: part.k,
            rounds: cfg.refine_rounds,
            patch: rcfg.patch,
            moved_landmarks: abs.iter().filter(|&&d| d > 0.0).count(),
            mean_abs_displacement_mm: abs.iter().sum::<f64>() / abs.len().max(1) as f64,
            max_abs_displacement_mm: abs.iter().fold(0.0, |m: f64, &d| m.max(d)),
            skipped_partitions: skipped,
        });
    }
    let mask = voxelize(&landmarks, vol.geometry())?;
    report.mask_voxels = mask.count();
    Ok(Segmentation { landmarks, mask, model_landmarks, report, dictionaries })
}
