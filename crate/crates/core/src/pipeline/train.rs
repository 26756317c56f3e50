//! Model training from healthy cases with known landmarks.

use log::{info, warn};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{appearance_profile, FeatureConfig, FeatureVolume};
use crate::geometry::{extract_centerline, radius_profile, voxelize};
use crate::metrics::HealthyRadiusStats;
use crate::partition::{agglomerative_partition, merge_partitioning, optimal_partitioning, Partitioning, DEFAULT_ALPHA};
use crate::shape::{
    build_pdm_with, deformation_vectors, fit_similarity, mean_similarity, procrustes_align, profile_statistics,
    weight_from_trace, PartitionShapeModel, TubeLandmarks,
};
use crate::volume::{BinaryMask, Volume3D};

use super::bundle::{ModelBundle, PartitionModelRecord, ProfileStats, ScaleModel, FORMAT_NAME, FORMAT_VERSION};
use super::schedule::{build_schedule, DEFAULT_MAX_ITERS, DEFAULT_PROFILE_STEP_MM};
use super::PipelineError;

pub const MIN_TRAINING_CASES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    /// Pinned finest partition count; `None` selects it by silhouette.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partitions: Option<usize>,
    pub k_min: usize,
    pub k_max: usize,
    pub scales: usize,
    pub coarsest_patch: [usize; 3],
    /// Samples on each side of the landmark in an appearance profile.
    pub profile_half_len: usize,
    pub profile_step_mm: f64,
    pub max_iters: usize,
    /// Variance fraction kept by every shape model.
    pub retention: f64,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            partitions: None,
            k_min: 8,
            k_max: 16,
            scales: 3,
            coarsest_patch: [11, 11, 11],
            profile_half_len: 2,
            profile_step_mm: DEFAULT_PROFILE_STEP_MM,
            max_iters: DEFAULT_MAX_ITERS,
            retention: 0.98,
            features: FeatureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} must lie in (0, 1)", self.alpha));
        }
        if self.scales == 0 {
            return bad("scales must be at least 1".into());
        }
        match self.partitions {
            Some(k) if k < self.scales => return bad(format!("pinned partition count {k} is below the scale count {}", self.scales)),
            None if self.k_min < 2 || self.k_min > self.k_max => {
                return bad(format!("partition search range {}..={} is invalid", self.k_min, self.k_max))
            }
            _ => {}
        }
        if self.profile_half_len == 0 {
            return bad("profile_half_len must be at least 1".into());
        }
        if !(self.retention > 0.0 && self.retention <= 1.0) {
            return bad(format!("retention {} must lie in (0, 1]", self.retention));
        }
        if self.features.flux_radii_mm.is_empty() {
            return bad("at least one flux radius is required".into());
        }
        build_schedule(self.partitions.unwrap_or(self.k_max.max(self.scales)), self.scales, self.coarsest_patch)?
            .with_search(self.profile_step_mm, self.max_iters)?;
        Ok(())
    }
}

/// One training subject. Without a truth mask the voxelized landmarks stand in.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    pub id: String,
    pub volume: Volume3D,
    pub landmarks: TubeLandmarks,
    pub truth: Option<BinaryMask>,
}

fn case_err(id: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Case { id: id.to_string(), message: e.to_string() }
}

/// Sample every landmark's profile at each level's step.
fn case_profiles(case: &TrainingCase, cfg: &TrainConfig, steps: &[f64]) -> Result<Vec<Vec<Vec<f64>>>, PipelineError> {
    let fv = FeatureVolume::compute(&case.volume, &cfg.features).map_err(|e| case_err(&case.id, e))?;
    let normals = case.landmarks.outward_normals();
    Ok(steps
        .iter()
        .map(|&step| {
            (0..case.landmarks.len())
                .map(|l| appearance_profile(&fv, case.landmarks.point(l), normals[l], cfg.profile_half_len, step))
                .collect()
        })
        .collect())
}

fn case_mean_radius(case: &TrainingCase) -> Result<f64, PipelineError> {
    let mask = match &case.truth {
        Some(m) => m.clone(),
        None => voxelize(&case.landmarks, case.volume.geometry()).map_err(|e| case_err(&case.id, e))?,
    };
    let n = case.landmarks.n_stations;
    let cl = extract_centerline(&mask, Some((case.landmarks.station(0), case.landmarks.station(n - 1))))
        .map_err(|e| case_err(&case.id, e))?;
    Ok(radius_profile(&mask, &cl).map_err(|e| case_err(&case.id, e))?.mean())
}

pub fn train(cases: &[TrainingCase], cfg: &TrainConfig) -> Result<ModelBundle, PipelineError> {
    cfg.validate()?;
    if cases.len() < MIN_TRAINING_CASES {
        return Err(PipelineError::InsufficientCases { needed: MIN_TRAINING_CASES, got: cases.len() });
    }
    let first = &cases[0].landmarks;
    let (n, kk) = (first.n_stations, first.points_per_ring);
    for c in cases {
        if !c.landmarks.same_topology(first) {
            return Err(PipelineError::TopologyMismatch {
                id: c.id.clone(),
                expected: (n, kk),
                got: (c.landmarks.n_stations, c.landmarks.points_per_ring),
            });
        }
        c.landmarks.validate().map_err(|e| case_err(&c.id, e))?;
    }

    let shapes: Vec<TubeLandmarks> = cases.iter().map(|c| c.landmarks.clone()).collect();
    let pa = procrustes_align(&shapes)?;
    let model_frame: Vec<DVector<f64>> = pa.aligned.iter().map(|y| y * pa.mean_size).collect();
    let mean = &pa.mean * pa.mean_size;
    let global = build_pdm_with(&model_frame, cfg.retention)?;
    let field = deformation_vectors(&global, kk)?;
    info!("global shape model: {} modes, mean size {:.3} mm", global.eigenvalues.len(), pa.mean_size);

    let (finest, silhouette) = match cfg.partitions {
        Some(k) => {
            if k > n {
                return Err(PipelineError::InvalidConfig(format!("pinned partition count {k} exceeds {n} stations")));
            }
            (agglomerative_partition(&field, k, cfg.alpha)?, Vec::new())
        }
        None => {
            let hi = cfg.k_max.min(n);
            if cfg.k_min > hi {
                return Err(PipelineError::InvalidConfig(format!("partition search range {}..={hi} is empty", cfg.k_min)));
            }
            optimal_partitioning(&field, cfg.k_min..=hi, cfg.alpha)?
        }
    };
    let g = finest.k;
    info!("finest partition count {g}");
    let schedule = build_schedule(g, cfg.scales, cfg.coarsest_patch)?.with_search(cfg.profile_step_mm, cfg.max_iters)?;
    let partitionings: Vec<Partitioning> = schedule
        .levels
        .iter()
        .map(|l| if l.partitions == g { Ok(finest.clone()) } else { merge_partitioning(&finest, l.partitions, &field, cfg.alpha) })
        .collect::<Result<_, _>>()?;

    let steps: Vec<f64> = schedule.levels.iter().map(|l| l.profile_step_mm).collect();
    let per_case: Vec<(Vec<Vec<Vec<f64>>>, f64)> = cases
        .par_iter()
        .map(|c| Ok((case_profiles(c, cfg, &steps)?, case_mean_radius(c)?)))
        .collect::<Result<_, PipelineError>>()?;

    let nl = n * kk;
    let appearance: Vec<Vec<ProfileStats>> = (0..steps.len())
        .map(|s| {
            (0..nl)
                .map(|l| {
                    let samples: Vec<Vec<f64>> = per_case.iter().map(|(p, _)| p[s][l].clone()).collect();
                    let (m, cov) = profile_statistics(&samples);
                    ProfileStats::from_parts(&m, &cov)
                })
                .collect()
        })
        .collect();
    let weights: Vec<f64> =
        appearance[steps.len() - 1].iter().map(|a| weight_from_trace(a.covariance().trace())).collect();

    let mut scales = Vec::with_capacity(partitionings.len());
    for (part, app) in partitionings.into_iter().zip(appearance) {
        let mut models = Vec::with_capacity(part.k);
        for p in 0..part.k {
            let ids = part.landmarks(p);
            let restricted: Vec<DVector<f64>> = model_frame
                .iter()
                .map(|x| DVector::from_iterator(3 * ids.len(), ids.iter().flat_map(|&l| [x[3 * l], x[3 * l + 1], x[3 * l + 2]])))
                .collect();
            let pdm = build_pdm_with(&restricted, cfg.retention)?;
            if pdm.eigenvalues.is_empty() {
                warn!("partition {p} of {} has no shape variation", part.k);
            }
            let w = ids.iter().map(|&l| weights[l]).collect();
            let model = PartitionShapeModel::from_pdm(p, ids, pdm, w)?;
            models.push(PartitionModelRecord::from_model(&model));
        }
        scales.push(ScaleModel { partitioning: part, models, appearance: app });
    }

    let poses: Vec<_> = cases.iter().map(|c| fit_similarity(&mean, &c.landmarks.to_vector())).collect();
    let radii: Vec<f64> = per_case.iter().map(|(_, r)| *r).collect();
    let healthy = HealthyRadiusStats::from_radii(&radii)?;
    info!("healthy mean radius {:.4} mm (sd {:.4})", healthy.mean, healthy.std);

    let bundle = ModelBundle {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        n_stations: n,
        points_per_ring: kk,
        config: cfg.clone(),
        schedule,
        training_cases: cases.iter().map(|c| c.id.clone()).collect(),
        seed: 0,
        mean_shape: (0..nl).map(|l| [mean[3 * l], mean[3 * l + 1], mean[3 * l + 2]]).collect(),
        mean_pose: mean_similarity(&poses),
        global_eigenvalues: global.eigenvalues.clone(),
        deformation: field,
        silhouette,
        selected_partitions: g,
        weights,
        scales,
        healthy,
    };
    bundle.validate()?;
    Ok(bundle)
}
