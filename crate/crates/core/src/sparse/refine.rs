//! Test-time landmark relocation driven by per-partition dictionaries.

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{appearance_profile, glcm_features, FeatureConfig, FeatureVolume};
use crate::geometry::{closest_centerline_point, extract_centerline, largest_component, voxelize, Centerline};
use crate::partition::Partitioning;
use crate::shape::TubeLandmarks;
use crate::volume::{extract_patch, Volume3D};

use super::boundary::{indicators_from_residuals, match_boundary, BoundaryProfile};
use super::ksvd::{ksvd_train, sparse_code, SparseDictionary};
use super::SparseError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Patch size in voxels (odd).
    pub patch: [usize; 3],
    pub glcm_levels: usize,
    pub glcm_offset: usize,
    pub n_atoms: usize,
    pub sparsity: usize,
    pub ksvd_iters: usize,
    pub patches_per_partition: usize,
    /// Maximum displacement along the normal (mm).
    pub search_range_mm: f64,
    pub step_mm: f64,
    pub min_half: usize,
    pub max_half: usize,
    /// 3×3 median filter of the displacement field over (station, ring).
    pub smooth: bool,
    /// Samples on each side of the point in the appended intensity
    /// profile (0 keeps co-occurrence features only).
    pub profile_half_len: usize,
    pub profile_step_mm: f64,
    /// Station folds: each landmark is scored by a dictionary trained
    /// without its own stations.
    pub folds: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            patch: [5, 5, 5],
            glcm_levels: 16,
            glcm_offset: 1,
            n_atoms: 16,
            sparsity: 3,
            ksvd_iters: 10,
            patches_per_partition: 96,
            search_range_mm: 3.0,
            step_mm: 0.25,
            min_half: 2,
            max_half: 6,
            smooth: true,
            profile_half_len: 5,
            profile_step_mm: 0.5,
            folds: 2,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), SparseError> {
        let bad = |m: String| Err(SparseError::InvalidConfig(m));
        if self.patch.iter().any(|&p| p == 0 || p % 2 == 0) {
            return bad(format!("patch size must be odd, got {:?}", self.patch));
        }
        if self.patch[0] <= self.glcm_offset || self.patch[1] <= self.glcm_offset || self.glcm_offset == 0 {
            return bad(format!("GLCM offset {} does not fit patch {:?}", self.glcm_offset, self.patch));
        }
        if self.glcm_levels < 2 {
            return bad("glcm_levels must be at least 2".into());
        }
        if self.sparsity == 0 || self.sparsity > self.n_atoms {
            return bad(format!("sparsity {} must be in 1..={}", self.sparsity, self.n_atoms));
        }
        if self.patches_per_partition < self.n_atoms {
            return bad(format!("{} patches per partition cannot train {} atoms", self.patches_per_partition, self.n_atoms));
        }
        if !(self.search_range_mm > 0.0) || !(self.step_mm > 0.0) || self.step_mm > self.search_range_mm {
            return bad(format!("search range {} / step {} invalid", self.search_range_mm, self.step_mm));
        }
        if self.min_half == 0 || self.min_half > self.max_half {
            return bad(format!("pattern half-lengths {}..{} invalid", self.min_half, self.max_half));
        }
        if self.profile_half_len > 0 && !(self.profile_step_mm > 0.0) {
            return bad(format!("profile step {} must be positive", self.profile_step_mm));
        }
        if self.folds == 0 {
            return bad("folds must be at least 1".into());
        }
        Ok(())
    }

    fn offsets(&self) -> Vec<f64> {
        let n = (self.search_range_mm / self.step_mm).round() as i64;
        (-n..=n).map(|j| j as f64 * self.step_mm).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub landmarks: TubeLandmarks,
    /// Signed displacement along the normal per landmark (mm).
    pub displacements: Vec<f64>,
    pub profiles: Vec<Option<BoundaryProfile>>,
    pub dictionaries: Vec<SparseDictionary>,
    pub skipped: Vec<usize>,
    pub centerline: Centerline,
}

struct Standardizer {
    mean: DVector<f64>,
    scale: DVector<f64>,
}

impl Standardizer {
    fn fit(samples: &[DVector<f64>]) -> Self {
        let d = samples[0].len();
        let n = samples.len() as f64;
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += s;
        }
        mean /= n;
        let mut var = DVector::zeros(d);
        for s in samples {
            var += (s - &mean).map(|v| v * v);
        }
        let scale = var.map(|v| {
            let sd = (v / n).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                0.0
            }
        });
        Self { mean, scale }
    }

    fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        (f - &self.mean).component_mul(&self.scale)
    }
}

/// Co-occurrence statistics of the patch at `p`, followed by the feature
/// profile along `normal` when enabled.
fn point_features(
    vol: &Volume3D,
    fv: Option<&FeatureVolume>,
    p: Vector3<f64>,
    normal: Vector3<f64>,
    cfg: &RefineConfig,
) -> Result<DVector<f64>, SparseError> {
    let patch = extract_patch(vol, vol.geometry().to_voxel(p), cfg.patch)?;
    let mut f = glcm_features(&patch, cfg.glcm_levels, cfg.glcm_offset)?.values.to_vec();
    if let Some(fv) = fv {
        f.extend(appearance_profile(fv, p, normal, cfg.profile_half_len, cfg.profile_step_mm));
    }
    Ok(DVector::from_vec(f))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Relocate landmarks onto boundaries learned from the current
/// segmentation itself. Training patches sit on the current surface, so
/// the reconstruction residual along a normal dips where the local
/// appearance looks most like the learned boundary. Each landmark moves
/// by at most `search_range_mm` along its centreline-anchored normal.
pub fn refine_landmarks(
    vol: &Volume3D,
    initial: &TubeLandmarks,
    partitioning: &Partitioning,
    cfg: &RefineConfig,
) -> Result<RefineOutcome, SparseError> {
    cfg.validate()?;
    let fv = if cfg.profile_half_len > 0 { Some(FeatureVolume::compute(vol, &FeatureConfig::default())?) } else { None };
    refine_landmarks_with(vol, fv.as_ref(), initial, partitioning, cfg)
}

/// As [`refine_landmarks`], reusing precomputed feature channels for the
/// profile block (ignored when `cfg.profile_half_len` is 0).
pub fn refine_landmarks_with(
    vol: &Volume3D,
    features: Option<&FeatureVolume>,
    initial: &TubeLandmarks,
    partitioning: &Partitioning,
    cfg: &RefineConfig,
) -> Result<RefineOutcome, SparseError> {
    cfg.validate()?;
    let fv = if cfg.profile_half_len > 0 {
        Some(features.ok_or_else(|| SparseError::InvalidConfig("profile features need a feature volume".into()))?)
    } else {
        None
    };
    if partitioning.n_stations != initial.n_stations || partitioning.points_per_ring != initial.points_per_ring {
        return Err(SparseError::InvalidConfig("partitioning topology differs from the landmarks".into()));
    }
    let geom = vol.geometry();
    let mask = voxelize(initial, geom)?;
    if mask.is_empty() {
        return Err(SparseError::EmptySegmentation);
    }
    let mask = largest_component(&mask);
    let n = initial.n_stations;
    let centerline = extract_centerline(&mask, Some((initial.station(0), initial.station(n - 1))))?;
    let fallback = initial.outward_normals();
    let frames: Vec<(Vector3<f64>, Vector3<f64>)> = (0..initial.len())
        .map(|l| {
            let p = initial.point(l);
            let (c, idx) = closest_centerline_point(&centerline, p);
            let t = centerline.tangent(idx);
            let v = p - c;
            let v = v - t * v.dot(&t);
            let normal = if v.norm() > 1e-9 { v.normalize() } else { fallback[l] };
            (c, normal)
        })
        .collect();
    let offsets = cfg.offsets();
    let shift = 0.25 * geom.min_spacing();

    type PartResult = Result<(Vec<SparseDictionary>, Vec<(usize, f64, BoundaryProfile)>), SparseError>;
    let results: Vec<PartResult> = (0..partitioning.k)
        .into_par_iter()
        .map(|p| {
            let core = partitioning.core(p);
            let stations: std::collections::BTreeSet<usize> = core.iter().map(|&l| initial.station_of(l)).collect();
            let folds = cfg.folds.min(stations.len()).max(1);
            let mut dicts = Vec::with_capacity(folds);
            let mut moves = Vec::with_capacity(core.len());
            for fold in 0..folds {
                let in_fold = |l: usize| folds == 1 || initial.station_of(l) % folds == fold;
                let train_ids: Vec<usize> = core.iter().copied().filter(|&l| folds == 1 || !in_fold(l)).collect();
                let count = cfg.patches_per_partition;
                let mut train = Vec::with_capacity(count);
                for i in 0..count {
                    let (l, round) = if train_ids.len() >= count {
                        (train_ids[i * train_ids.len() / count], 0)
                    } else {
                        (train_ids[i % train_ids.len()], i / train_ids.len())
                    };
                    let k = (round + 1) / 2;
                    let sign = if round % 2 == 1 { 1.0 } else { -1.0 };
                    let normal = frames[l].1;
                    let pos = initial.point(l) + normal * (sign * k as f64 * shift);
                    train.push(point_features(vol, fv, pos, normal, cfg)?);
                }
                let stdz = Standardizer::fit(&train);
                let train: Vec<DVector<f64>> = train.iter().map(|f| stdz.apply(f)).collect();
                let dict = match ksvd_train(&train, cfg.n_atoms, cfg.sparsity, cfg.ksvd_iters) {
                    Ok((mut d, _)) => {
                        d.partition = p;
                        d
                    }
                    Err(SparseError::InsufficientSamples { needed, got }) => {
                        log::warn!("partition {p}: {got} usable patches for {needed} atoms, landmarks left in place");
                        return Ok((Vec::new(), Vec::new()));
                    }
                    Err(e) => return Err(e),
                };
                for &l in core.iter().filter(|&&l| in_fold(l)) {
                    let (anchor, normal) = frames[l];
                    let base = initial.point(l);
                    let mut residuals = Vec::with_capacity(offsets.len());
                    for &o in &offsets {
                        let f = stdz.apply(&point_features(vol, fv, base + normal * o, normal, cfg)?);
                        residuals.push(sparse_code(&dict, &f).1);
                    }
                    let indicators = indicators_from_residuals(&residuals);
                    let profile = BoundaryProfile {
                        landmark: l,
                        anchor: [anchor.x, anchor.y, anchor.z],
                        normal: [normal.x, normal.y, normal.z],
                        offsets: offsets.clone(),
                        residuals,
                        indicators,
                    };
                    let delta = match_boundary(&profile, cfg.min_half, cfg.max_half);
                    moves.push((l, delta, profile));
                }
                dicts.push(dict);
            }
            Ok((dicts, moves))
        })
        .collect();

    let kk = initial.points_per_ring;
    let mut raw = vec![0.0; initial.len()];
    let mut active = vec![false; initial.len()];
    let mut profiles = vec![None; initial.len()];
    let mut dictionaries = Vec::new();
    let mut skipped = Vec::new();
    for (p, r) in results.into_iter().enumerate() {
        let (dicts, moves) = r?;
        if dicts.is_empty() {
            skipped.push(p);
        }
        dictionaries.extend(dicts);
        for (l, delta, profile) in moves {
            raw[l] = delta;
            active[l] = true;
            profiles[l] = Some(profile);
        }
    }
    let displacements: Vec<f64> = if cfg.smooth {
        (0..initial.len())
            .map(|l| {
                if !active[l] {
                    return 0.0;
                }
                let (s, k) = (l / kk, l % kk);
                let mut window = Vec::with_capacity(9);
                for ds in [-1isize, 0, 1] {
                    let t = s as isize + ds;
                    if t < 0 || t >= n as isize {
                        continue;
                    }
                    for dk in [kk - 1, 0, 1] {
                        window.push(raw[t as usize * kk + (k + dk) % kk]);
                    }
                }
                median(window)
            })
            .collect()
    } else {
        raw
    };
    let a = cfg.search_range_mm;
    let moved: Vec<Vector3<f64>> =
        (0..initial.len()).map(|l| initial.point(l) + frames[l].1 * displacements[l].clamp(-a, a)).collect();
    let landmarks = TubeLandmarks::from_rings(n, kk, moved).map_err(|e| SparseError::InvalidConfig(e.to_string()))?;
    Ok(RefineOutcome { landmarks, displacements, profiles, dictionaries, skipped, centerline })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::Partitioning;
    use crate::shape::DeformationField;
    use crate::volume::Geometry;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn tube(n: usize, kk: usize, r: f64) -> TubeLandmarks {
        let mut pts = Vec::new();
        for s in 0..n {
            for m in 0..kk {
                let a = m as f64 / kk as f64 * std::f64::consts::TAU;
                pts.push(Vector3::new(4.0 + s as f64 * 0.6, 8.0 + r * a.cos(), 8.0 + r * a.sin()));
            }
        }
        TubeLandmarks::from_rings(n, kk, pts).unwrap()
    }

    fn bright_tube(geom: &Geometry, r: f64, seed: u64) -> Volume3D {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let noise = Normal::new(0.0, 4.0).unwrap();
        Volume3D::from_fn(geom.clone(), |i, j, k| {
            let p = geom.voxel_center_mm(i, j, k);
            let d = (p.y - 8.0).hypot(p.z - 8.0);
            let inside = (0.5 - (d - r) / geom.spacing[0]).clamp(0.0, 1.0);
            60.0 + 80.0 * inside + noise.sample(&mut rng)
        })
    }

    fn partitioning(n: usize, kk: usize, k: usize) -> Partitioning {
        let field = DeformationField::new(vec![Vector3::x(); n * kk], kk);
        let ranges = (0..k).map(|p| [p * n / k, (p + 1) * n / k]).collect();
        Partitioning::from_ranges(ranges, &field).unwrap()
    }

    #[test]
    fn true_wall_is_a_fixed_point() {
        let geom = Geometry::new([40, 32, 32], [0.5; 3], [0.0; 3]).unwrap();
        let vol = bright_tube(&geom, 2.5, 1);
        let init = tube(24, 16, 2.5);
        let cfg = RefineConfig::default();
        let out = refine_landmarks(&vol, &init, &partitioning(24, 16, 2), &cfg).unwrap();
        let mean = out.displacements.iter().map(|d| d.abs()).sum::<f64>() / out.displacements.len() as f64;
        assert!(mean < 0.5, "mean |delta| {mean}");
        let again = refine_landmarks(&vol, &init, &partitioning(24, 16, 2), &cfg).unwrap();
        assert_eq!(out.landmarks, again.landmarks);
    }

    #[test]
    fn displacement_bounded_by_search_range() {
        let geom = Geometry::new([40, 32, 32], [0.5; 3], [0.0; 3]).unwrap();
        let vol = bright_tube(&geom, 3.5, 2);
        let init = tube(24, 16, 2.0);
        let cfg = RefineConfig { search_range_mm: 1.0, smooth: false, ..RefineConfig::default() };
        let out = refine_landmarks(&vol, &init, &partitioning(24, 16, 3), &cfg).unwrap();
        for l in 0..init.len() {
            assert!((out.landmarks.point(l) - init.point(l)).norm() <= 1.0 + 1e-9);
        }
        for d in &out.dictionaries {
            d.validate().unwrap();
        }
    }

    #[test]
    fn starved_partition_is_skipped() {
        let geom = Geometry::new([40, 32, 32], [0.5; 3], [0.0; 3]).unwrap();
        let vol = Volume3D::filled(geom, 10.0);
        let init = tube(24, 16, 2.5);
        let cfg = RefineConfig { profile_half_len: 0, ..RefineConfig::default() };
        let out = refine_landmarks(&vol, &init, &partitioning(24, 16, 2), &cfg).unwrap();
        assert_eq!(out.skipped, vec![0, 1]);
        assert_eq!(out.landmarks, init);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = RefineConfig { patch: [4, 5, 5], ..RefineConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = RefineConfig { patches_per_partition: 10, ..RefineConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
