//! Synthetic curved-tube volumes with known surfaces, optional bulges,
//! flanking tissues and Gaussian noise.

mod spline;

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shape::TubeLandmarks;
use crate::volume::{save_mask, save_nifti, BinaryMask, Geometry, NiftiDatatype, Volume3D, VolumeError};

pub use spline::CubicSpline;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("tube leaves the volume (needs a {margin}-voxel margin)")]
    TubeOutside { margin: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Margin (voxels) kept between the tube surface and the volume border.
pub const MARGIN_VOXELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bulge {
    /// Station index of the bulge centre.
    pub center_station: f64,
    /// Bulge extent as a fraction of the tube length.
    pub length_fraction: f64,
    /// Radius multiplier on the bulge plateau (≥ 1).
    pub factor: f64,
}

impl Bulge {
    /// Radius multiplier at fractional station `s`: flat over the inner half
    /// of the extent, raised-cosine shoulders over the outer half.
    pub fn multiplier(&self, s: f64, n_stations: usize) -> f64 {
        let half = 0.5 * self.length_fraction * (n_stations - 1) as f64;
        if half <= 0.0 {
            return 1.0;
        }
        let t = (s - self.center_station).abs() / half;
        if t <= 0.5 {
            self.factor
        } else if t < 1.0 {
            1.0 + (self.factor - 1.0) * 0.5 * (1.0 + (std::f64::consts::PI * (t - 0.5) / 0.5).cos())
        } else {
            1.0
        }
    }

    /// Stations on the plateau.
    pub fn plateau(&self, n_stations: usize) -> (f64, f64) {
        let q = 0.25 * self.length_fraction * (n_stations - 1) as f64;
        (self.center_station - q, self.center_station + q)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueBox {
    pub min_mm: [f64; 3],
    pub max_mm: [f64; 3],
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub n_stations: usize,
    pub points_per_ring: usize,
    pub control_points: Vec<[f64; 3]>,
    /// Radius (mm) per station before the bulge.
    pub radii: Vec<f64>,
    pub bulge: Option<Bulge>,
    pub background: f64,
    pub tissues: Vec<TissueBox>,
    pub tube_intensity: f64,
    pub noise_sigma: f64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let n = 40;
        Self {
            n_stations: n,
            points_per_ring: 16,
            control_points: vec![
                [8.0, 24.0, 24.0],
                [16.0, 26.5, 22.5],
                [25.0, 22.5, 25.5],
                [34.0, 25.5, 23.0],
                [40.0, 24.0, 24.5],
            ],
            radii: vec![2.5; n],
            bulge: None,
            background: 60.0,
            tissues: vec![
                TissueBox { min_mm: [0.0, 0.0, 0.0], max_mm: [48.0, 20.5, 48.0], intensity: 35.0 },
                TissueBox { min_mm: [24.0, 28.0, 0.0], max_mm: [48.0, 48.0, 48.0], intensity: 95.0 },
            ],
            tube_intensity: 140.0,
            noise_sigma: 5.0,
            dims: [96, 96, 96],
            spacing: [0.5, 0.5, 0.5],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.n_stations < 4 || self.points_per_ring < 8 {
            return bad(format!("need N >= 4 and K >= 8, got {}x{}", self.n_stations, self.points_per_ring));
        }
        if self.control_points.len() < 2 {
            return bad("need at least 2 control points".into());
        }
        if self.radii.len() != self.n_stations || self.radii.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return bad(format!("need {} positive radii", self.n_stations));
        }
        if let Some(b) = &self.bulge {
            if !(b.factor >= 1.0) || !(b.length_fraction >= 0.0 && b.length_fraction <= 1.0) {
                return bad(format!("bulge factor must be >= 1 and length fraction in [0,1], got {b:?}"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.dims.iter().any(|&d| d <= 2 * MARGIN_VOXELS) {
            return bad(format!("dims {:?} too small", self.dims));
        }
        Geometry::new(self.dims, self.spacing, [0.0; 3])?;
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.dims, self.spacing, [0.0; 3]).expect("validated")
    }
}

/// Tube sampled densely along its axis.
struct Axis {
    points: Vec<Vector3<f64>>,
    radii: Vec<f64>,
}

const DENSE_PER_STATION: usize = 8;

fn build_axis(spec: &PhantomSpec) -> Axis {
    let spline = CubicSpline::through(&spec.control_points.iter().map(|&p| Vector3::from(p)).collect::<Vec<_>>());
    let n = spec.n_stations;
    let m = (n - 1) * DENSE_PER_STATION;
    let pts = spline.resample_by_arc_length(m + 1);
    let station: Vec<f64> = (0..=m).map(|i| i as f64 / DENSE_PER_STATION as f64).collect();
    let radii = station
        .iter()
        .map(|&s| {
            let lo = (s.floor() as usize).min(n - 2);
            let u = s - lo as f64;
            let base = spec.radii[lo] * (1.0 - u) + spec.radii[lo + 1] * u;
            base * spec.bulge.as_ref().map_or(1.0, |b| b.multiplier(s, n))
        })
        .collect();
    Axis { points: pts, radii }
}

fn tangent(points: &[Vector3<f64>], i: usize) -> Vector3<f64> {
    let a = points[i.saturating_sub(1)];
    let b = points[(i + 1).min(points.len() - 1)];
    (b - a).normalize()
}

fn landmarks_from_axis(spec: &PhantomSpec, axis: &Axis) -> TubeLandmarks {
    let (n, kk) = (spec.n_stations, spec.points_per_ring);
    let mut rings = Vec::with_capacity(n * kk);
    for i in 0..axis.points.len() {
        let t = tangent(&axis.points, i);
        if i % DENSE_PER_STATION != 0 {
            continue;
        }
        // ring point 0 points along the world z axis projected into the
        // ring plane, so point k sits at the same angle in every case
        let up = if t.z.abs() < 0.9 { Vector3::z() } else { Vector3::y() };
        let e1 = (up - t * up.dot(&t)).normalize();
        let e2 = t.cross(&e1);
        let r = axis.radii[i];
        for k in 0..kk {
            let a = k as f64 / kk as f64 * std::f64::consts::TAU;
            rings.push(axis.points[i] + (e1 * a.cos() + e2 * a.sin()) * r);
        }
    }
    TubeLandmarks::from_rings(n, kk, rings).expect("ring count matches topology")
}

/// Signed radial distance to the tube surface (negative inside). Each
/// dense axis segment owns the slab between its end planes, which are
/// orthogonal to the local tangents; inside a slab the centre and radius are
/// interpolated linearly, as the cross-section rings are. Beyond the first
/// and last planes the ends are flat caps.
fn signed_distance_field(geom: &Geometry, axis: &Axis) -> Vec<f64> {
    let mut sd = vec![f64::INFINITY; geom.len()];
    let rmax = axis.radii.iter().cloned().fold(0.0, f64::max);
    let reach = rmax + 2.0 * geom.spacing.iter().cloned().fold(0.0, f64::max);
    let last = axis.points.len() - 2;
    let tangents: Vec<Vector3<f64>> = (0..axis.points.len()).map(|i| tangent(&axis.points, i)).collect();
    for seg in 0..=last {
        let (a, b) = (axis.points[seg], axis.points[seg + 1]);
        let (ta, tb) = (tangents[seg], tangents[seg + 1]);
        let (ra, rb) = (axis.radii[seg], axis.radii[seg + 1]);
        let lo = geom.to_voxel(a.inf(&b) - Vector3::repeat(reach));
        let hi = geom.to_voxel(a.sup(&b) + Vector3::repeat(reach));
        let range = |d: usize| {
            let from = lo[d].floor().max(0.0) as usize;
            let to = (hi[d].ceil().max(0.0) as usize).min(geom.dims[d] - 1);
            from..=to
        };
        for k in range(2) {
            for j in range(1) {
                for i in range(0) {
                    let p = geom.voxel_center_mm(i, j, k);
                    let d0 = (p - a).dot(&ta);
                    let d1 = (p - b).dot(&tb);
                    let before = seg == 0 && d0 < 0.0;
                    let after = seg == last && d1 > 0.0;
                    if !(before || after) && (d0 < 0.0 || d1 > 0.0) {
                        continue;
                    }
                    let u = if before {
                        0.0
                    } else if after {
                        1.0
                    } else if d0 - d1 > 0.0 {
                        d0 / (d0 - d1)
                    } else {
                        0.0
                    };
                    let c = a + (b - a) * u;
                    let t = (ta * (1.0 - u) + tb * u).normalize();
                    let v = p - c;
                    let radial = (v - t * v.dot(&t)).norm();
                    let mut d = radial - (ra + (rb - ra) * u);
                    if before {
                        d = d.max(-d0);
                    }
                    if after {
                        d = d.max(d1);
                    }
                    let idx = geom.index(i, j, k);
                    if d < sd[idx] {
                        sd[idx] = d;
                    }
                }
            }
        }
    }
    sd
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub id: String,
    pub seed: u64,
    pub pathological: bool,
    pub spec: PhantomSpec,
    pub volume: Volume3D,
    pub landmarks: TubeLandmarks,
    pub truth: BinaryMask,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseMeta {
    pub id: String,
    pub seed: u64,
    pub pathological: bool,
    pub spec: PhantomSpec,
}

/// Volume, landmarks and truth mask for one spec. Intensities are rounded to
/// f32 so a float32 NIfTI round trip is exact.
pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<(Volume3D, TubeLandmarks, BinaryMask), PhantomError> {
    spec.validate()?;
    let geom = spec.geometry();
    let axis = build_axis(spec);
    let margin = MARGIN_VOXELS as f64;
    for (p, r) in axis.points.iter().zip(&axis.radii) {
        for d in 0..3 {
            let lo = p[d] - r;
            let hi = p[d] + r;
            let limit = (geom.dims[d] - 1) as f64 * geom.spacing[d];
            if lo < margin * geom.spacing[d] || hi > limit - margin * geom.spacing[d] {
                return Err(PhantomError::TubeOutside { margin: MARGIN_VOXELS });
            }
        }
    }
    let landmarks = landmarks_from_axis(spec, &axis);
    let sd = signed_distance_field(&geom, &axis);
    let h = geom.min_spacing();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut mask = vec![0u8; geom.len()];
    let mut data = Vec::with_capacity(geom.len());
    for idx in 0..geom.len() {
        let c = geom.coords(idx);
        let p = geom.voxel_center_mm(c[0], c[1], c[2]);
        let mut bg = spec.background;
        for t in &spec.tissues {
            if (0..3).all(|d| p[d] >= t.min_mm[d] && p[d] < t.max_mm[d]) {
                bg = t.intensity;
            }
        }
        let frac = (0.5 - sd[idx] / h).clamp(0.0, 1.0);
        mask[idx] = (sd[idx] <= 0.0) as u8;
        let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let v = bg * (1.0 - frac) + spec.tube_intensity * frac + eps;
        data.push(v as f32 as f64);
    }
    let volume = Volume3D::new(geom.clone(), data)?;
    let truth = BinaryMask::new(geom, mask)?;
    Ok((volume, landmarks, truth))
}

/// Smooth per-case variation: control points jittered by `sigma` mm,
/// radii scaled by a common factor plus a low-frequency ripple, both
/// proportional to `sigma`. Pathological cases get a bulge of `bulge`
/// factor/extent at a uniformly drawn station at least one bulge extent
/// away from either end.
pub fn perturb(base: &PhantomSpec, sigma: f64, bulge: Option<(f64, f64)>, rng: &mut impl Rng) -> PhantomSpec {
    let mut spec = base.clone();
    for p in &mut spec.control_points {
        for c in p.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *c += sigma * e;
        }
    }
    let scale: f64 = rng.sample(StandardNormal);
    let ripple: f64 = rng.sample(StandardNormal);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let n = spec.n_stations;
    for (s, r) in spec.radii.iter_mut().enumerate() {
        let w = (std::f64::consts::TAU * s as f64 / (n - 1) as f64 + phase).sin();
        *r *= (1.0 + 0.03 * sigma * scale) * (1.0 + 0.02 * sigma * ripple * w);
    }
    if let Some((factor, fraction)) = bulge {
        let half = 0.5 * fraction * (n - 1) as f64;
        let lo = (2.0 * half).ceil() as usize;
        let hi = ((n - 1) as f64 - 2.0 * half).floor() as usize;
        let center = if hi > lo { rng.gen_range(lo..=hi) } else { (n - 1) / 2 };
        spec.bulge = Some(Bulge { center_station: center as f64, length_fraction: fraction, factor });
    }
    spec
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortOptions {
    pub shape_sigma: f64,
    pub bulge_factor: f64,
    pub bulge_fraction: f64,
}

impl Default for CohortOptions {
    fn default() -> Self {
        Self { shape_sigma: 1.0, bulge_factor: 2.0, bulge_fraction: 0.2 }
    }
}

/// `n_healthy` healthy cases followed by `n_path` bulged ones.
pub fn generate_cohort(
    base: &PhantomSpec,
    n_healthy: usize,
    n_path: usize,
    opts: &CohortOptions,
    seed: u64,
) -> Result<Vec<PhantomCase>, PhantomError> {
    if n_healthy < 2 {
        return Err(PhantomError::InvalidSpec(format!("need at least 2 healthy cases, got {n_healthy}")));
    }
    base.validate()?;
    let mut master = Xoshiro256PlusPlus::seed_from_u64(seed);
    let plans: Vec<(String, u64, PhantomSpec, bool)> = (0..n_healthy + n_path)
        .map(|i| {
            let case_seed = master.next_u64();
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(case_seed);
            let path = i >= n_healthy;
            let spec = perturb(base, opts.shape_sigma, path.then_some((opts.bulge_factor, opts.bulge_fraction)), &mut rng);
            (format!("{i:03}"), case_seed, spec, path)
        })
        .collect();
    use rayon::prelude::*;
    plans
        .into_par_iter()
        .map(|(id, case_seed, spec, pathological)| {
            let (volume, landmarks, truth) = generate(&spec, case_seed)?;
            Ok(PhantomCase { id, seed: case_seed, pathological, spec, volume, landmarks, truth })
        })
        .collect()
}

/// `case_<id>/{volume.nii, truth.nii, landmarks.json, meta.json}`.
pub fn write_case(root: &Path, case: &PhantomCase) -> Result<std::path::PathBuf, PhantomError> {
    let dir = root.join(format!("case_{}", case.id));
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| PhantomError::Io { path: p, source }
    };
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    save_nifti(&case.volume, &dir.join("volume.nii"), NiftiDatatype::Float32)?;
    save_mask(&case.truth, &dir.join("truth.nii"))?;
    let lm = dir.join("landmarks.json");
    std::fs::write(&lm, serde_json::to_string_pretty(&case.landmarks).expect("serialise")).map_err(io(&lm))?;
    let meta = CaseMeta { id: case.id.clone(), seed: case.seed, pathological: case.pathological, spec: case.spec.clone() };
    let mp = dir.join("meta.json");
    std::fs::write(&mp, serde_json::to_string_pretty(&meta).expect("serialise")).map_err(io(&mp))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{extract_centerline, radius_profile, voxelize};
    use crate::metrics::dsc;

    fn straight(n: usize, r: f64) -> PhantomSpec {
        PhantomSpec {
            n_stations: n,
            points_per_ring: 16,
            control_points: vec![[5.0, 10.0, 10.0], [25.0, 10.0, 10.0]],
            radii: vec![r; n],
            bulge: None,
            background: 20.0,
            tissues: vec![],
            tube_intensity: 100.0,
            noise_sigma: 0.0,
            dims: [62, 40, 40],
            spacing: [0.5; 3],
        }
    }

    #[test]
    fn straight_noise_free_matches_analytic_cylinder() {
        let spec = straight(20, 2.5);
        let (_, _, mask) = generate(&spec, 0).unwrap();
        let g = spec.geometry();
        for idx in 0..g.len() {
            let c = g.coords(idx);
            let p = g.voxel_center_mm(c[0], c[1], c[2]);
            let inside = (p.y - 10.0).hypot(p.z - 10.0) <= 2.5 && p.x >= 5.0 && p.x <= 25.0;
            assert_eq!(mask.data()[idx] != 0, inside, "{p:?}");
        }
    }

    #[test]
    fn same_seed_same_volume() {
        let spec = PhantomSpec::default();
        let a = generate(&spec, 9).unwrap();
        let b = generate(&spec, 9).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1, b.1);
        let c = generate(&spec, 10).unwrap();
        assert_ne!(a.0.data(), c.0.data());
    }

    #[test]
    fn landmarks_agree_with_truth() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        for bulge in [None, Some((2.0, 0.2))] {
            let spec = perturb(&PhantomSpec::default(), 1.0, bulge, &mut rng);
            let (_, lm, truth) = generate(&spec, 1).unwrap();
            let vox = voxelize(&lm, truth.geometry()).unwrap();
            let d = dsc(&vox, &truth).unwrap();
            // a 16-gon inscribed in a circle covers 97.4% of its area
            assert!(d > 0.975, "dsc {d} {} {} {:?}", vox.count(), truth.count(), bulge);
        }
    }

    #[test]
    fn planted_bulge_peaks_at_its_station() {
        let mut spec = PhantomSpec { noise_sigma: 0.0, ..PhantomSpec::default() };
        spec.bulge = Some(Bulge { center_station: 10.0, length_fraction: 0.2, factor: 2.0 });
        let (_, lm, truth) = generate(&spec, 0).unwrap();
        let cl = extract_centerline(&truth, None).unwrap();
        let prof = radius_profile(&truth, &cl).unwrap();
        let imax = (0..prof.radii.len()).max_by(|&a, &b| prof.radii[a].total_cmp(&prof.radii[b])).unwrap();
        // the plateau is flat, so take the middle of the near-maximal run
        let top = prof.radii[imax];
        let run: Vec<usize> = (0..prof.radii.len()).filter(|&i| prof.radii[i] >= top - 0.15).collect();
        let mid = cl.point(run[run.len() / 2]);
        let station = (0..lm.n_stations).min_by(|&a, &b| (lm.station(a) - mid).norm().total_cmp(&(lm.station(b) - mid).norm())).unwrap();
        assert!(station.abs_diff(10) <= 2, "peak near station {station}");
    }

    #[test]
    fn cohort_shape_and_zero_variation() {
        let spec = PhantomSpec { dims: [96, 96, 96], ..PhantomSpec::default() };
        let opts = CohortOptions { shape_sigma: 0.0, ..CohortOptions::default() };
        let cohort = generate_cohort(&spec, 3, 2, &opts, 5).unwrap();
        assert_eq!(cohort.len(), 5);
        assert_eq!(cohort.iter().filter(|c| c.pathological).count(), 2);
        assert!(cohort[3].spec.bulge.is_some() && cohort[0].spec.bulge.is_none());
        for c in &cohort[..3] {
            assert_eq!(c.landmarks, cohort[0].landmarks);
            assert_eq!(c.spec, spec);
        }
        assert!(generate_cohort(&spec, 1, 0, &opts, 5).is_err());
    }

    #[test]
    fn tube_outside_is_error() {
        let mut spec = straight(10, 2.5);
        spec.control_points = vec![[1.0, 10.0, 10.0], [25.0, 10.0, 10.0]];
        assert!(matches!(generate(&spec, 0), Err(PhantomError::TubeOutside { .. })));
        let spec = PhantomSpec { points_per_ring: 4, ..PhantomSpec::default() };
        assert!(matches!(generate(&spec, 0), Err(PhantomError::InvalidSpec(_))));
    }
}
