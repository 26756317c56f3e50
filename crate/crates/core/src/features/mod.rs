//! Appearance features: voxel channels for the shape-model search and
//! patch-level co-occurrence statistics for the sparse refinement.

mod fcm;
mod flux;
mod glcm;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::Volume3D;

pub use fcm::{fuzzy_cmeans3, FcmConfig, FcmResult};
pub use flux::spherical_flux;
pub use glcm::{glcm_features, quantize, GlcmFeatureVector, DIRECTIONS, GLCM_DIRECTIONS, GLCM_LEN, GLCM_STATS, STAT_NAMES};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Number of profile channels sampled by [`appearance_profile`].
pub const PROFILE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub fcm: FcmConfig,
    pub flux_radii_mm: Vec<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { fcm: FcmConfig::default(), flux_radii_mm: vec![0.5, 1.0, 1.5] }
    }
}

/// Per-voxel feature channels sharing the source volume's geometry.
#[derive(Clone, Debug)]
pub struct FeatureVolume {
    pub derivative: Volume3D,
    pub fcm: [Volume3D; 3],
    pub fcm_centers: [f64; 3],
    pub flux: Volume3D,
}

impl FeatureVolume {
    pub fn compute(vol: &Volume3D, config: &FeatureConfig) -> Result<Self, FeatureError> {
        let range = robust_range(vol);
        let derivative = normalized_derivative(vol, range);
        let fcm = fuzzy_cmeans3(vol, config.fcm.fuzzifier, config.fcm.max_iters, config.fcm.tol)?;
        let flux = spherical_flux(vol, &config.flux_radii_mm)?.map(|v| v / range);
        Ok(Self { derivative, fcm: fcm.memberships, fcm_centers: fcm.centers, flux })
    }

    pub fn channels(&self) -> Vec<(&'static str, &Volume3D)> {
        vec![
            ("intensity-derivative", &self.derivative),
            ("fcm-membership-0", &self.fcm[0]),
            ("fcm-membership-1", &self.fcm[1]),
            ("fcm-membership-2", &self.fcm[2]),
            ("spherical-flux", &self.flux),
        ]
    }

    /// Membership of the brightest tissue class, the one the tube falls into.
    pub fn foreground_membership(&self) -> &Volume3D {
        &self.fcm[2]
    }
}

/// 1st–99th percentile intensity spread; 1.0 for flat volumes.
pub fn robust_range(vol: &Volume3D) -> f64 {
    let mut sorted = vol.data().to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = crate::volume::percentile_sorted(&sorted, 1.0);
    let hi = crate::volume::percentile_sorted(&sorted, 99.0);
    if hi - lo > 1e-12 {
        hi - lo
    } else {
        1.0
    }
}

/// Central-difference gradient magnitude (per mm) divided by `range`.
pub fn normalized_derivative(vol: &Volume3D, range: f64) -> Volume3D {
    let s = vol.spacing();
    let g = vol.geometry().clone();
    Volume3D::from_fn(g, |i, j, k| {
        let (i, j, k) = (i as isize, j as isize, k as isize);
        let gx = (vol.get_clamped(i + 1, j, k) - vol.get_clamped(i - 1, j, k)) / (2.0 * s[0]);
        let gy = (vol.get_clamped(i, j + 1, k) - vol.get_clamped(i, j - 1, k)) / (2.0 * s[1]);
        let gz = (vol.get_clamped(i, j, k + 1) - vol.get_clamped(i, j, k - 1)) / (2.0 * s[2]);
        (gx * gx + gy * gy + gz * gz).sqrt() / range
    })
}

/// Sample `2 * half_len + 1` positions along `point + t * normal` for the
/// derivative, foreground-membership and flux channels, concatenated
/// channel-major.
pub fn appearance_profile(
    fv: &FeatureVolume,
    point: Vector3<f64>,
    normal: Vector3<f64>,
    half_len: usize,
    step: f64,
) -> Vec<f64> {
    let n = 2 * half_len + 1;
    let mut out = vec![0.0; PROFILE_CHANNELS * n];
    let channels = [&fv.derivative, fv.foreground_membership(), &fv.flux];
    for s in 0..n {
        let t = (s as f64 - half_len as f64) * step;
        let p = point + normal * t;
        for (c, vol) in channels.iter().enumerate() {
            out[c * n + s] = vol.sample_mm(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn slab(n: usize) -> Volume3D {
        // wall at x = 10.5 voxels (mm with unit spacing), bright for x < 10.5
        let g = Geometry::new([n, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        Volume3D::from_fn(g, |i, j, _| if i <= 10 { 100.0 + j as f64 } else { 20.0 + (i % 3) as f64 })
    }

    #[test]
    fn profile_length_is_33() {
        let vol = slab(24);
        let fv = FeatureVolume::compute(&vol, &FeatureConfig { flux_radii_mm: vec![1.0], ..Default::default() }).unwrap();
        let prof = appearance_profile(&fv, Vector3::new(10.0, 4.0, 4.0), Vector3::x(), 5, 1.0);
        assert_eq!(prof.len(), 33);
    }

    #[test]
    fn constant_volume_has_flat_derivative() {
        let g = Geometry::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume3D::filled(g, 5.0);
        let d = normalized_derivative(&vol, robust_range(&vol));
        let fv = FeatureVolume {
            derivative: d,
            fcm: [vol.clone(), vol.clone(), vol.clone()],
            fcm_centers: [0.0; 3],
            flux: vol.clone(),
        };
        let prof = appearance_profile(&fv, Vector3::new(5.0, 5.0, 5.0), Vector3::y(), 5, 0.5);
        assert!(prof[..11].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn derivative_peaks_at_wall() {
        let vol = slab(24);
        let fv = FeatureVolume::compute(&vol, &FeatureConfig { flux_radii_mm: vec![1.0], ..Default::default() }).unwrap();
        // start at x = 4, step 1 mm, samples at x = -1 .. 9 + ... ; choose start so wall (10.5) is sample 8.5
        let start = Vector3::new(7.0, 4.0, 4.0);
        let prof = appearance_profile(&fv, start, Vector3::x(), 5, 1.0);
        let deriv = &prof[..11];
        let arg = deriv
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        let wall_sample = 10.5 - (7.0 - 5.0);
        assert!((arg as f64 - wall_sample).abs() <= 1.0, "argmax {arg}");
    }
}
