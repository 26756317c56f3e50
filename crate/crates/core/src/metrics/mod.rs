//! Overlap and surface-distance evaluation plus the radius-based
//! pathology detection rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{squared_edt, RadiusProfile};
use crate::volume::{BinaryMask, Geometry, Volume3D};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask geometries differ: {0:?} vs {1:?}")]
    GeometryMismatch(Box<Geometry>, Box<Geometry>),
    #[error("mask is empty")]
    EmptyMask,
    #[error("healthy radius spread must be positive, got {0}")]
    ZeroSpread(f64),
    #[error("need at least 2 healthy radii, got {0}")]
    TooFewSamples(usize),
}

/// Default z-score threshold for flagging a case.
pub const DETECTION_Z: f64 = 2.5;

fn same_geometry(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricsError> {
    if a.geometry() != b.geometry() {
        return Err(MetricsError::GeometryMismatch(Box::new(a.geometry().clone()), Box::new(b.geometry().clone())));
    }
    Ok(())
}

/// Dice coefficient; two empty masks score 1.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    same_geometry(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground voxels with at least one background 6-neighbour (the space
/// outside the lattice counts as background).
pub fn boundary_voxels(mask: &BinaryMask) -> Vec<bool> {
    let [nx, ny, nz] = mask.geometry().dims;
    let mut out = vec![false; mask.data().len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !mask.get(i, j, k) {
                    continue;
                }
                let (a, b, c) = (i as isize, j as isize, k as isize);
                let nb = [(a - 1, b, c), (a + 1, b, c), (a, b - 1, c), (a, b + 1, c), (a, b, c - 1), (a, b, c + 1)];
                if nb.iter().any(|&(x, y, z)| !mask.get_signed(x, y, z)) {
                    out[mask.geometry().index(i, j, k)] = true;
                }
            }
        }
    }
    out
}

fn directed(from: &[bool], to_sq: &[f64]) -> f64 {
    from.iter().zip(to_sq).filter(|(f, _)| **f).map(|(_, d)| *d).fold(0.0, f64::max).sqrt()
}

/// Symmetric Hausdorff distance (mm) between the boundary voxel centres.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    same_geometry(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let geom = a.geometry();
    let (ba, bb) = (boundary_voxels(a), boundary_voxels(b));
    let (da, db) = (squared_edt(geom, &ba), squared_edt(geom, &bb));
    Ok(directed(&ba, &db).max(directed(&bb, &da)))
}

/// Truth-only 1, prediction-only 2, both 3.
pub fn overlay(truth: &BinaryMask, pred: &BinaryMask) -> Result<Volume3D, MetricsError> {
    same_geometry(truth, pred)?;
    let data = truth.data().iter().zip(pred.data()).map(|(&t, &p)| ((t != 0) as u8 + 2 * (p != 0) as u8) as f64).collect();
    Ok(Volume3D::new(truth.geometry().clone(), data).expect("same length"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthyRadiusStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl HealthyRadiusStats {
    /// Sample mean and unbiased standard deviation of per-case mean radii.
    pub fn from_radii(radii: &[f64]) -> Result<Self, MetricsError> {
        let n = radii.len();
        if n < 2 {
            return Err(MetricsError::TooFewSamples(n));
        }
        let mean = radii.iter().sum::<f64>() / n as f64;
        let var = radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(Self { mean, std: var.sqrt(), count: n })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub z: f64,
    pub flag: bool,
}

/// z-score of the profile's mean radius against the healthy population;
/// flagged when strictly above 2.5. The comparison allows a relative
/// 1e-12 slack so a mean sitting exactly on the threshold is not flagged
/// by rounding.
pub fn detect_opg(profile: &RadiusProfile, stats: &HealthyRadiusStats) -> Result<Detection, MetricsError> {
    detect_opg_with(profile, stats, DETECTION_Z)
}

pub fn detect_opg_with(profile: &RadiusProfile, stats: &HealthyRadiusStats, threshold: f64) -> Result<Detection, MetricsError> {
    if !(stats.std > 0.0) {
        return Err(MetricsError::ZeroSpread(stats.std));
    }
    let mut radii = profile.radii.clone();
    radii.sort_by(|a, b| a.total_cmp(b));
    let mean = if radii.is_empty() { 0.0 } else { radii.iter().sum::<f64>() / radii.len() as f64 };
    let z = (mean - stats.mean) / stats.std;
    Ok(Detection { z, flag: z > threshold * (1.0 + 1e-12) })
}

/// `{ "dsc", "hausdorff_mm", "opg": {"z", "flag"} }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dsc: f64,
    pub hausdorff_mm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opg: Option<Detection>,
}

pub fn evaluate(truth: &BinaryMask, pred: &BinaryMask) -> Result<EvaluationReport, MetricsError> {
    Ok(EvaluationReport { dsc: dsc(truth, pred)?, hausdorff_mm: hausdorff(truth, pred)?, opg: None })
}
