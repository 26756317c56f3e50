//! Surface/mask conversion, centreline extraction and radius profiling.

mod centerline;
mod edt;
mod voxelize;

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shape::any_orthogonal;
use crate::volume::BinaryMask;

pub use centerline::{closest_centerline_point, components, extract_centerline, largest_component, Centerline};
pub use edt::{inside_distance, squared_edt};
pub use voxelize::voxelize;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("landmarks outside the volume: {0:?}")]
    OutOfBounds(Vec<usize>),
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask has {0} connected components, expected 1")]
    MultipleComponents(usize),
    #[error("centreline point {0} lies outside the mask")]
    OutsideMask(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub const PROFILE_RAYS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusProfile {
    /// Arc length (mm) of each station along the centreline.
    pub stations: Vec<f64>,
    pub radii: Vec<f64>,
}

impl RadiusProfile {
    pub fn mean(&self) -> f64 {
        if self.radii.is_empty() {
            return 0.0;
        }
        self.radii.iter().sum::<f64>() / self.radii.len() as f64
    }

    /// Stations with arc length in `[from, to]`.
    pub fn window(&self, from: f64, to: f64) -> RadiusProfile {
        let (stations, radii) =
            self.stations.iter().zip(&self.radii).filter(|(s, _)| **s >= from && **s <= to).map(|(s, r)| (*s, *r)).unzip();
        RadiusProfile { stations, radii }
    }
}

/// Distance from `p` along `dir` to where the trilinear mask indicator drops
/// below 0.5, located by marching then bisection.
fn exit_distance(mask: &BinaryMask, p: Vector3<f64>, dir: Vector3<f64>, step: f64) -> f64 {
    let limit = mask.geometry().dims.iter().zip(mask.geometry().spacing).map(|(&d, s)| d as f64 * s).sum::<f64>();
    let mut inside = 0.0;
    let mut t = step;
    while t < limit {
        if mask.sample_mm(p + dir * t) < 0.5 {
            break;
        }
        inside = t;
        t += step;
    }
    let mut out = t;
    for _ in 0..40 {
        let mid = 0.5 * (inside + out);
        if mask.sample_mm(p + dir * mid) >= 0.5 {
            inside = mid;
        } else {
            out = mid;
        }
    }
    0.5 * (inside + out)
}

/// Mean boundary distance over 16 in-plane rays at every centreline point.
pub fn radius_profile(mask: &BinaryMask, cl: &Centerline) -> Result<RadiusProfile, GeometryError> {
    let step = 0.25 * mask.geometry().min_spacing();
    let mut radii = Vec::with_capacity(cl.len());
    for i in 0..cl.len() {
        let p = cl.point(i);
        if mask.sample_mm(p) < 0.5 {
            return Err(GeometryError::OutsideMask(i));
        }
        let t = cl.tangent(i);
        let e1 = any_orthogonal(&t);
        let e2 = t.cross(&e1);
        let mut acc = 0.0;
        for r in 0..PROFILE_RAYS {
            let a = r as f64 / PROFILE_RAYS as f64 * std::f64::consts::TAU;
            acc += exit_distance(mask, p, e1 * a.cos() + e2 * a.sin(), step);
        }
        radii.push(acc / PROFILE_RAYS as f64);
    }
    Ok(RadiusProfile { stations: cl.arc_length.clone(), radii })
}

/// `arclength_mm,x,y,z,radius_mm` rows.
pub fn write_profile_csv(path: &Path, cl: &Centerline, profile: &RadiusProfile) -> Result<(), GeometryError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "arclength_mm,x,y,z,radius_mm")?;
    for (i, r) in profile.radii.iter().enumerate() {
        let p = cl.point(i);
        writeln!(f, "{},{},{},{},{}", cl.arc_length[i], p.x, p.y, p.z, r)?;
    }
    f.flush()?;
    Ok(())
}
