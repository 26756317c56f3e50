//! 3D scalar volumes, binary masks, patch extraction and file I/O.
//!
//! Data is stored x-fastest (`index = i + nx * (j + ny * k)`). Voxel
//! coordinates map to millimetres through `origin + spacing * index`; no
//! rotation is carried, the phantom data and the pipeline all live in an
//! axis-aligned frame.

mod nifti;
mod raw;

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nifti::{load_nifti, save_nifti, NiftiDatatype};
pub use raw::{load_raw, save_raw};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header in {path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("payload holds {got} values but header declares {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("volume contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unrecognised volume file extension: {0}")]
    UnknownFormat(PathBuf),
}

/// Lattice geometry shared by volumes and masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidGeometry(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::InvalidGeometry(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidGeometry(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Voxel coordinate (continuous) to millimetres.
    pub fn to_mm(&self, v: Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + self.spacing[0] * v.x,
            self.origin[1] + self.spacing[1] * v.y,
            self.origin[2] + self.spacing[2] * v.z,
        )
    }

    /// Millimetres to continuous voxel coordinate.
    pub fn to_voxel(&self, p: Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        )
    }

    pub fn voxel_center_mm(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.to_mm(Vector3::new(i as f64, j as f64, k as f64))
    }

    /// True when the millimetre point lies within the lattice extent.
    pub fn contains_mm(&self, p: Vector3<f64>) -> bool {
        let v = self.to_voxel(p);
        (0..3).all(|a| v[a] >= 0.0 && v[a] <= (self.dims[a] - 1) as f64)
    }

    pub fn voxel_diagonal(&self) -> f64 {
        self.spacing.iter().map(|s| s * s).sum::<f64>().sqrt()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Scalar 3D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    geom: Geometry,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(geom: Geometry, data: Vec<f64>) -> Result<Self, VolumeError> {
        if data.len() != geom.len() {
            return Err(VolumeError::DimensionMismatch { expected: geom.len(), got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: f64) -> Self {
        let n = geom.len();
        Self { geom, data: vec![value; n] }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [nx, ny, nz] = geom.dims;
        let mut data = Vec::with_capacity(geom.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geom.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geom.index(i, j, k)]
    }

    /// Voxel value with indices clamped to the lattice.
    #[inline]
    pub fn get_clamped(&self, i: isize, j: isize, k: isize) -> f64 {
        let [nx, ny, nz] = self.geom.dims;
        let c = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        self.get(c(i, nx), c(j, ny), c(k, nz))
    }

    /// Trilinear interpolation at a continuous voxel coordinate. Coordinates
    /// outside the lattice are clamped to the boundary.
    pub fn sample_trilinear(&self, p: Vector3<f64>) -> f64 {
        let [nx, ny, nz] = self.geom.dims;
        let clamp_axis = |v: f64, n: usize| -> (usize, usize, f64) {
            let max = (n - 1) as f64;
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, max) };
            let i0 = v.floor() as usize;
            let i0 = i0.min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, v - i0 as f64)
        };
        let (x0, x1, fx) = clamp_axis(p.x, nx);
        let (y0, y1, fy) = clamp_axis(p.y, ny);
        let (z0, z1, fz) = clamp_axis(p.z, nz);
        let c000 = self.get(x0, y0, z0);
        let c100 = self.get(x1, y0, z0);
        let c010 = self.get(x0, y1, z0);
        let c110 = self.get(x1, y1, z0);
        let c001 = self.get(x0, y0, z1);
        let c101 = self.get(x1, y0, z1);
        let c011 = self.get(x0, y1, z1);
        let c111 = self.get(x1, y1, z1);
        let c00 = c000 + (c100 - c000) * fx;
        let c10 = c010 + (c110 - c010) * fx;
        let c01 = c001 + (c101 - c001) * fx;
        let c11 = c011 + (c111 - c011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        c0 + (c1 - c0) * fz
    }

    /// Trilinear sample at a millimetre position.
    pub fn sample_mm(&self, p: Vector3<f64>) -> f64 {
        self.sample_trilinear(self.geom.to_voxel(p))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Linear-interpolated percentile, `q` in [0, 100].
    pub fn percentile(&self, q: f64) -> f64 {
        let mut sorted = self.data.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        percentile_sorted(&sorted, q)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { geom: self.geom.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Binary {0,1} mask over a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    geom: Geometry,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(geom: Geometry) -> Self {
        let n = geom.len();
        Self { geom, data: vec![0; n] }
    }

    pub fn new(geom: Geometry, data: Vec<u8>) -> Result<Self, VolumeError> {
        if data.len() != geom.len() {
            return Err(VolumeError::DimensionMismatch { expected: geom.len(), got: data.len() });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(VolumeError::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { geom, data })
    }

    /// Threshold a volume: voxel is set when value > 0.5.
    pub fn from_volume(vol: &Volume3D) -> Self {
        Self {
            geom: vol.geometry().clone(),
            data: vol.data().iter().map(|&v| u8::from(v > 0.5)).collect(),
        }
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            geom: self.geom.clone(),
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.geom.index(i, j, k)] != 0
    }

    /// Out-of-lattice reads are background.
    #[inline]
    pub fn get_signed(&self, i: isize, j: isize, k: isize) -> bool {
        let [nx, ny, nz] = self.geom.dims;
        if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            return false;
        }
        self.get(i as usize, j as usize, k as usize)
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.geom.index(i, j, k);
        self.data[idx] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Trilinear interpolation of the 0/1 indicator at a millimetre position.
    pub fn sample_mm(&self, p: Vector3<f64>) -> f64 {
        let v = self.geom.to_voxel(p);
        let [nx, ny, nz] = self.geom.dims;
        let mut acc = 0.0;
        let base = [v.x.floor(), v.y.floor(), v.z.floor()];
        let frac = [v.x - base[0], v.y - base[1], v.z - base[2]];
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
                    let i = base[0] as isize + dx;
                    let j = base[1] as isize + dy;
                    let k = base[2] as isize + dz;
                    if i >= 0 && j >= 0 && k >= 0 && (i as usize) < nx && (j as usize) < ny && (k as usize) < nz {
                        acc += w * self.data[self.geom.index(i as usize, j as usize, k as usize)] as f64;
                    }
                }
            }
        }
        acc
    }
}

/// An `m × m × k` neighbourhood sampled around a continuous centre.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: [usize; 3],
    pub center: Vector3<f64>,
    pub data: Vec<f64>,
}

impl Patch {
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[i + self.size[0] * (j + self.size[1] * k)]
    }
}

/// Extract a patch centred at a continuous voxel coordinate. Voxel
/// `(i, j, l)` of the patch is the trilinear sample at
/// `center + (i - (m-1)/2, j - (m-1)/2, l - (k-1)/2)`.
pub fn extract_patch(vol: &Volume3D, center: Vector3<f64>, size: [usize; 3]) -> Result<Patch, VolumeError> {
    if size.iter().any(|&s| s % 2 == 0) {
        return Err(VolumeError::InvalidArgument(format!("patch size must be odd, got {size:?}")));
    }
    let half = [(size[0] / 2) as f64, (size[1] / 2) as f64, (size[2] / 2) as f64];
    let mut data = Vec::with_capacity(size[0] * size[1] * size[2]);
    for l in 0..size[2] {
        for j in 0..size[1] {
            for i in 0..size[0] {
                let p = center + Vector3::new(i as f64 - half[0], j as f64 - half[1], l as f64 - half[2]);
                data.push(vol.sample_trilinear(p));
            }
        }
    }
    Ok(Patch { size, center, data })
}

/// Load a volume from `.nii`, `.nii.gz`, or the raw `.f32` + `.json` pair.
pub fn load_volume(path: &Path) -> Result<Volume3D, VolumeError> {
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        load_nifti(path)
    } else if name.ends_with(".json") || name.ends_with(".f32") {
        load_raw(path)
    } else {
        Err(VolumeError::UnknownFormat(path.to_path_buf()))
    }
}

pub fn load_mask(path: &Path) -> Result<BinaryMask, VolumeError> {
    let vol = load_volume(path)?;
    Ok(BinaryMask::from_volume(&vol))
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<(), VolumeError> {
    save_nifti(&mask.to_volume(), path, NiftiDatatype::Uint8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn geom(n: [usize; 3]) -> Geometry {
        Geometry::new(n, [1.0, 1.0, 1.0], [0.0; 3]).unwrap()
    }

    fn random_volume(rng: &mut impl Rng, dims: [usize; 3]) -> Volume3D {
        Volume3D::from_fn(geom(dims), |_, _, _| rng.gen_range(-10.0..10.0))
    }

    // Independent nested-lerp oracle: interpolate along z last on exact corner reads.
    fn lerp_oracle(vol: &Volume3D, p: Vector3<f64>) -> f64 {
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        let (x0, y0, z0) = (p.x.floor() as usize, p.y.floor() as usize, p.z.floor() as usize);
        let (tx, ty, tz) = (p.x - x0 as f64, p.y - y0 as f64, p.z - z0 as f64);
        let face = |z: usize| {
            let a = lerp(vol.get(x0, y0, z), vol.get(x0 + 1, y0, z), tx);
            let b = lerp(vol.get(x0, y0 + 1, z), vol.get(x0 + 1, y0 + 1, z), tx);
            lerp(a, b, ty)
        };
        lerp(face(z0), face(z0 + 1), tz)
    }

    #[test]
    fn trilinear_exact_on_lattice() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let vol = random_volume(&mut rng, [5, 6, 4]);
        assert_eq!(vol.sample_trilinear(Vector3::new(2.0, 3.0, 1.0)), vol.get(2, 3, 1));
    }

    #[test]
    fn trilinear_midpoint() {
        let vol = Volume3D::from_fn(geom([2, 1, 1]), |i, _, _| if i == 0 { 0.0 } else { 10.0 });
        assert_abs_diff_eq!(vol.sample_trilinear(Vector3::new(0.5, 0.0, 0.0)), 5.0, epsilon = 1e-15);
    }

    #[test]
    fn trilinear_matches_nested_lerp() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let vol = random_volume(&mut rng, [7, 5, 6]);
        for _ in 0..500 {
            let p = Vector3::new(rng.gen_range(0.0..5.999), rng.gen_range(0.0..3.999), rng.gen_range(0.0..4.999));
            assert_abs_diff_eq!(vol.sample_trilinear(p), lerp_oracle(&vol, p), epsilon = 1e-12);
        }
    }

    #[test]
    fn trilinear_bounded_by_neighbours() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let vol = random_volume(&mut rng, [4, 4, 4]);
        for _ in 0..200 {
            let p = Vector3::new(rng.gen_range(0.0..2.99), rng.gen_range(0.0..2.99), rng.gen_range(0.0..2.99));
            let (i, j, k) = (p.x as usize, p.y as usize, p.z as usize);
            let corners: Vec<f64> = (0..8)
                .map(|c| vol.get(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)))
                .collect();
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = vol.sample_trilinear(p);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn patch_interior_equals_slice() {
        let vol = Volume3D::from_fn(geom([20, 20, 20]), |i, j, k| (i + 31 * j + 977 * k) as f64);
        let p = extract_patch(&vol, Vector3::new(10.0, 9.0, 8.0), [11, 11, 11]).unwrap();
        for l in 0..11 {
            for j in 0..11 {
                for i in 0..11 {
                    assert_eq!(p.get(i, j, l), vol.get(i + 5, j + 4, l + 3));
                }
            }
        }
    }

    #[test]
    fn degenerate_patch_is_single_sample() {
        let vol = Volume3D::from_fn(geom([4, 4, 4]), |i, j, k| (i * j + k) as f64);
        let c = Vector3::new(1.25, 2.5, 0.75);
        let p = extract_patch(&vol, c, [1, 1, 1]).unwrap();
        assert_eq!(p.data, vec![vol.sample_trilinear(c)]);
    }

    #[test]
    fn even_patch_rejected() {
        let vol = Volume3D::filled(geom([4, 4, 4]), 1.0);
        assert!(matches!(
            extract_patch(&vol, Vector3::new(1.0, 1.0, 1.0), [4, 3, 3]),
            Err(VolumeError::InvalidArgument(_))
        ));
    }

    #[test]
    fn boundary_patch_replicates_edges() {
        let vol = Volume3D::from_fn(geom([6, 6, 6]), |i, j, k| (i + 10 * j + 100 * k) as f64);
        let p = extract_patch(&vol, Vector3::new(0.0, 5.0, 2.0), [5, 5, 3]).unwrap();
        for l in 0..3 {
            for j in 0..5 {
                for i in 0..5 {
                    let oracle = vol.get_clamped(i as isize - 2, 5 + j as isize - 2, 2 + l as isize - 1);
                    assert!(p.get(i, j, l).is_finite());
                    assert_eq!(p.get(i, j, l), oracle);
                }
            }
        }
    }

    #[test]
    fn geometry_rejects_bad_spacing() {
        assert!(Geometry::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([2, 0, 2], [1.0, 1.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn nonfinite_rejected() {
        let g = geom([2, 1, 1]);
        assert!(matches!(Volume3D::new(g, vec![1.0, f64::NAN]), Err(VolumeError::NonFinite(1))));
    }
}
