//! Point distribution models, landmark confidence weights and weighted
//! partition fits.

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::{ShapeError, TubeLandmarks};

/// Centred PCA shape model.
#[derive(Clone, Debug, PartialEq)]
pub struct Pdm {
    pub mean: DVector<f64>,
    /// Columns are orthonormal modes.
    pub modes: DMatrix<f64>,
    /// Descending, one per retained mode.
    pub eigenvalues: Vec<f64>,
    /// Total variance before truncation.
    pub total_variance: f64,
}

pub const DEFAULT_RETENTION: f64 = 0.95;

pub fn build_pdm(aligned: &[DVector<f64>]) -> Result<Pdm, ShapeError> {
    build_pdm_with(aligned, DEFAULT_RETENTION)
}

/// PCA via the `n×n` Gram matrix, keeping the fewest modes whose variance
/// reaches `retention` of the total (`retention >= 1` keeps every non-null mode).
pub fn build_pdm_with(aligned: &[DVector<f64>], retention: f64) -> Result<Pdm, ShapeError> {
    if aligned.len() < 2 {
        return Err(ShapeError::InsufficientShapes { needed: 2, got: aligned.len() });
    }
    let d = aligned[0].len();
    if let Some(bad) = aligned.iter().find(|x| x.len() != d) {
        return Err(ShapeError::LengthMismatch { expected: d, got: bad.len() });
    }
    let n = aligned.len();
    let mut mean = DVector::zeros(d);
    for x in aligned {
        mean += x;
    }
    mean /= n as f64;
    let mut xc = DMatrix::zeros(d, n);
    for (j, x) in aligned.iter().enumerate() {
        xc.set_column(j, &(x - &mean));
    }
    let denom = (n - 1) as f64;
    let gram = xc.transpose() * &xc / denom;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let scale = mean.norm_squared().max(1.0);
    let mut modes = Vec::new();
    let mut eigenvalues = Vec::new();
    if total > 1e-24 * scale {
        let floor = 1e-12 * total;
        let mut acc = 0.0;
        for &i in &order {
            let lambda = eig.eigenvalues[i];
            if lambda <= floor {
                break;
            }
            if retention < 1.0 && acc >= retention * total {
                break;
            }
            let mut phi = &xc * eig.eigenvectors.column(i);
            let norm = phi.norm();
            if norm == 0.0 {
                break;
            }
            phi /= norm;
            // deterministic sign: largest-magnitude component positive
            let imax = phi.iamax();
            if phi[imax] < 0.0 {
                phi = -phi;
            }
            modes.push(phi);
            eigenvalues.push(lambda);
            acc += lambda;
        }
    }
    let modes = if modes.is_empty() { DMatrix::zeros(d, 0) } else { DMatrix::from_columns(&modes) };
    Ok(Pdm { mean, modes, eigenvalues, total_variance: total })
}

/// Per-landmark first-mode deformation vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    pub vectors: Vec<[f64; 3]>,
    pub l_max: f64,
    pub points_per_ring: usize,
}

impl DeformationField {
    pub fn new(vectors: Vec<Vector3<f64>>, points_per_ring: usize) -> Self {
        let l_max = vectors.iter().map(|v| v.norm()).fold(0.0, f64::max);
        Self { vectors: vectors.iter().map(|v| [v.x, v.y, v.z]).collect(), l_max, points_per_ring }
    }

    pub fn vector(&self, l: usize) -> Vector3<f64> {
        Vector3::from(self.vectors[l])
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn n_stations(&self) -> usize {
        self.vectors.len() / self.points_per_ring
    }
}

pub fn deformation_vectors(pdm: &Pdm, points_per_ring: usize) -> Result<DeformationField, ShapeError> {
    if pdm.eigenvalues.is_empty() {
        return Err(ShapeError::NoModes);
    }
    let s = pdm.eigenvalues[0].sqrt();
    let phi = pdm.modes.column(0);
    let v = (0..phi.len() / 3).map(|l| s * Vector3::new(phi[3 * l], phi[3 * l + 1], phi[3 * l + 2])).collect();
    Ok(DeformationField::new(v, points_per_ring))
}

/// Sample mean and unbiased covariance of equal-length vectors.
pub fn profile_statistics(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = samples.first().map_or(0, |s| s.len());
    let n = samples.len();
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    if n > 0 {
        mean /= n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

/// `w_l = 1 / (1 + tr Σ_l)` from per-landmark training profiles
/// (`profiles[l][case]`).
pub fn landmark_weights(profiles: &[Vec<Vec<f64>>]) -> Result<Vec<f64>, ShapeError> {
    profiles
        .iter()
        .map(|samples| {
            if samples.len() < 2 {
                return Err(ShapeError::InsufficientShapes { needed: 2, got: samples.len() });
            }
            Ok(weight_from_trace(profile_statistics(samples).1.trace()))
        })
        .collect()
}

pub fn weight_from_trace(trace: f64) -> f64 {
    1.0 / (1.0 + trace.max(0.0))
}

/// Shape model restricted to one partition's landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionShapeModel {
    pub id: usize,
    pub landmarks: Vec<usize>,
    pub mean: DVector<f64>,
    pub modes: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PartitionShapeModel {
    pub fn from_pdm(id: usize, landmarks: Vec<usize>, pdm: Pdm, weights: Vec<f64>) -> Result<Self, ShapeError> {
        if weights.len() != landmarks.len() || pdm.mean.len() != 3 * landmarks.len() {
            return Err(ShapeError::LengthMismatch { expected: 3 * landmarks.len(), got: pdm.mean.len() });
        }
        if let Some(w) = weights.iter().find(|&&w| !(w > 0.0 && w <= 1.0)) {
            return Err(ShapeError::InvalidWeight(*w));
        }
        Ok(Self { id, landmarks, mean: pdm.mean, modes: pdm.modes, eigenvalues: pdm.eigenvalues, weights })
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Gather this partition's coordinates from a full shape vector.
    pub fn restrict(&self, full: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(3 * self.landmarks.len());
        for (i, &l) in self.landmarks.iter().enumerate() {
            for a in 0..3 {
                x[3 * i + a] = full[3 * l + a];
            }
        }
        x
    }

    fn check_len(&self, x: &DVector<f64>) -> Result<(), ShapeError> {
        if x.len() != self.mean.len() {
            return Err(ShapeError::LengthMismatch { expected: self.mean.len(), got: x.len() });
        }
        Ok(())
    }

    fn weight_diag(&self) -> DVector<f64> {
        DVector::from_iterator(self.mean.len(), self.weights.iter().flat_map(|&w| [w, w, w]))
    }

    /// Normal matrix `φᵀWφ` and right-hand side `φᵀW(x − x̄)`.
    fn normal_equations(&self, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let w = self.weight_diag();
        let mut wphi = self.modes.clone();
        for (r, mut row) in wphi.row_iter_mut().enumerate() {
            row *= w[r];
        }
        let h = self.modes.transpose() * &wphi;
        let g = wphi.transpose() * (x - &self.mean);
        (h, g)
    }

    /// Weighted least-squares parameters without the plausibility clamp.
    pub fn fit_unclamped(&self, x: &DVector<f64>) -> Result<DVector<f64>, ShapeError> {
        self.check_len(x)?;
        if self.n_modes() == 0 {
            return Ok(DVector::zeros(0));
        }
        let (h, g) = self.normal_equations(x);
        let chol = h.cholesky().ok_or(ShapeError::Singular)?;
        Ok(chol.solve(&g))
    }

    /// Weighted fit with every `b_i` confined to `±3√λ_i`. The box-constrained
    /// weighted problem is solved by projected coordinate descent started from
    /// the clamped unconstrained solution, so the result is never worse (in
    /// the weighted norm) than the mean shape or the plain clamp.
    pub fn fit(&self, x: &DVector<f64>) -> Result<DVector<f64>, ShapeError> {
        let b0 = self.fit_unclamped(x)?;
        if self.n_modes() == 0 {
            return Ok(b0);
        }
        let limits: Vec<f64> = self.eigenvalues.iter().map(|l| 3.0 * l.max(0.0).sqrt()).collect();
        let mut b = b0.clone();
        for i in 0..b.len() {
            b[i] = b[i].clamp(-limits[i], limits[i]);
        }
        if b == b0 {
            return Ok(b);
        }
        let (h, g) = self.normal_equations(x);
        for _ in 0..500 {
            let mut change: f64 = 0.0;
            for i in 0..b.len() {
                if h[(i, i)] <= 0.0 {
                    continue;
                }
                let mut r = g[i];
                for j in 0..b.len() {
                    if j != i {
                        r -= h[(i, j)] * b[j];
                    }
                }
                let v = (r / h[(i, i)]).clamp(-limits[i], limits[i]);
                change = change.max((v - b[i]).abs());
                b[i] = v;
            }
            if change < 1e-14 * (1.0 + b.amax()) {
                break;
            }
        }
        Ok(b)
    }

    pub fn reconstruct(&self, b: &DVector<f64>) -> Result<DVector<f64>, ShapeError> {
        if b.len() != self.n_modes() {
            return Err(ShapeError::LengthMismatch { expected: self.n_modes(), got: b.len() });
        }
        if b.is_empty() {
            return Ok(self.mean.clone());
        }
        Ok(&self.mean + &self.modes * b)
    }

    /// `‖x − y‖_W²` in this partition's landmark weights.
    pub fn weighted_residual(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let w = self.weight_diag();
        (x - y).iter().zip(w.iter()).map(|(d, w)| w * d * d).sum()
    }
}

/// Combine per-partition reconstructions (landmark ids, flat coordinates)
/// into one landmark set; shared landmarks take the plain average.
pub fn blend_overlap(
    parts: &[(&[usize], &DVector<f64>)],
    n_stations: usize,
    points_per_ring: usize,
) -> Result<TubeLandmarks, ShapeError> {
    let n = n_stations * points_per_ring;
    let mut acc = vec![Vector3::zeros(); n];
    let mut count = vec![0usize; n];
    for (ids, x) in parts {
        if x.len() != 3 * ids.len() {
            return Err(ShapeError::LengthMismatch { expected: 3 * ids.len(), got: x.len() });
        }
        for (i, &l) in ids.iter().enumerate() {
            if l >= n {
                return Err(ShapeError::LengthMismatch { expected: n, got: l + 1 });
            }
            acc[l] += Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]);
            count[l] += 1;
        }
    }
    if let Some(l) = count.iter().position(|&c| c == 0) {
        return Err(ShapeError::Uncovered(l));
    }
    let pts = acc.iter().zip(&count).map(|(p, &c)| p / c as f64).collect();
    TubeLandmarks::from_rings(n_stations, points_per_ring, pts)
}
