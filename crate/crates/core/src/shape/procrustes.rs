//! Similarity transforms and generalized Procrustes alignment.

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{ShapeError, TubeLandmarks};

/// `p ↦ scale · R p + translation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn identity() -> Self {
        Self::from_parts(1.0, Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_parts(scale: f64, r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[(i, j)];
            }
        }
        Self { scale, rotation, translation: [t.x, t.y, t.z] }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation_matrix() * p) + self.translation_vector()
    }

    pub fn apply_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        let r = self.rotation_matrix();
        let t = self.translation_vector();
        let mut out = DVector::zeros(x.len());
        for l in 0..x.len() / 3 {
            let p = self.scale * (r * Vector3::new(x[3 * l], x[3 * l + 1], x[3 * l + 2])) + t;
            out[3 * l] = p.x;
            out[3 * l + 1] = p.y;
            out[3 * l + 2] = p.z;
        }
        out
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation_matrix().transpose();
        let s = 1.0 / self.scale;
        Self::from_parts(s, rt, -(s * (rt * self.translation_vector())))
    }
}

fn points(x: &DVector<f64>) -> impl Iterator<Item = Vector3<f64>> + '_ {
    (0..x.len() / 3).map(move |l| Vector3::new(x[3 * l], x[3 * l + 1], x[3 * l + 2]))
}

fn centroid(x: &DVector<f64>) -> Vector3<f64> {
    points(x).sum::<Vector3<f64>>() / (x.len() / 3) as f64
}

/// Rotation `R` maximising `Σ (R a_i) · b_i` for (already centred) point sets.
fn kabsch(a: &DVector<f64>, b: &DVector<f64>) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for (p, q) in points(a).zip(points(b)) {
        h += p * q.transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let d = (vt.transpose() * u.transpose()).determinant().signum();
    let d = if d == 0.0 { 1.0 } else { d };
    vt.transpose() * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose()
}

/// Least-squares similarity mapping `source` onto `target` (Umeyama).
pub fn fit_similarity(source: &DVector<f64>, target: &DVector<f64>) -> Similarity {
    let cs = centroid(source);
    let ct = centroid(target);
    let a = center(source, &cs);
    let b = center(target, &ct);
    let r = kabsch(&a, &b);
    let var_a: f64 = a.norm_squared();
    let mut num = 0.0;
    for (p, q) in points(&a).zip(points(&b)) {
        num += (r * p).dot(&q);
    }
    let s = if var_a > 0.0 { num / var_a } else { 1.0 };
    Similarity::from_parts(s, r, ct - s * (r * cs))
}

fn center(x: &DVector<f64>, c: &Vector3<f64>) -> DVector<f64> {
    let mut out = x.clone();
    for l in 0..x.len() / 3 {
        out[3 * l] -= c.x;
        out[3 * l + 1] -= c.y;
        out[3 * l + 2] -= c.z;
    }
    out
}

fn rotate(x: &DVector<f64>, r: &Matrix3<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(x.len());
    for (l, p) in points(x).enumerate() {
        let q = r * p;
        out[3 * l] = q.x;
        out[3 * l + 1] = q.y;
        out[3 * l + 2] = q.z;
    }
    out
}

fn rms_size(x: &DVector<f64>) -> f64 {
    (x.norm_squared() / (x.len() / 3) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct ProcrustesResult {
    /// Aligned shapes: centred, unit RMS size, rotated onto the mean.
    pub aligned: Vec<DVector<f64>>,
    /// Mean shape, centred, unit RMS size.
    pub mean: DVector<f64>,
    /// Per-shape transform from its original coordinates to the aligned frame.
    pub transforms: Vec<Similarity>,
    /// Mean RMS size of the input shapes (mm).
    pub mean_size: f64,
    /// `Σ ‖y_i − ȳ‖²` after each iteration.
    pub distance_log: Vec<f64>,
    pub iterations: usize,
}

pub fn procrustes_align(shapes: &[TubeLandmarks]) -> Result<ProcrustesResult, ShapeError> {
    if shapes.len() < 2 {
        return Err(ShapeError::InsufficientShapes { needed: 2, got: shapes.len() });
    }
    for s in &shapes[1..] {
        if !s.same_topology(&shapes[0]) {
            return Err(ShapeError::TopologyMismatch {
                expected: (shapes[0].n_stations, shapes[0].points_per_ring),
                got: (s.n_stations, s.points_per_ring),
            });
        }
    }
    let raw: Vec<DVector<f64>> = shapes.iter().map(|s| s.to_vector()).collect();
    let mut pre = Vec::with_capacity(raw.len());
    let mut base = Vec::with_capacity(raw.len());
    let mut sizes = Vec::with_capacity(raw.len());
    for x in &raw {
        let c = centroid(x);
        let centred = center(x, &c);
        let size = rms_size(&centred);
        if size <= 0.0 {
            return Err(ShapeError::InvalidLandmarks("shape collapses to a point".into()));
        }
        sizes.push(size);
        base.push((c, size));
        pre.push(centred / size);
    }
    let mut rot: Vec<Matrix3<f64>> = vec![Matrix3::identity(); pre.len()];
    let mut mean = pre[0].clone();
    let mut aligned = pre.clone();
    let mut log = Vec::new();
    let mut iterations = 0;
    for _ in 0..50 {
        iterations += 1;
        for i in 0..pre.len() {
            rot[i] = kabsch(&pre[i], &mean);
            aligned[i] = rotate(&pre[i], &rot[i]);
        }
        let mut avg = DVector::zeros(mean.len());
        for y in &aligned {
            avg += y;
        }
        avg /= aligned.len() as f64;
        log.push(aligned.iter().map(|y| (y - &avg).norm_squared()).sum());
        let size = rms_size(&avg);
        let next = if size > 0.0 { avg / size } else { mean.clone() };
        let change = (&next - &mean).norm();
        mean = next;
        if change < 1e-7 {
            break;
        }
    }
    let transforms = base
        .iter()
        .zip(&rot)
        .map(|(&(c, size), r)| {
            let s = 1.0 / size;
            Similarity::from_parts(s, *r, -(s * (r * c)))
        })
        .collect();
    Ok(ProcrustesResult {
        aligned,
        mean,
        transforms,
        mean_size: sizes.iter().sum::<f64>() / sizes.len() as f64,
        distance_log: log,
        iterations,
    })
}

/// Average of similarity transforms: mean scale and translation, rotation
/// projected from the elementwise mean back onto SO(3).
pub fn mean_similarity(ts: &[Similarity]) -> Similarity {
    if ts.is_empty() {
        return Similarity::identity();
    }
    let n = ts.len() as f64;
    let scale = ts.iter().map(|t| t.scale).sum::<f64>() / n;
    let t = ts.iter().map(|t| t.translation_vector()).sum::<Vector3<f64>>() / n;
    let m = ts.iter().map(|t| t.rotation_matrix()).sum::<Matrix3<f64>>() / n;
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if d == 0.0 { 1.0 } else { d })) * vt;
    Similarity::from_parts(scale, r, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn tube(rng: &mut Xoshiro256PlusPlus, jitter: f64) -> TubeLandmarks {
        let mut pts = Vec::new();
        for s in 0..6 {
            for i in 0..8 {
                let a = i as f64 / 8.0 * std::f64::consts::TAU;
                let r = 1.0 + 0.1 * s as f64;
                pts.push(Vector3::new(
                    r * a.cos() + jitter * rng.gen_range(-1.0..1.0),
                    r * a.sin() + jitter * rng.gen_range(-1.0..1.0),
                    2.0 * s as f64 + 0.3 * (s as f64).powi(2) + jitter * rng.gen_range(-1.0..1.0),
                ));
            }
        }
        TubeLandmarks::from_rings(6, 8, pts).unwrap()
    }

    fn transform(t: &TubeLandmarks, sim: &Similarity) -> TubeLandmarks {
        TubeLandmarks::from_rings(t.n_stations, t.points_per_ring, t.points().iter().map(|p| sim.apply(p)).collect())
            .unwrap()
    }

    #[test]
    fn rigid_copies_coincide() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let a = tube(&mut rng, 0.0);
        let r = Rotation3::from_euler_angles(0.3, -0.7, 1.1).into_inner();
        let b = transform(&a, &Similarity::from_parts(1.0, r, Vector3::new(5.0, -3.0, 12.0)));
        let res = procrustes_align(&[a, b]).unwrap();
        assert!((&res.aligned[0] - &res.aligned[1]).amax() < 1e-6);
    }

    #[test]
    fn aligned_input_is_fixed_point() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let a = tube(&mut rng, 0.0);
        let res = procrustes_align(&[a.clone(), a.clone()]).unwrap();
        let x = a.to_vector();
        let c = centroid(&x);
        let canon = center(&x, &c) / rms_size(&center(&x, &c));
        assert!((&res.aligned[0] - &canon).amax() < 1e-9);
        assert!((&res.mean - &canon).amax() < 1e-9);
    }

    #[test]
    fn transforms_map_inputs_onto_aligned() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let shapes: Vec<_> = (0..5).map(|_| tube(&mut rng, 0.2)).collect();
        let res = procrustes_align(&shapes).unwrap();
        for (s, (t, y)) in shapes.iter().zip(res.transforms.iter().zip(&res.aligned)) {
            assert!((t.apply_vector(&s.to_vector()) - y).amax() < 1e-9);
            let back = t.inverse().apply_vector(y);
            assert!((back - s.to_vector()).amax() < 1e-9);
        }
        assert!(centroid(&res.mean).norm() < 1e-12);
        assert!((rms_size(&res.mean) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distance_log_non_increasing() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let shapes: Vec<_> = (0..8)
            .map(|i| {
                let t = tube(&mut rng, 0.3);
                let r = Rotation3::from_euler_angles(0.2 * i as f64, 0.1, -0.3 * i as f64).into_inner();
                transform(&t, &Similarity::from_parts(1.0 + 0.1 * i as f64, r, Vector3::new(i as f64, 0.0, 0.0)))
            })
            .collect();
        let res = procrustes_align(&shapes).unwrap();
        assert!(res.distance_log.len() >= 2);
        for w in res.distance_log.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{w:?}");
        }
    }

    #[test]
    fn similarity_fit_recovers_transform() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let a = tube(&mut rng, 0.1).to_vector();
        let r = Rotation3::from_euler_angles(-0.4, 0.9, 0.2).into_inner();
        let sim = Similarity::from_parts(1.7, r, Vector3::new(1.0, 2.0, 3.0));
        let fit = fit_similarity(&a, &sim.apply_vector(&a));
        assert!((fit.scale - 1.7).abs() < 1e-10);
        assert!((fit.rotation_matrix() - r).amax() < 1e-10);
        assert!((fit.translation_vector() - Vector3::new(1.0, 2.0, 3.0)).amax() < 1e-9);
    }

    #[test]
    fn topology_mismatch_is_error() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
        let a = tube(&mut rng, 0.0);
        let b = TubeLandmarks::from_rings(3, 16, a.points()).unwrap();
        assert!(matches!(procrustes_align(&[a, b]), Err(ShapeError::TopologyMismatch { .. })));
    }
}
