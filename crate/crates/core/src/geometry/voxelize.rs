//! Scan conversion of a ring-structured landmark surface.

use nalgebra::{Vector2, Vector3};

use crate::shape::{any_orthogonal, TubeLandmarks};
use crate::volume::{BinaryMask, Geometry};

use super::GeometryError;

fn point_in_polygon(p: Vector2<f64>, poly: &[Vector2<f64>]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Fill every voxel whose centre lies inside the surface. Each segment
/// between consecutive rings is the region between the two ring planes
/// (normals = station tangents); inside it the cross-section is the ring
/// polygon linearly interpolated at the point's relative plane position.
pub fn voxelize(tube: &TubeLandmarks, geom: &Geometry) -> Result<BinaryMask, GeometryError> {
    let offenders: Vec<usize> = (0..tube.len()).filter(|&l| !geom.contains_mm(tube.point(l))).collect();
    if !offenders.is_empty() {
        return Err(GeometryError::OutOfBounds(offenders));
    }
    let mut mask = BinaryMask::empty(geom.clone());
    let kk = tube.points_per_ring;
    let tangents = tube.tangents();
    for s in 0..tube.n_stations - 1 {
        let (c0, c1) = (tube.station(s), tube.station(s + 1));
        let (t0, t1) = (tangents[s], tangents[s + 1]);
        let r0: Vec<Vector3<f64>> = (0..kk).map(|i| tube.point(s * kk + i)).collect();
        let r1: Vec<Vector3<f64>> = (0..kk).map(|i| tube.point((s + 1) * kk + i)).collect();
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in r0.iter().chain(&r1).chain([&c0, &c1]) {
            let v = geom.to_voxel(*p);
            lo = lo.inf(&v);
            hi = hi.sup(&v);
        }
        let range = |a: usize| {
            let from = (lo[a].floor() - 1.0).max(0.0) as usize;
            let to = ((hi[a].ceil() + 1.0) as usize).min(geom.dims[a] - 1);
            from..=to
        };
        let last = s + 1 == tube.n_stations - 1;
        for k in range(2) {
            for j in range(1) {
                for i in range(0) {
                    if mask.get(i, j, k) {
                        continue;
                    }
                    let p = geom.voxel_center_mm(i, j, k);
                    let d0 = (p - c0).dot(&t0);
                    let d1 = (p - c1).dot(&t1);
                    if d0 < 0.0 || d1 > 0.0 || (d1 == 0.0 && !last) {
                        continue;
                    }
                    let u = if d0 - d1 > 0.0 { d0 / (d0 - d1) } else { 0.0 };
                    let c = c0 * (1.0 - u) + c1 * u;
                    let t = (t0 * (1.0 - u) + t1 * u).normalize();
                    let e1 = any_orthogonal(&t);
                    let e2 = t.cross(&e1);
                    let proj = |q: Vector3<f64>| {
                        let d = q - c;
                        Vector2::new(d.dot(&e1), d.dot(&e2))
                    };
                    let poly: Vec<Vector2<f64>> = (0..kk).map(|m| proj(r0[m] * (1.0 - u) + r1[m] * u)).collect();
                    if point_in_polygon(proj(p), &poly) {
                        mask.set(i, j, k, true);
                    }
                }
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tube_along_x(n: usize, kk: usize, radius: f64, x0: f64, step: f64, c: (f64, f64)) -> TubeLandmarks {
        let mut pts = Vec::new();
        for s in 0..n {
            for m in 0..kk {
                let a = m as f64 / kk as f64 * std::f64::consts::TAU;
                pts.push(Vector3::new(x0 + s as f64 * step, c.0 + radius * a.cos(), c.1 + radius * a.sin()));
            }
        }
        TubeLandmarks::from_rings(n, kk, pts).unwrap()
    }

    #[test]
    fn cylinder_volume_close_to_analytic() {
        let geom = Geometry::new([32, 16, 16], [1.0; 3], [0.0; 3]).unwrap();
        let tube = tube_along_x(20, 32, 3.0, 5.0, 1.0, (7.5, 7.3));
        let mask = voxelize(&tube, &geom).unwrap();
        let analytic = std::f64::consts::PI * 9.0 * 19.0;
        let got = mask.count() as f64;
        assert!((got - analytic).abs() < 0.1 * analytic, "{got} vs {analytic}");
    }

    #[test]
    fn zero_radius_is_empty() {
        let geom = Geometry::new([32, 16, 16], [1.0; 3], [0.0; 3]).unwrap();
        let tube = tube_along_x(10, 8, 0.0, 5.0, 1.0, (7.5, 7.5));
        assert!(voxelize(&tube, &geom).unwrap().is_empty());
    }

    #[test]
    fn out_of_bounds_lists_offenders() {
        let geom = Geometry::new([12, 16, 16], [1.0; 3], [0.0; 3]).unwrap();
        let tube = tube_along_x(10, 8, 2.0, 5.0, 1.0, (7.5, 7.5));
        match voxelize(&tube, &geom) {
            Err(GeometryError::OutOfBounds(ids)) => assert!(ids.iter().all(|&l| l >= 7 * 8) && !ids.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn surface_round_trip_within_voxel_diagonal() {
        let geom = Geometry::new([40, 24, 24], [0.5, 0.5, 0.6], [0.0; 3]).unwrap();
        let mut pts = Vec::new();
        let (n, kk) = (24, 16);
        for s in 0..n {
            let x = 3.0 + s as f64 * 0.6;
            let cy = 6.0 + 0.8 * (x / 4.0).sin();
            let r = 2.0 + 0.5 * (s as f64 / n as f64);
            for m in 0..kk {
                let a = m as f64 / kk as f64 * std::f64::consts::TAU;
                pts.push(Vector3::new(x, cy + r * a.cos(), 7.0 + r * a.sin()));
            }
        }
        let tube = TubeLandmarks::from_rings(n, kk, pts).unwrap();
        let mask = voxelize(&tube, &geom).unwrap();
        let [nx, ny, nz] = geom.dims;
        let mut boundary = Vec::new();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if !mask.get(i, j, k) {
                        continue;
                    }
                    let (a, b, c) = (i as isize, j as isize, k as isize);
                    let nb = [(a - 1, b, c), (a + 1, b, c), (a, b - 1, c), (a, b + 1, c), (a, b, c - 1), (a, b, c + 1)];
                    if nb.iter().any(|&(x, y, z)| !mask.get_signed(x, y, z)) {
                        boundary.push(geom.voxel_center_mm(i, j, k));
                    }
                }
            }
        }
        let diag = geom.voxel_diagonal();
        for l in 0..tube.len() {
            let p = tube.point(l);
            let d = boundary.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert!(d <= diag, "landmark {l}: {d}");
        }
    }
}
