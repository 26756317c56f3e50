use std::path::Path;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::ShapeError;

/// Ring-structured landmark set: `n_stations` rings of `points_per_ring`
/// points each, ordered proximal to distal. Landmark `s * K + k` is point
/// `k` of ring `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeLandmarks {
    pub n_stations: usize,
    pub points_per_ring: usize,
    pub stations: Vec<[f64; 3]>,
    pub rings: Vec<[f64; 3]>,
}

impl TubeLandmarks {
    /// Build from ring points; station centres are the ring centroids.
    pub fn from_rings(n_stations: usize, points_per_ring: usize, rings: Vec<Vector3<f64>>) -> Result<Self, ShapeError> {
        if rings.len() != n_stations * points_per_ring {
            return Err(ShapeError::LengthMismatch { expected: n_stations * points_per_ring, got: rings.len() });
        }
        let mut t = Self {
            n_stations,
            points_per_ring,
            stations: vec![[0.0; 3]; n_stations],
            rings: rings.iter().map(|p| [p.x, p.y, p.z]).collect(),
        };
        t.recompute_stations();
        Ok(t)
    }

    pub fn from_vector(n_stations: usize, points_per_ring: usize, x: &DVector<f64>) -> Result<Self, ShapeError> {
        if x.len() != 3 * n_stations * points_per_ring {
            return Err(ShapeError::LengthMismatch { expected: 3 * n_stations * points_per_ring, got: x.len() });
        }
        let pts = (0..x.len() / 3).map(|l| Vector3::new(x[3 * l], x[3 * l + 1], x[3 * l + 2])).collect();
        Self::from_rings(n_stations, points_per_ring, pts)
    }

    pub fn len(&self) -> usize {
        self.rings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rings.is_empty()
    }

    pub fn point(&self, l: usize) -> Vector3<f64> {
        Vector3::from(self.rings[l])
    }

    pub fn points(&self) -> Vec<Vector3<f64>> {
        self.rings.iter().map(|&p| Vector3::from(p)).collect()
    }

    pub fn station(&self, s: usize) -> Vector3<f64> {
        Vector3::from(self.stations[s])
    }

    pub fn station_of(&self, l: usize) -> usize {
        l / self.points_per_ring
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(3 * self.len(), self.rings.iter().flat_map(|p| p.iter().copied()))
    }

    pub fn recompute_stations(&mut self) {
        let k = self.points_per_ring;
        for s in 0..self.n_stations {
            let mut c = Vector3::zeros();
            for p in &self.rings[s * k..(s + 1) * k] {
                c += Vector3::from(*p);
            }
            c /= k as f64;
            self.stations[s] = [c.x, c.y, c.z];
        }
    }

    pub fn same_topology(&self, other: &TubeLandmarks) -> bool {
        self.n_stations == other.n_stations && self.points_per_ring == other.points_per_ring
    }

    /// Unit tangent at each station (one-sided at the ends).
    pub fn tangents(&self) -> Vec<Vector3<f64>> {
        let n = self.n_stations;
        (0..n)
            .map(|s| {
                let a = self.station(s.saturating_sub(1));
                let b = self.station((s + 1).min(n - 1));
                let t = b - a;
                if t.norm() > 0.0 {
                    t.normalize()
                } else {
                    Vector3::z()
                }
            })
            .collect()
    }

    /// Per-landmark unit normal pointing away from its ring centre, in the
    /// plane orthogonal to the station tangent.
    pub fn outward_normals(&self) -> Vec<Vector3<f64>> {
        let tangents = self.tangents();
        (0..self.len())
            .map(|l| {
                let s = self.station_of(l);
                let t = tangents[s];
                let r = self.point(l) - self.station(s);
                let n = r - t * r.dot(&t);
                if n.norm() > 1e-12 {
                    n.normalize()
                } else {
                    any_orthogonal(&t)
                }
            })
            .collect()
    }

    /// Mean distance of ring points from their centroid, per station.
    pub fn ring_radii(&self) -> Vec<f64> {
        let k = self.points_per_ring;
        (0..self.n_stations)
            .map(|s| {
                let c = self.station(s);
                (0..k).map(|i| (self.point(s * k + i) - c).norm()).sum::<f64>() / k as f64
            })
            .collect()
    }

    /// Topology and geometry checks: counts, strictly ordered stations and
    /// simple ring polygons in each ring's best-fit plane.
    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.n_stations < 2 || self.points_per_ring < 3 {
            return Err(ShapeError::InvalidLandmarks(format!(
                "need at least 2 stations and 3 points per ring, got {}x{}",
                self.n_stations, self.points_per_ring
            )));
        }
        if self.rings.len() != self.n_stations * self.points_per_ring || self.stations.len() != self.n_stations {
            return Err(ShapeError::LengthMismatch {
                expected: self.n_stations * self.points_per_ring,
                got: self.rings.len(),
            });
        }
        if self.rings.iter().flatten().chain(self.stations.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(ShapeError::InvalidLandmarks("non-finite coordinate".into()));
        }
        for s in 1..self.n_stations {
            if (self.station(s) - self.station(s - 1)).norm() <= 0.0 {
                return Err(ShapeError::InvalidLandmarks(format!("stations {} and {} coincide", s - 1, s)));
            }
        }
        let tangents = self.tangents();
        for s in 0..self.n_stations {
            if !ring_is_simple(self, s, &tangents[s]) {
                return Err(ShapeError::InvalidLandmarks(format!("ring {s} self-intersects")));
            }
        }
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, ShapeError> {
        let text = std::fs::read_to_string(path).map_err(|e| ShapeError::Io(format!("{}: {e}", path.display())))?;
        let t: Self =
            serde_json::from_str(&text).map_err(|e| ShapeError::Io(format!("{}: {e}", path.display())))?;
        t.validate()?;
        Ok(t)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), ShapeError> {
        let text = serde_json::to_string_pretty(self).expect("landmarks serialise");
        std::fs::write(path, text).map_err(|e| ShapeError::Io(format!("{}: {e}", path.display())))
    }
}

pub(crate) fn any_orthogonal(t: &Vector3<f64>) -> Vector3<f64> {
    let a = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let n = a - t * a.dot(t);
    n.normalize()
}

fn ring_is_simple(t: &TubeLandmarks, s: usize, tangent: &Vector3<f64>) -> bool {
    let k = t.points_per_ring;
    let c = t.station(s);
    let u = any_orthogonal(tangent);
    let v = tangent.cross(&u);
    let pts: Vec<(f64, f64)> = (0..k)
        .map(|i| {
            let d = t.point(s * k + i) - c;
            (d.dot(&u), d.dot(&v))
        })
        .collect();
    // a collapsed ring (zero radius) is degenerate but not self-intersecting
    if pts.iter().all(|p| p.0.abs() < 1e-12 && p.1.abs() < 1e-12) {
        return true;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    for i in 0..k {
        let (a, b) = (pts[i], pts[(i + 1) % k]);
        for j in i + 2..k {
            if (j + 1) % k == i {
                continue;
            }
            let (c2, d) = (pts[j], pts[(j + 1) % k]);
            let d1 = cross(a, b, c2);
            let d2 = cross(a, b, d);
            let d3 = cross(c2, d, a);
            let d4 = cross(c2, d, b);
            if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
                return false;
            }
        }
    }
    true
}
