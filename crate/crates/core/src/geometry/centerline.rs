//! Medialness-weighted shortest-path centreline of a tubular mask.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::volume::{BinaryMask, Geometry};

use super::edt::inside_distance;
use super::GeometryError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centerline {
    pub points: Vec<[f64; 3]>,
    pub arc_length: Vec<f64>,
}

impl Centerline {
    pub fn from_points(pts: &[Vector3<f64>]) -> Self {
        let mut points: Vec<Vector3<f64>> = Vec::with_capacity(pts.len());
        for p in pts {
            if points.last().map_or(true, |q| (p - q).norm() > 1e-9) {
                points.push(*p);
            }
        }
        let mut arc = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                acc += (p - points[i - 1]).norm();
            }
            arc.push(acc);
        }
        Self { points: points.iter().map(|p| [p.x, p.y, p.z]).collect(), arc_length: arc }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.points[i])
    }

    pub fn total_length(&self) -> f64 {
        self.arc_length.last().copied().unwrap_or(0.0)
    }

    /// Unit tangent by central differences (one-sided at the ends).
    pub fn tangent(&self, i: usize) -> Vector3<f64> {
        let n = self.len();
        if n < 2 {
            return Vector3::z();
        }
        let a = self.point(i.saturating_sub(1));
        let b = self.point((i + 1).min(n - 1));
        let t = b - a;
        if t.norm() > 0.0 {
            t.normalize()
        } else {
            Vector3::z()
        }
    }
}

const NEIGHBOURS: usize = 26;

fn offsets() -> [(isize, isize, isize); NEIGHBOURS] {
    let mut out = [(0, 0, 0); NEIGHBOURS];
    let mut n = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    out[n] = (dx, dy, dz);
                    n += 1;
                }
            }
        }
    }
    out
}

fn neighbours(geom: &Geometry, idx: usize, mut f: impl FnMut(usize, f64)) {
    let [nx, ny, nz] = geom.dims;
    let [i, j, k] = geom.coords(idx);
    for (dx, dy, dz) in offsets() {
        let (a, b, c) = (i as isize + dx, j as isize + dy, k as isize + dz);
        if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
            continue;
        }
        let len = ((dx as f64 * geom.spacing[0]).powi(2)
            + (dy as f64 * geom.spacing[1]).powi(2)
            + (dz as f64 * geom.spacing[2]).powi(2))
        .sqrt();
        f(geom.index(a as usize, b as usize, c as usize), len);
    }
}

/// The largest 26-connected component (ties to the lowest label); an empty
/// mask is returned unchanged.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (count, labels) = components(mask);
    if count <= 1 {
        return mask.clone();
    }
    let mut sizes = vec![0usize; count + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    let keep = (1..=count).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).expect("non-empty") as u32;
    let data = labels.iter().map(|&l| (l == keep) as u8).collect();
    BinaryMask::new(mask.geometry().clone(), data).expect("same geometry")
}

/// 26-connected component count and the label of every foreground voxel.
pub fn components(mask: &BinaryMask) -> (usize, Vec<u32>) {
    let geom = mask.geometry();
    let data = mask.data();
    let mut label = vec![0u32; data.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if data[start] == 0 || label[start] != 0 {
            continue;
        }
        count += 1;
        label[start] = count;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            neighbours(geom, v, |u, _| {
                if data[u] != 0 && label[u] == 0 {
                    label[u] = count;
                    queue.push_back(u);
                }
            });
        }
    }
    (count as usize, label)
}

#[derive(PartialEq)]
struct State {
    cost: f64,
    node: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths over foreground voxels.
fn dijkstra(geom: &Geometry, data: &[u8], source: usize, weight: impl Fn(usize, usize, f64) -> f64) -> (Vec<f64>, Vec<usize>) {
    let mut dist = vec![f64::INFINITY; data.len()];
    let mut prev = vec![usize::MAX; data.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(State { cost: 0.0, node: source });
    while let Some(State { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        neighbours(geom, node, |u, len| {
            if data[u] == 0 {
                return;
            }
            let c = cost + weight(node, u, len);
            if c < dist[u] {
                dist[u] = c;
                prev[u] = node;
                heap.push(State { cost: c, node: u });
            }
        });
    }
    (dist, prev)
}

fn farthest(dist: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &d) in dist.iter().enumerate() {
        if d.is_finite() && d > best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Drop leading/trailing path voxels while the inside distance keeps
/// rising inward, so an endpoint found at a cap corner moves onto the axis.
fn trim_ends(path: &mut Vec<usize>, dt: &[f64]) {
    let mut lo = 0;
    while lo + 2 < path.len() && dt[path[lo + 1]] > dt[path[lo]] {
        lo += 1;
    }
    let mut hi = path.len() - 1;
    while hi > lo + 2 && dt[path[hi - 1]] > dt[path[hi]] {
        hi -= 1;
    }
    path.truncate(hi + 1);
    path.drain(..lo);
}

fn nearest_foreground(mask: &BinaryMask, p: Vector3<f64>) -> Option<usize> {
    let geom = mask.geometry();
    let mut best = (f64::INFINITY, None);
    for (idx, &m) in mask.data().iter().enumerate() {
        if m == 0 {
            continue;
        }
        let c = geom.coords(idx);
        let d = (geom.voxel_center_mm(c[0], c[1], c[2]) - p).norm_squared();
        if d < best.0 {
            best = (d, Some(idx));
        }
    }
    best.1
}

/// Centreline of a single-component mask. Endpoints default to a geodesic
/// double sweep, trimmed inward along the path while the inside distance
/// rises; the ends are then extended along the end tangents to reach the caps.
pub fn extract_centerline(mask: &BinaryMask, endpoints: Option<(Vector3<f64>, Vector3<f64>)>) -> Result<Centerline, GeometryError> {
    let geom = mask.geometry();
    let data = mask.data();
    let (n_comp, _) = components(mask);
    match n_comp {
        0 => return Err(GeometryError::EmptyMask),
        1 => {}
        n => return Err(GeometryError::MultipleComponents(n)),
    }
    let dt = inside_distance(geom, data);
    let (a, b) = match endpoints {
        Some((pa, pb)) => (
            nearest_foreground(mask, pa).ok_or(GeometryError::EmptyMask)?,
            nearest_foreground(mask, pb).ok_or(GeometryError::EmptyMask)?,
        ),
        None => {
            let start = data.iter().position(|&m| m != 0).expect("non-empty");
            let plain = |_: usize, _: usize, len: f64| len;
            let a = farthest(&dijkstra(geom, data, start, plain).0);
            let b = farthest(&dijkstra(geom, data, a, plain).0);
            (a, b)
        }
    };
    let (_, prev) = dijkstra(geom, data, a, |_, u, len| len * (1.0 + 1.0 / dt[u].max(1e-6)));
    let mut path = vec![b];
    let mut v = b;
    while v != a {
        v = prev[v];
        if v == usize::MAX {
            return Err(GeometryError::MultipleComponents(2));
        }
        path.push(v);
    }
    path.reverse();
    if endpoints.is_none() {
        trim_ends(&mut path, &dt);
    }
    let centre = |idx: usize| {
        let c = geom.coords(idx);
        geom.voxel_center_mm(c[0], c[1], c[2])
    };
    let mut pts: Vec<Vector3<f64>> = path.iter().map(|&i| centre(i)).collect();
    if endpoints.is_none() && pts.len() >= 2 {
        // The last radius-or-so of the path bends toward the cap corner it
        // started from; replace it by a straight run along the interior
        // tangent out to the last foreground voxel.
        let step = geom.min_spacing();
        let inside = |q: Vector3<f64>| {
            let v = geom.to_voxel(q).map(|c| c.round());
            (0..3).all(|a| v[a] >= 0.0 && v[a] <= (geom.dims[a] - 1) as f64)
                && mask.get(v[0] as usize, v[1] as usize, v[2] as usize)
        };
        let rebuild = |pts: &mut Vec<Vector3<f64>>, ids: &mut Vec<usize>| {
            let depth = dt[ids[0]];
            let mut cut = 0;
            while cut + 3 < pts.len() && (pts[cut + 1] - pts[0]).norm() <= depth {
                cut += 1;
            }
            let tip = pts[cut];
            let mut far = cut;
            while far + 1 < pts.len() && (pts[far] - tip).norm() < 2.0 * depth.max(step) {
                far += 1;
            }
            let dir = tip - pts[far];
            pts.drain(..cut);
            ids.drain(..cut);
            if dir.norm() == 0.0 {
                return;
            }
            let dir = dir.normalize();
            let mut head = Vec::new();
            let mut t = step;
            while inside(tip + dir * t) {
                head.push(tip + dir * t);
                t += step;
            }
            head.reverse();
            head.append(pts);
            *pts = head;
        };
        let mut ids = path.clone();
        rebuild(&mut pts, &mut ids);
        pts.reverse();
        ids.reverse();
        rebuild(&mut pts, &mut ids);
        pts.reverse();
    }
    let smoothed: Vec<Vector3<f64>> = (0..pts.len())
        .map(|i| if i == 0 || i + 1 == pts.len() { pts[i] } else { (pts[i - 1] + pts[i] + pts[i + 1]) / 3.0 })
        .collect();
    Ok(Centerline::from_points(&smoothed))
}

/// Nearest centreline point to `p` and its index; ties go to the smaller
/// arc length.
pub fn closest_centerline_point(cl: &Centerline, p: Vector3<f64>) -> (Vector3<f64>, usize) {
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..cl.len() {
        let d = (cl.point(i) - p).norm_squared();
        if d < best.0 {
            best = (d, i);
        }
    }
    (cl.point(best.1), best.1)
}
