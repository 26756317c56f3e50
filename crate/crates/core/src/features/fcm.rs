//! Three-class fuzzy c-means on voxel intensities.

use crate::volume::{percentile_sorted, Volume3D};

use super::FeatureError;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FcmConfig {
    pub fuzzifier: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for FcmConfig {
    fn default() -> Self {
        Self { fuzzifier: 2.0, max_iters: 100, tol: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct FcmResult {
    /// Membership volumes ordered by ascending cluster centre.
    pub memberships: [Volume3D; 3],
    pub centers: [f64; 3],
    /// Objective `Σ u^m d²` evaluated after each membership update.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

#[inline]
fn memberships_for(x: f64, c: &[f64; 3], expo: f64) -> [f64; 3] {
    let d = [(x - c[0]).abs(), (x - c[1]).abs(), (x - c[2]).abs()];
    for k in 0..3 {
        if d[k] == 0.0 {
            let mut u = [0.0; 3];
            u[k] = 1.0;
            return u;
        }
    }
    let mut u = [0.0; 3];
    for k in 0..3 {
        let mut s = 0.0;
        for j in 0..3 {
            let ratio = d[k] / d[j];
            s += if expo == 2.0 { ratio * ratio } else { ratio.powf(expo) };
        }
        u[k] = 1.0 / s;
    }
    u
}

fn initial_centers(data: &[f64]) -> [f64; 3] {
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let c = [
        percentile_sorted(&sorted, 10.0),
        percentile_sorted(&sorted, 50.0),
        percentile_sorted(&sorted, 90.0),
    ];
    if c[0] < c[1] && c[1] < c[2] {
        return c;
    }
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    // the median tie above leaves a mid value that may coincide with an end
    let mid = sorted
        .iter()
        .cloned()
        .find(|&v| v > lo && v < hi)
        .map(|v| if c[1] > lo && c[1] < hi { c[1] } else { v })
        .unwrap_or(0.5 * (lo + hi));
    [lo, mid, hi]
}

pub fn fuzzy_cmeans3(vol: &Volume3D, fuzzifier: f64, max_iters: usize, tol: f64) -> Result<FcmResult, FeatureError> {
    if !(fuzzifier > 1.0) {
        return Err(FeatureError::InvalidArgument(format!("fuzzifier must exceed 1, got {fuzzifier}")));
    }
    let data = vol.data();
    let mut distinct: Vec<f64> = Vec::with_capacity(3);
    for &v in data {
        if !distinct.contains(&v) {
            distinct.push(v);
            if distinct.len() == 3 {
                break;
            }
        }
    }
    if distinct.len() < 3 {
        return Err(FeatureError::DegenerateInput(format!(
            "fuzzy c-means needs at least 3 distinct intensities, found {}",
            distinct.len()
        )));
    }

    let m = fuzzifier;
    let expo = 2.0 / (m - 1.0);
    let mut centers = initial_centers(data);
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut num = [0.0; 3];
        let mut den = [0.0; 3];
        let mut obj = 0.0;
        for &x in data {
            let u = memberships_for(x, &centers, expo);
            for k in 0..3 {
                let um = if m == 2.0 { u[k] * u[k] } else { u[k].powf(m) };
                num[k] += um * x;
                den[k] += um;
                let d = x - centers[k];
                obj += um * d * d;
            }
        }
        objective.push(obj);
        let mut next = centers;
        for k in 0..3 {
            if den[k] > 0.0 {
                next[k] = num[k] / den[k];
            }
        }
        let shift = (0..3).map(|k| (next[k] - centers[k]).abs()).fold(0.0, f64::max);
        centers = next;
        if shift < tol {
            break;
        }
    }

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let sorted_centers = [centers[order[0]], centers[order[1]], centers[order[2]]];
    let mut channels = [Vec::with_capacity(data.len()), Vec::with_capacity(data.len()), Vec::with_capacity(data.len())];
    for &x in data {
        let u = memberships_for(x, &sorted_centers, expo);
        for k in 0..3 {
            channels[k].push(u[k]);
        }
    }
    let geom = vol.geometry().clone();
    let [c0, c1, c2] = channels;
    let mk = |d: Vec<f64>| Volume3D::new(geom.clone(), d).expect("membership volume");
    Ok(FcmResult {
        memberships: [mk(c0), mk(c1), mk(c2)],
        centers: sorted_centers,
        objective,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn blocks() -> Volume3D {
        let g = Geometry::new([12, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        Volume3D::from_fn(g, |i, _, _| (i / 4) as f64 * 100.0)
    }

    #[test]
    fn separated_blocks_have_dominant_memberships() {
        let vol = blocks();
        let r = fuzzy_cmeans3(&vol, 2.0, 100, 1e-5).unwrap();
        assert!((r.centers[0] - 0.0).abs() < 1e-6 && (r.centers[2] - 200.0).abs() < 1e-6);
        for (idx, &x) in vol.data().iter().enumerate() {
            let class = (x / 100.0) as usize;
            assert!(r.memberships[class].data()[idx] > 0.99);
        }
    }

    #[test]
    fn memberships_sum_to_one() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let g = Geometry::new([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume3D::from_fn(g, |_, _, _| rng.gen_range(0.0..50.0));
        let r = fuzzy_cmeans3(&vol, 2.0, 100, 1e-5).unwrap();
        for i in 0..vol.data().len() {
            let s: f64 = r.memberships.iter().map(|m| m.data()[i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(r.memberships.iter().all(|m| (0.0..=1.0).contains(&m.data()[i])));
        }
        assert!(r.centers[0] < r.centers[1] && r.centers[1] < r.centers[2]);
    }

    #[test]
    fn large_fuzzifier_flattens_memberships() {
        let g = Geometry::new([12, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume3D::from_fn(g, |i, j, k| (i / 4) as f64 * 100.0 + 0.37 * j as f64 + 0.11 * k as f64);
        let r = fuzzy_cmeans3(&vol, 200.0, 100, 1e-5).unwrap();
        let idx = vol.geometry().index(0, 1, 1);
        for m in &r.memberships {
            assert!((m.data()[idx] - 1.0 / 3.0).abs() < 0.02, "{}", m.data()[idx]);
        }
    }

    #[test]
    fn two_values_is_degenerate() {
        let g = Geometry::new([4, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume3D::from_fn(g, |i, _, _| (i % 2) as f64);
        assert!(matches!(fuzzy_cmeans3(&vol, 2.0, 10, 1e-5), Err(FeatureError::DegenerateInput(_))));
    }

    #[test]
    fn objective_is_non_increasing() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(21);
        let g = Geometry::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume3D::from_fn(g, |i, _, _| {
            let base = if i < 3 { 10.0 } else if i < 7 { 60.0 } else { 90.0 };
            base + rng.gen_range(-15.0..15.0)
        });
        let r = fuzzy_cmeans3(&vol, 2.0, 100, 1e-9).unwrap();
        assert!(r.objective.len() > 2);
        for w in r.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }
}
