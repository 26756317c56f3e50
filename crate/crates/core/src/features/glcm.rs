//! Gray-level co-occurrence statistics over a patch.
//!
//! The patch is quantized to `levels` bins over its own min–max range. For
//! each in-plane direction a symmetric co-occurrence matrix is accumulated
//! over every z-slice and normalised; eleven statistics are then computed
//! on 1-based gray levels. The output is direction-major: entry
//! `dir * 11 + stat`.

use crate::volume::Patch;

use super::FeatureError;

pub const GLCM_STATS: usize = 11;
pub const GLCM_DIRECTIONS: usize = 4;
pub const GLCM_LEN: usize = GLCM_STATS * GLCM_DIRECTIONS;

pub const STAT_NAMES: [&str; GLCM_STATS] = [
    "autocorrelation",
    "contrast",
    "cluster_shade",
    "dissimilarity",
    "energy",
    "entropy",
    "variance",
    "homogeneity",
    "correlation",
    "cluster_prominence",
    "inverse_difference",
];

/// In-plane unit steps for 0, π/4, π/2 and 3π/4.
pub const DIRECTIONS: [(i64, i64); GLCM_DIRECTIONS] = [(1, 0), (1, 1), (0, 1), (-1, 1)];

#[derive(Clone, Debug, PartialEq)]
pub struct GlcmFeatureVector {
    pub values: [f64; GLCM_LEN],
}

impl GlcmFeatureVector {
    pub fn get(&self, direction: usize, stat: usize) -> f64 {
        self.values[direction * GLCM_STATS + stat]
    }
}

/// Quantize to `0..levels` over the patch's own range; a constant patch maps to 0.
pub fn quantize(patch: &Patch, levels: usize) -> Vec<usize> {
    let (lo, hi) = patch
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(lo.abs()).max(1.0)) {
        return vec![0; patch.data.len()];
    }
    patch
        .data
        .iter()
        .map(|&v| (((v - lo) / range * levels as f64).floor() as usize).min(levels - 1))
        .collect()
}

fn cooccurrence(q: &[usize], size: [usize; 3], levels: usize, dir: (i64, i64), offset: usize) -> Vec<f64> {
    let mut m = vec![0.0; levels * levels];
    let (dx, dy) = (dir.0 * offset as i64, dir.1 * offset as i64);
    let (sx, sy, sz) = (size[0] as i64, size[1] as i64, size[2]);
    for z in 0..sz {
        for y in 0..sy {
            for x in 0..sx {
                let (x2, y2) = (x + dx, y + dy);
                if x2 < 0 || y2 < 0 || x2 >= sx || y2 >= sy {
                    continue;
                }
                let a = q[(x + sx * (y + sy * z as i64)) as usize];
                let b = q[(x2 + sx * (y2 + sy * z as i64)) as usize];
                m[a * levels + b] += 1.0;
                m[b * levels + a] += 1.0;
            }
        }
    }
    let total: f64 = m.iter().sum();
    if total > 0.0 {
        for v in &mut m {
            *v /= total;
        }
    }
    m
}

fn statistics(p: &[f64], levels: usize) -> [f64; GLCM_STATS] {
    let lv = |i: usize| (i + 1) as f64;
    let mut mu = 0.0;
    for i in 0..levels {
        for j in 0..levels {
            mu += lv(i) * p[i * levels + j];
        }
    }
    let mut var = 0.0;
    for i in 0..levels {
        for j in 0..levels {
            var += (lv(i) - mu).powi(2) * p[i * levels + j];
        }
    }
    let mut s = [0.0; GLCM_STATS];
    let mut corr_num = 0.0;
    for i in 0..levels {
        for j in 0..levels {
            let pij = p[i * levels + j];
            if pij == 0.0 {
                continue;
            }
            let (a, b) = (lv(i), lv(j));
            let diff = a - b;
            let shade = a + b - 2.0 * mu;
            s[0] += a * b * pij;
            s[1] += diff * diff * pij;
            s[2] += shade.powi(3) * pij;
            s[3] += diff.abs() * pij;
            s[4] += pij * pij;
            s[5] -= pij * pij.ln();
            s[7] += pij / (1.0 + diff * diff);
            corr_num += (a - mu) * (b - mu) * pij;
            s[9] += shade.powi(4) * pij;
            s[10] += pij / (1.0 + diff.abs());
        }
    }
    s[6] = var;
    // symmetric matrix: sigma_x == sigma_y
    s[8] = if var > 1e-15 { corr_num / var } else { 0.0 };
    s
}

pub fn glcm_features(patch: &Patch, levels: usize, offset: usize) -> Result<GlcmFeatureVector, FeatureError> {
    if levels < 2 {
        return Err(FeatureError::InvalidArgument(format!("GLCM needs at least 2 levels, got {levels}")));
    }
    if offset == 0 || patch.size[0] <= offset || patch.size[1] <= offset {
        return Err(FeatureError::InvalidArgument(format!(
            "GLCM offset {offset} does not fit a {}x{} slice",
            patch.size[0], patch.size[1]
        )));
    }
    if patch.data.iter().any(|v| !v.is_finite()) {
        return Err(FeatureError::InvalidArgument("patch contains non-finite values".into()));
    }
    let q = quantize(patch, levels);
    let mut values = [0.0; GLCM_LEN];
    for (d, &dir) in DIRECTIONS.iter().enumerate() {
        let p = cooccurrence(&q, patch.size, levels, dir, offset);
        let st = statistics(&p, levels);
        values[d * GLCM_STATS..(d + 1) * GLCM_STATS].copy_from_slice(&st);
    }
    Ok(GlcmFeatureVector { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn patch(size: [usize; 3], data: Vec<f64>) -> Patch {
        Patch { size, center: Vector3::zeros(), data }
    }

    #[test]
    fn constant_patch_convention() {
        let p = patch([5, 5, 3], vec![3.5; 75]);
        let f = glcm_features(&p, 16, 1).unwrap();
        for d in 0..4 {
            assert_eq!(f.get(d, 1), 0.0);
            assert_eq!(f.get(d, 3), 0.0);
            assert_eq!(f.get(d, 4), 1.0);
            assert_eq!(f.get(d, 5), 0.0);
            assert_eq!(f.get(d, 7), 1.0);
            assert_eq!(f.get(d, 8), 0.0);
        }
    }

    // Pair-counting oracle: enumerate ordered pairs explicitly, no matrix.
    fn contrast_by_pairs(q: &[[usize; 4]; 4]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0.0;
        for y in 0..4 {
            for x in 0..3 {
                let (a, b) = (q[y][x] as f64, q[y][x + 1] as f64);
                sum += 2.0 * (a - b).powi(2);
                n += 2.0;
            }
        }
        sum / n
    }

    #[test]
    fn checkerboard_contrast_is_one() {
        let mut q = [[0usize; 4]; 4];
        let mut data = Vec::new();
        for (y, row) in q.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                *v = (x + y) % 2;
            }
        }
        for y in 0..4 {
            for x in 0..4 {
                data.push(q[y][x] as f64);
            }
        }
        let f = glcm_features(&patch([4, 4, 1], data), 2, 1).unwrap();
        assert_eq!(contrast_by_pairs(&q), 1.0);
        assert!((f.get(0, 1) - 1.0).abs() < 1e-15);
    }

    fn naive_stats(q: &[usize], size: [usize; 3], levels: usize, dir: (i64, i64)) -> Vec<f64> {
        // counts via a map over explicit (i, j) pairs
        let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut total = 0.0;
        for z in 0..size[2] {
            for y in 0..size[1] as i64 {
                for x in 0..size[0] as i64 {
                    let (x2, y2) = (x + dir.0, y + dir.1);
                    if x2 < 0 || y2 < 0 || x2 >= size[0] as i64 || y2 >= size[1] as i64 {
                        continue;
                    }
                    let at = |x: i64, y: i64| q[x as usize + size[0] * (y as usize + size[1] * z)];
                    let (a, b) = (at(x, y), at(x2, y2));
                    *counts.entry((a, b)).or_default() += 1.0;
                    *counts.entry((b, a)).or_default() += 1.0;
                    total += 2.0;
                }
            }
        }
        let p: Vec<((f64, f64), f64)> =
            counts.iter().map(|(&(i, j), &c)| (((i + 1) as f64, (j + 1) as f64), c / total)).collect();
        let mx: f64 = p.iter().map(|((i, _), v)| i * v).sum();
        let my: f64 = p.iter().map(|((_, j), v)| j * v).sum();
        let sx: f64 = p.iter().map(|((i, _), v)| (i - mx).powi(2) * v).sum::<f64>().sqrt();
        let sy: f64 = p.iter().map(|((_, j), v)| (j - my).powi(2) * v).sum::<f64>().sqrt();
        let _ = levels;
        let sum = |f: &dyn Fn(f64, f64, f64) -> f64| p.iter().map(|((i, j), v)| f(*i, *j, *v)).sum::<f64>();
        vec![
            sum(&|i, j, v| i * j * v),
            sum(&|i, j, v| (i - j).powi(2) * v),
            sum(&|i, j, v| (i + j - mx - my).powi(3) * v),
            sum(&|i, j, v| (i - j).abs() * v),
            sum(&|_, _, v| v * v),
            sum(&|_, _, v| -v * v.ln()),
            sum(&|i, _, v| (i - mx).powi(2) * v),
            sum(&|i, j, v| v / (1.0 + (i - j).powi(2))),
            if sx * sy > 1e-12 { sum(&|i, j, v| (i - mx) * (j - my) * v) / (sx * sy) } else { 0.0 },
            sum(&|i, j, v| (i + j - mx - my).powi(4) * v),
            sum(&|i, j, v| v / (1.0 + (i - j).abs())),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_naive_oracle(data in prop::collection::vec(-50.0f64..50.0, 5 * 5 * 3)) {
            let p = patch([5, 5, 3], data);
            let f = glcm_features(&p, 16, 1).unwrap();
            let q = quantize(&p, 16);
            for (d, &dir) in DIRECTIONS.iter().enumerate() {
                let oracle = naive_stats(&q, p.size, 16, dir);
                for s in 0..GLCM_STATS {
                    let tol = 1e-10 * oracle[s].abs().max(1.0);
                    prop_assert!((f.get(d, s) - oracle[s]).abs() < tol, "dir {} stat {}: {} vs {}", d, s, f.get(d, s), oracle[s]);
                }
            }
        }

        #[test]
        fn shift_invariant(data in prop::collection::vec(0.0f64..1.0, 27), shift in -1000i32..1000) {
            let p = patch([3, 3, 3], data.iter().map(|v| (v * 64.0).floor()).collect());
            let shifted = patch([3, 3, 3], p.data.iter().map(|v| v + shift as f64).collect());
            prop_assert_eq!(glcm_features(&p, 16, 1).unwrap(), glcm_features(&shifted, 16, 1).unwrap());
        }

        #[test]
        fn energy_and_homogeneity_bounds(data in prop::collection::vec(-5.0f64..5.0, 27)) {
            let f = glcm_features(&patch([3, 3, 3], data), 16, 1).unwrap();
            for d in 0..4 {
                prop_assert!(f.get(d, 4) > 0.0 && f.get(d, 4) <= 1.0);
                prop_assert!(f.get(d, 7) > 0.0 && f.get(d, 7) <= 1.0 + 1e-15);
                prop_assert!(f.values.iter().all(|v| v.is_finite()));
            }
        }
    }
}
