//! Residual indicators and boundary-pattern matching along a normal ray.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::ksvd::{sparse_code, SparseDictionary};

/// Residuals and indicators sampled along a landmark's outward normal.
/// Offsets (mm) are relative to the landmark and strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryProfile {
    pub landmark: usize,
    pub anchor: [f64; 3],
    pub normal: [f64; 3],
    pub offsets: Vec<f64>,
    pub residuals: Vec<f64>,
    pub indicators: Vec<i8>,
}

/// `h[y] = 1` when `r[y] <= r[y+1]`, else `-1`; the last sample copies its
/// predecessor.
pub fn indicators_from_residuals(r: &[f64]) -> Vec<i8> {
    let n = r.len();
    let mut h: Vec<i8> = (0..n.saturating_sub(1)).map(|y| if r[y] <= r[y + 1] { 1 } else { -1 }).collect();
    if n >= 2 {
        h.push(h[n - 2]);
    } else if n == 1 {
        h.push(1);
    }
    h
}

/// Code each feature vector and turn the residual sequence into indicators.
pub fn residual_indicator(dict: &SparseDictionary, features: &[DVector<f64>]) -> (Vec<f64>, Vec<i8>) {
    let r: Vec<f64> = features.iter().map(|f| sparse_code(dict, f).1).collect();
    let h = indicators_from_residuals(&r);
    (r, h)
}

/// Offset whose indicator window best matches `[-1; half] ++ [1; half]`.
/// Windows are centred so the first `+1` of the pattern falls on the
/// candidate sample. Lowest pattern distance wins; ties prefer longer
/// patterns, then the smaller displacement. Returns 0 when no window fits.
pub fn match_boundary(profile: &BoundaryProfile, min_half: usize, max_half: usize) -> f64 {
    let h = &profile.indicators;
    let n = h.len();
    let mut best: Option<(usize, std::cmp::Reverse<usize>, f64, usize)> = None;
    for half in min_half.max(1)..=max_half {
        if 2 * half > n {
            break;
        }
        for y in half..=n - half {
            let mismatches = (y - half..y).filter(|&i| h[i] != -1).count() + (y..y + half).filter(|&i| h[i] != 1).count();
            let key = (mismatches, std::cmp::Reverse(half), profile.offsets[y].abs(), y);
            let better = match &best {
                None => true,
                Some(b) => {
                    (key.0, key.1).cmp(&(b.0, b.1)).then(key.2.total_cmp(&b.2)).then(key.3.cmp(&b.3)).is_lt()
                }
            };
            if better {
                best = Some(key);
            }
        }
    }
    best.map_or(0.0, |b| profile.offsets[b.3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(h: Vec<i8>, step: f64) -> BoundaryProfile {
        let n = h.len();
        let mid = (n / 2) as f64;
        BoundaryProfile {
            landmark: 0,
            anchor: [0.0; 3],
            normal: [1.0, 0.0, 0.0],
            offsets: (0..n).map(|i| (i as f64 - mid) * step).collect(),
            residuals: vec![0.0; n],
            indicators: h,
        }
    }

    #[test]
    fn indicator_rule() {
        assert_eq!(indicators_from_residuals(&[1.0, 2.0, 3.0, 4.0]), vec![1, 1, 1, 1]);
        assert_eq!(indicators_from_residuals(&[4.0, 3.0, 2.0, 1.0]), vec![-1, -1, -1, -1]);
        assert_eq!(indicators_from_residuals(&[0.1, 0.1, 0.5, 0.2]), vec![1, 1, -1, -1]);
    }

    #[test]
    fn ideal_step_found_by_exhaustive_search() {
        for t in 2..10 {
            let h: Vec<i8> = (0..13).map(|i| if i < t { -1 } else { 1 }).collect();
            let p = profile(h, 0.25);
            let exhaustive = (0..13)
                .filter(|&y| y >= 1 && p.indicators[y - 1] == -1 && p.indicators[y] == 1)
                .map(|y| p.offsets[y])
                .next()
                .unwrap();
            assert_eq!(match_boundary(&p, 2, 6), exhaustive);
            assert_eq!(match_boundary(&p, 2, 6), p.offsets[t]);
        }
    }

    #[test]
    fn flat_indicators_leave_landmark() {
        assert_eq!(match_boundary(&profile(vec![1; 13], 0.25), 2, 6), 0.0);
        assert_eq!(match_boundary(&profile(vec![-1; 13], 0.25), 2, 6), 0.0);
        assert_eq!(match_boundary(&profile(vec![1; 3], 0.25), 2, 6), 0.0);
    }

    #[test]
    fn single_flip_does_not_move_transition() {
        let t = 8;
        for flip in 0..17usize {
            if flip.abs_diff(t) <= 1 {
                continue;
            }
            let mut h: Vec<i8> = (0..17).map(|i| if i < t { -1 } else { 1 }).collect();
            h[flip] = -h[flip];
            let p = profile(h, 0.5);
            assert_eq!(match_boundary(&p, 3, 8), p.offsets[t], "flip at {flip}");
        }
    }

    proptest! {
        #[test]
        fn result_is_a_sample_offset(h in prop::collection::vec(prop::bool::ANY, 3..30)) {
            let h: Vec<i8> = h.into_iter().map(|b| if b { 1 } else { -1 }).collect();
            let p = profile(h, 0.3);
            let d = match_boundary(&p, 2, 6);
            prop_assert!(p.offsets.contains(&d) || d == 0.0);
            let a = p.offsets.iter().fold(0.0f64, |m, o| m.max(o.abs()));
            prop_assert!(d.abs() <= a);
        }
    }
}
