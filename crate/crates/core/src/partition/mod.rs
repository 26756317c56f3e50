//! Shape-consistent landmark partitioning along the tube.
//!
//! Partitions are contiguous runs of stations (whole rings). The cost of a
//! landmark subset combines a colinearity term, measuring how far each
//! deformation vector deviates from the subset's dominant direction, with a
//! term rewarding large subsets:
//!
//! `J(Ω) = α Σ_l sin²θ_l · L_max/‖V_l‖ + (1 − α)(1 − |Ω|/|S|)`
//!
//! Since `sin²θ_l = 1 − (V̂·V_l)²/‖V_l‖²`, the colinearity sum reduces to
//! `Σ L_max/‖V_l‖ − V̂ᵀ Q V̂` with `Q = Σ L_max V_l V_lᵀ/‖V_l‖³`, so subset
//! costs are evaluated from a handful of accumulated 3×3 moments.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shape::DeformationField;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("partition cost of an empty landmark set")]
    EmptySubset,
    #[error("partition count {k} outside 1..={n}")]
    InvalidCount { k: usize, n: usize },
    #[error("silhouette needs at least 2 partitions")]
    SinglePartition,
    #[error("empty candidate range for the partition count")]
    EmptyRange,
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("invalid partitioning: {0}")]
    Invalid(String),
}

pub const DEFAULT_ALPHA: f64 = 0.8;

/// Contiguous station-run partitioning with one shared boundary ring
/// between neighbours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partitioning {
    pub k: usize,
    pub n_stations: usize,
    pub points_per_ring: usize,
    /// Half-open core station range per partition.
    pub station_ranges: Vec<[usize; 2]>,
    /// Core partition id of every landmark.
    pub assignment: Vec<usize>,
    /// Landmarks partition `p` borrows from partition `p + 1` (its first ring).
    pub overlap: Vec<Vec<usize>>,
    /// Unit dominant deformation direction per partition.
    pub directions: Vec<[f64; 3]>,
}

impl Partitioning {
    pub fn from_ranges(ranges: Vec<[usize; 2]>, field: &DeformationField) -> Result<Self, PartitionError> {
        let kk = field.points_per_ring;
        let n = field.n_stations();
        if ranges.is_empty() || ranges[0][0] != 0 || ranges[ranges.len() - 1][1] != n {
            return Err(PartitionError::Invalid(format!("ranges {ranges:?} do not cover 0..{n}")));
        }
        for w in ranges.windows(2) {
            if w[0][1] != w[1][0] {
                return Err(PartitionError::Invalid(format!("ranges {ranges:?} are not contiguous")));
            }
        }
        if ranges.iter().any(|r| r[1] <= r[0]) {
            return Err(PartitionError::Invalid("empty partition".into()));
        }
        let eff = EffectiveField::new(field);
        let mut assignment = vec![0; n * kk];
        let mut overlap = Vec::with_capacity(ranges.len());
        let mut directions = Vec::with_capacity(ranges.len());
        for (p, r) in ranges.iter().enumerate() {
            for l in r[0] * kk..r[1] * kk {
                assignment[l] = p;
            }
            overlap.push(if p + 1 < ranges.len() { (r[1] * kk..(r[1] + 1) * kk).collect() } else { Vec::new() });
            let d = eff.moments(r[0] * kk..r[1] * kk).direction();
            directions.push([d.x, d.y, d.z]);
        }
        Ok(Self { k: ranges.len(), n_stations: n, points_per_ring: kk, station_ranges: ranges, assignment, overlap, directions })
    }

    /// Core landmarks of partition `p`.
    pub fn core(&self, p: usize) -> Vec<usize> {
        let r = self.station_ranges[p];
        (r[0] * self.points_per_ring..r[1] * self.points_per_ring).collect()
    }

    /// Core plus overlap landmarks of partition `p`, ascending.
    pub fn landmarks(&self, p: usize) -> Vec<usize> {
        let mut ids = self.core(p);
        ids.extend(&self.overlap[p]);
        ids
    }

    /// Check coverage, contiguity and one shared ring between neighbours.
    pub fn validate(&self) -> Result<(), PartitionError> {
        let n = self.n_stations * self.points_per_ring;
        if self.assignment.len() != n || self.k != self.station_ranges.len() || self.overlap.len() != self.k {
            return Err(PartitionError::Invalid("inconsistent partition sizes".into()));
        }
        for p in 0..self.k {
            let r = self.station_ranges[p];
            if r[1] <= r[0] || (p > 0 && self.station_ranges[p - 1][1] != r[0]) {
                return Err(PartitionError::Invalid(format!("partition {p} breaks contiguity")));
            }
            if self.core(p).iter().any(|&l| self.assignment[l] != p) {
                return Err(PartitionError::Invalid(format!("assignment of partition {p} disagrees with its range")));
            }
            let expect: Vec<usize> = if p + 1 < self.k {
                (r[1] * self.points_per_ring..(r[1] + 1) * self.points_per_ring).collect()
            } else {
                Vec::new()
            };
            if self.overlap[p] != expect {
                return Err(PartitionError::Invalid(format!("partition {p} overlap is not one boundary ring")));
            }
        }
        if self.station_ranges[0][0] != 0 || self.station_ranges[self.k - 1][1] != self.n_stations {
            return Err(PartitionError::Invalid("partitions do not cover every station".into()));
        }
        Ok(())
    }
}

/// Deformation vectors with near-zero entries replaced by their station's
/// mean vector (or dropped when the whole station is null).
struct EffectiveField {
    vectors: Vec<Option<Vector3<f64>>>,
    l_max: f64,
    total: usize,
}

#[derive(Clone, Copy, Default)]
struct Moments {
    m: Matrix3<f64>,
    q: Matrix3<f64>,
    inv: f64,
    sum: Vector3<f64>,
    count: usize,
}

impl Moments {
    fn add(&mut self, v: &Vector3<f64>, l_max: f64) {
        let n = v.norm();
        let outer = v * v.transpose();
        self.m += outer;
        self.q += outer * (l_max / (n * n * n));
        self.inv += l_max / n;
        self.sum += v;
    }

    fn merged(&self, o: &Moments) -> Moments {
        Moments { m: self.m + o.m, q: self.q + o.q, inv: self.inv + o.inv, sum: self.sum + o.sum, count: self.count + o.count }
    }

    fn direction(&self) -> Vector3<f64> {
        dominant_direction(&self.m, &self.sum)
    }

    fn colinearity(&self) -> f64 {
        if self.m.iter().all(|v| *v == 0.0) {
            return 0.0;
        }
        let d = self.direction();
        (self.inv - d.dot(&(self.q * d))).max(0.0)
    }

    fn cost(&self, total: usize, alpha: f64) -> f64 {
        alpha * self.colinearity() + (1.0 - alpha) * (1.0 - self.count as f64 / total as f64)
    }
}

/// Principal eigenvector of the uncentred second moment, sign-aligned with
/// the mean vector (ties in sign go to the largest component being positive).
fn dominant_direction(m: &Matrix3<f64>, sum: &Vector3<f64>) -> Vector3<f64> {
    let eig = SymmetricEigen::new(*m);
    let mut best = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let mut d: Vector3<f64> = eig.eigenvectors.column(best).into();
    let s = d.dot(sum);
    if s < 0.0 || (s == 0.0 && d[d.iamax()] < 0.0) {
        d = -d;
    }
    d
}

impl EffectiveField {
    fn new(field: &DeformationField) -> Self {
        let kk = field.points_per_ring;
        let thr = 1e-9 * field.l_max;
        let mut vectors = vec![None; field.len()];
        for s in 0..field.n_stations() {
            let ids = s * kk..(s + 1) * kk;
            let good: Vec<Vector3<f64>> =
                ids.clone().map(|l| field.vector(l)).filter(|v| v.norm() >= thr && v.norm() > 0.0).collect();
            let mean = if good.is_empty() { None } else { Some(good.iter().sum::<Vector3<f64>>() / good.len() as f64) };
            let mean = mean.filter(|m| m.norm() > 0.0);
            for l in ids {
                let v = field.vector(l);
                vectors[l] = if v.norm() >= thr && v.norm() > 0.0 { Some(v) } else { mean };
            }
        }
        Self { vectors, l_max: field.l_max, total: field.len() }
    }

    fn moments(&self, ids: impl IntoIterator<Item = usize>) -> Moments {
        let mut acc = Moments::default();
        for l in ids {
            acc.count += 1;
            if let Some(v) = &self.vectors[l] {
                acc.add(v, self.l_max);
            }
        }
        acc
    }

    fn single(&self, l: usize) -> Moments {
        self.moments(std::iter::once(l))
    }
}

fn check_alpha(alpha: f64) -> Result<(), PartitionError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(PartitionError::InvalidAlpha(alpha))
    }
}

/// Cost `J(Ω)` of a landmark subset.
pub fn partition_cost(omega: &[usize], field: &DeformationField, total: usize, alpha: f64) -> Result<f64, PartitionError> {
    if omega.is_empty() {
        return Err(PartitionError::EmptySubset);
    }
    check_alpha(alpha)?;
    let eff = EffectiveField::new(field);
    Ok(eff.moments(omega.iter().copied()).cost(total, alpha))
}

/// Station ranges for every partition count, from `N` singletons down to 1,
/// produced by greedily merging the adjacent pair with the smallest cost
/// increase (ties to the leftmost pair). Entry `k - 1` holds the ranges for `k`.
pub fn agglomerative_hierarchy(field: &DeformationField, alpha: f64) -> Result<Vec<Vec<[usize; 2]>>, PartitionError> {
    check_alpha(alpha)?;
    let kk = field.points_per_ring;
    let n = field.n_stations();
    let eff = EffectiveField::new(field);
    let mut ranges: Vec<[usize; 2]> = (0..n).map(|s| [s, s + 1]).collect();
    let mut moms: Vec<Moments> = (0..n).map(|s| eff.moments(s * kk..(s + 1) * kk)).collect();
    let mut levels = vec![Vec::new(); n];
    levels[n - 1] = ranges.clone();
    while ranges.len() > 1 {
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..ranges.len() - 1 {
            let merged = moms[i].merged(&moms[i + 1]);
            let delta = merged.cost(eff.total, alpha) - moms[i].cost(eff.total, alpha) - moms[i + 1].cost(eff.total, alpha);
            if delta < best.0 {
                best = (delta, i);
            }
        }
        let i = best.1;
        ranges[i][1] = ranges[i + 1][1];
        ranges.remove(i + 1);
        moms[i] = moms[i].merged(&moms[i + 1]);
        moms.remove(i + 1);
        levels[ranges.len() - 1] = ranges.clone();
    }
    Ok(levels)
}

pub fn agglomerative_partition(field: &DeformationField, k: usize, alpha: f64) -> Result<Partitioning, PartitionError> {
    let n = field.n_stations();
    if k == 0 || k > n {
        return Err(PartitionError::InvalidCount { k, n });
    }
    let levels = agglomerative_hierarchy(field, alpha)?;
    Partitioning::from_ranges(levels[k - 1].clone(), field)
}

/// Merge adjacent partitions of an existing partitioning (lowest cost
/// increase first) until `k` remain.
pub fn merge_partitioning(p: &Partitioning, k: usize, field: &DeformationField, alpha: f64) -> Result<Partitioning, PartitionError> {
    check_alpha(alpha)?;
    if k == 0 || k > p.k {
        return Err(PartitionError::InvalidCount { k, n: p.k });
    }
    let kk = field.points_per_ring;
    let eff = EffectiveField::new(field);
    let mut ranges = p.station_ranges.clone();
    let mut moms: Vec<Moments> = ranges.iter().map(|r| eff.moments(r[0] * kk..r[1] * kk)).collect();
    while ranges.len() > k {
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..ranges.len() - 1 {
            let merged = moms[i].merged(&moms[i + 1]);
            let delta = merged.cost(eff.total, alpha) - moms[i].cost(eff.total, alpha) - moms[i + 1].cost(eff.total, alpha);
            if delta < best.0 {
                best = (delta, i);
            }
        }
        let i = best.1;
        ranges[i][1] = ranges[i + 1][1];
        ranges.remove(i + 1);
        moms[i] = moms[i].merged(&moms[i + 1]);
        moms.remove(i + 1);
    }
    Partitioning::from_ranges(ranges, field)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean per-landmark silhouette over core partitions. For landmark `l` in
/// `Ω_p`: `a = J(Ω_p) − J(Ω_p∖l)`, `b = J(Ω_q ∪ l) − J(Ω_q)` with `q` the
/// adjacent partition nearest in stations (ties to the preceding one), and
/// the contribution is `(f(b) − f(a)) / max(f(a), f(b))` for the logistic `f`.
pub fn silhouette_score(p: &Partitioning, field: &DeformationField, alpha: f64) -> Result<f64, PartitionError> {
    check_alpha(alpha)?;
    if p.k < 2 {
        return Err(PartitionError::SinglePartition);
    }
    let kk = p.points_per_ring;
    let eff = EffectiveField::new(field);
    let total = eff.total;
    let moms: Vec<Moments> = p.station_ranges.iter().map(|r| eff.moments(r[0] * kk..r[1] * kk)).collect();
    let costs: Vec<f64> = moms.iter().map(|m| m.cost(total, alpha)).collect();
    let mut acc = 0.0;
    let mut count = 0usize;
    for (pi, r) in p.station_ranges.iter().enumerate() {
        for l in r[0] * kk..r[1] * kk {
            let s = l / kk;
            let one = eff.single(l);
            let mut without = moms[pi];
            without.m -= one.m;
            without.q -= one.q;
            without.inv -= one.inv;
            without.sum -= one.sum;
            without.count -= 1;
            let a = costs[pi] - without.cost(total, alpha);
            let prev = (pi > 0).then(|| s - r[0] + 1);
            let next = (pi + 1 < p.k).then(|| r[1] - s);
            let q = match (prev, next) {
                (Some(dp), Some(dn)) => {
                    if dp <= dn {
                        pi - 1
                    } else {
                        pi + 1
                    }
                }
                (Some(_), None) => pi - 1,
                (None, Some(_)) => pi + 1,
                (None, None) => unreachable!("k >= 2"),
            };
            let b = moms[q].merged(&one).cost(total, alpha) - costs[q];
            let (fa, fb) = (sigmoid(a), sigmoid(b));
            acc += (fb - fa) / fa.max(fb);
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SilhouettePoint {
    pub k: usize,
    pub score: f64,
}

/// Evaluate every `k` in `k_range` and keep the highest silhouette (ties to
/// the smaller `k`). Returns the chosen partitioning and the score curve.
pub fn optimal_partitioning(
    field: &DeformationField,
    k_range: std::ops::RangeInclusive<usize>,
    alpha: f64,
) -> Result<(Partitioning, Vec<SilhouettePoint>), PartitionError> {
    let n = field.n_stations();
    if k_range.is_empty() {
        return Err(PartitionError::EmptyRange);
    }
    if *k_range.start() < 2 || *k_range.end() > n {
        return Err(PartitionError::InvalidCount { k: if *k_range.start() < 2 { *k_range.start() } else { *k_range.end() }, n });
    }
    let levels = agglomerative_hierarchy(field, alpha)?;
    let mut curve = Vec::new();
    let mut best: Option<(f64, Partitioning)> = None;
    for k in k_range {
        let part = Partitioning::from_ranges(levels[k - 1].clone(), field)?;
        let score = silhouette_score(&part, field, alpha)?;
        curve.push(SilhouettePoint { k, score });
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, part));
        }
    }
    Ok((best.expect("non-empty range").1, curve))
}


#[cfg(test)]
mod tests {
    use super::planted::regime_field;
    use super::*;
    use proptest::prelude::*;

    fn field_of(v: &[Vector3<f64>], kk: usize) -> DeformationField {
        DeformationField::new(v.to_vec(), kk)
    }

    #[test]
    fn parallel_vectors_cost_only_area_term() {
        let v: Vec<_> = (0..6).map(|i| Vector3::new(1.0 + i as f64, 0.0, 0.0)).collect();
        let f = field_of(&v, 1);
        let j = partition_cost(&[0, 1, 2], &f, 6, 0.8).unwrap();
        assert!((j - 0.2 * 0.5).abs() < 1e-12);
        let all = partition_cost(&[0, 1, 2, 3, 4, 5], &f, 6, 0.8).unwrap();
        assert_eq!(all, 0.0);
        assert!(matches!(partition_cost(&[], &f, 6, 0.8), Err(PartitionError::EmptySubset)));
    }

    #[test]
    fn orthogonal_pair_matches_hand_value() {
        let f = field_of(&[Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)], 1);
        // any direction in the xy-plane leaves sin² summing to 1; L_max = 1
        let j = partition_cost(&[0, 1], &f, 4, 0.8).unwrap();
        assert!((j - (0.8 * 1.0 + 0.2 * 0.5)).abs() < 1e-12);
    }

    /// Independent oracle: power iteration for the dominant direction and an
    /// explicit cross-product sum.
    fn cost_oracle(v: &[Vector3<f64>], ids: &[usize], total: usize, alpha: f64) -> f64 {
        let l_max = v.iter().map(|x| x.norm()).fold(0.0, f64::max);
        let mut m = Matrix3::zeros();
        let mut mean = Vector3::zeros();
        for &l in ids {
            m += v[l] * v[l].transpose();
            mean += v[l];
        }
        let mut d = Vector3::new(0.3, 0.5, 0.7);
        for _ in 0..5000 {
            d = (m * d).normalize();
        }
        if d.dot(&mean) < 0.0 {
            d = -d;
        }
        let col: f64 = ids.iter().map(|&l| (d.cross(&v[l]).norm() / v[l].norm()).powi(2) * l_max / v[l].norm()).sum();
        alpha * col + (1.0 - alpha) * (1.0 - ids.len() as f64 / total as f64)
    }

    #[test]
    fn three_landmark_oracle() {
        let v = vec![Vector3::new(1.0, 0.2, 0.0), Vector3::new(0.5, 1.0, 0.1), Vector3::new(2.0, -0.3, 0.4)];
        let f = field_of(&v, 1);
        for ids in [vec![0, 1, 2], vec![0, 1], vec![1, 2], vec![2]] {
            let j = partition_cost(&ids, &f, 3, 0.8).unwrap();
            assert!((j - cost_oracle(&v, &ids, 3, 0.8)).abs() < 1e-9, "{ids:?}");
        }
    }

    #[test]
    fn hierarchy_extremes() {
        let (f, _) = regime_field(3, 20, 4, 2);
        let one = agglomerative_partition(&f, 1, 0.8).unwrap();
        assert_eq!(one.station_ranges, vec![[0, 20]]);
        let all = agglomerative_partition(&f, 20, 0.8).unwrap();
        assert_eq!(all.k, 20);
        assert!(matches!(agglomerative_partition(&f, 21, 0.8), Err(PartitionError::InvalidCount { .. })));
    }

    #[test]
    fn two_regime_boundary_recovered() {
        let kk = 4;
        let mut v = Vec::new();
        for s in 0..20 {
            for _ in 0..kk {
                v.push(if s < 10 { Vector3::x() } else { Vector3::y() });
            }
        }
        let f = field_of(&v, kk);
        let p = agglomerative_partition(&f, 2, 0.8).unwrap();
        assert_eq!(p.station_ranges, vec![[0, 10], [10, 20]]);
        p.validate().unwrap();
    }

    #[test]
    fn true_split_beats_shifted_splits() {
        let (f, cuts) = regime_field(11, 30, 4, 2);
        let c = cuts[0];
        let score = |cut: usize| silhouette_score(&Partitioning::from_ranges(vec![[0, cut], [cut, 30]], &f).unwrap(), &f, 0.8).unwrap();
        let truth = score(c);
        for cut in 1..30usize {
            if cut.abs_diff(c) >= 2 {
                assert!(truth > score(cut), "cut {cut}");
            }
        }
    }

    #[test]
    fn symmetric_silhouette_is_zero() {
        // one regime split in the middle: a and b equal for every landmark
        let v = vec![Vector3::x(); 8];
        let f = field_of(&v, 1);
        let p = Partitioning::from_ranges(vec![[0, 4], [4, 8]], &f).unwrap();
        assert!(silhouette_score(&p, &f, 0.8).unwrap().abs() < 1e-12);
        let single = Partitioning::from_ranges(vec![[0, 8]], &f).unwrap();
        assert!(matches!(silhouette_score(&single, &f, 0.8), Err(PartitionError::SinglePartition)));
    }

    #[test]
    fn planted_regimes_select_their_count() {
        for seed in 0..3 {
            let (f2, _) = regime_field(seed, 40, 8, 2);
            assert_eq!(optimal_partitioning(&f2, 2..=8, 0.8).unwrap().0.k, 2, "seed {seed}");
            let (f4, _) = regime_field(100 + seed, 40, 8, 4);
            assert_eq!(optimal_partitioning(&f4, 2..=8, 0.8).unwrap().0.k, 4, "seed {seed}");
        }
    }

    #[test]
    fn zero_vectors_take_station_mean() {
        let v = vec![Vector3::x(), Vector3::zeros(), Vector3::x() * 2.0, Vector3::y(), Vector3::y(), Vector3::y()];
        let f = field_of(&v, 3);
        let j = partition_cost(&[0, 1, 2], &f, 6, 0.8).unwrap();
        assert!(j.is_finite());
        assert!((j - 0.2 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn merge_reaches_target_and_nests() {
        let (f, _) = regime_field(5, 40, 4, 4);
        let fine = agglomerative_partition(&f, 12, 0.8).unwrap();
        let coarse = merge_partitioning(&fine, 3, &f, 0.8).unwrap();
        assert_eq!(coarse.k, 3);
        coarse.validate().unwrap();
        for r in &coarse.station_ranges {
            assert!(fine.station_ranges.iter().any(|fr| fr[0] == r[0]));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cost_invariant_under_joint_scaling(seed in 0u64..1000, c in 0.01f64..100.0) {
            let (f, _) = regime_field(seed, 12, 3, 2);
            let ids: Vec<usize> = (0..20).collect();
            let scaled = DeformationField::new((0..f.len()).map(|l| f.vector(l) * c).collect(), 3);
            let a = partition_cost(&ids, &f, f.len(), 0.8).unwrap();
            let b = partition_cost(&ids, &scaled, f.len(), 0.8).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn optimal_partitioning_is_valid(seed in 0u64..1000, regimes in 2usize..4) {
            let (f, _) = regime_field(seed, 24, 4, regimes);
            let (p, curve) = optimal_partitioning(&f, 2..=6, 0.8).unwrap();
            p.validate().unwrap();
            prop_assert_eq!(curve.len(), 5);
            for pt in &curve {
                prop_assert!(pt.score >= -1.0 && pt.score <= 1.0);
            }
            let again = optimal_partitioning(&f, 2..=6, 0.8).unwrap().0;
            prop_assert_eq!(again, p);
        }
    }
}
