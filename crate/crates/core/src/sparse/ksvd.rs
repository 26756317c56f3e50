//! k-SVD dictionary learning with an OMP coder.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SparseError;

const DUPLICATE_DOT: f64 = 1.0 - 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseDictionary {
    pub partition: usize,
    /// `d × n`, unit-norm columns.
    pub atoms: DMatrix<f64>,
    pub sparsity: usize,
}

/// Column-major JSON form used for dictionary dumps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DictionaryDump {
    pub partition: usize,
    pub dim: usize,
    pub sparsity: usize,
    pub atoms: Vec<Vec<f64>>,
}

impl SparseDictionary {
    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn dump(&self) -> DictionaryDump {
        DictionaryDump {
            partition: self.partition,
            dim: self.dim(),
            sparsity: self.sparsity,
            atoms: self.atoms.column_iter().map(|c| c.iter().copied().collect()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SparseError> {
        let n = self.n_atoms();
        if self.sparsity == 0 || self.sparsity > n {
            return Err(SparseError::InvalidConfig(format!("sparsity {} with {n} atoms", self.sparsity)));
        }
        for (j, c) in self.atoms.column_iter().enumerate() {
            if (c.norm() - 1.0).abs() > 1e-8 {
                return Err(SparseError::InvalidConfig(format!("atom {j} has norm {}", c.norm())));
            }
        }
        for a in 0..n {
            for b in a + 1..n {
                if self.atoms.column(a).dot(&self.atoms.column(b)).abs() >= DUPLICATE_DOT {
                    return Err(SparseError::InvalidConfig(format!("atoms {a} and {b} coincide")));
                }
            }
        }
        Ok(())
    }
}

/// Orthogonal matching pursuit with at most `sparsity` atoms. Returns the
/// coefficient vector and the residual norm.
pub fn omp(atoms: &DMatrix<f64>, sparsity: usize, f: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = atoms.ncols();
    let mut beta = DVector::zeros(n);
    let mut support: Vec<usize> = Vec::with_capacity(sparsity);
    let mut residual = f.clone();
    let scale = f.norm();
    for _ in 0..sparsity.min(n) {
        let corr = atoms.tr_mul(&residual);
        let mut best = (0.0, usize::MAX);
        for (j, c) in corr.iter().enumerate() {
            if !support.contains(&j) && c.abs() > best.0 {
                best = (c.abs(), j);
            }
        }
        if best.1 == usize::MAX || best.0 < 1e-12 {
            break;
        }
        support.push(best.1);
        let sub = DMatrix::from_fn(atoms.nrows(), support.len(), |i, k| atoms[(i, support[k])]);
        let coef = match sub.clone().svd(true, true).solve(f, 1e-12) {
            Ok(c) => c,
            Err(_) => break,
        };
        residual = f - &sub * &coef;
        beta.fill(0.0);
        for (k, &j) in support.iter().enumerate() {
            beta[j] = coef[k];
        }
        if residual.norm() <= 1e-14 * scale.max(1.0) {
            break;
        }
    }
    let r = residual.norm();
    (beta, r)
}

/// Sparse code of `f` against `dict` and its reconstruction residual.
pub fn sparse_code(dict: &SparseDictionary, f: &DVector<f64>) -> (DVector<f64>, f64) {
    omp(&dict.atoms, dict.sparsity, f)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KsvdReport {
    /// RMS reconstruction residual after each iteration.
    pub residuals: Vec<f64>,
    pub dropped_zero: usize,
    pub reseeded: usize,
}

fn rms(y: &DMatrix<f64>, d: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let e = y - d * x;
    (e.norm_squared() / y.ncols() as f64).sqrt()
}

/// Learn `n_atoms` atoms for `samples`. Initial atoms are stride-sampled
/// normalized samples (skipping near-duplicates). Each iteration codes every
/// sample by OMP, keeps the previous code when it reconstructs better, then
/// updates each atom and its coefficients by a rank-1 SVD of the residual
/// restricted to the samples that use it. Unused atoms are re-seeded from
/// the worst-represented sample.
pub fn ksvd_train(
    samples: &[DVector<f64>],
    n_atoms: usize,
    sparsity: usize,
    iters: usize,
) -> Result<(SparseDictionary, KsvdReport), SparseError> {
    if n_atoms == 0 || sparsity == 0 || sparsity > n_atoms {
        return Err(SparseError::InvalidConfig(format!("n_atoms {n_atoms}, sparsity {sparsity}")));
    }
    let mut report = KsvdReport::default();
    let kept: Vec<&DVector<f64>> = samples
        .iter()
        .filter(|s| {
            let ok = s.norm() > 1e-12;
            if !ok {
                report.dropped_zero += 1;
            }
            ok
        })
        .collect();
    if report.dropped_zero > 0 {
        log::warn!("k-SVD: dropped {} zero-norm samples", report.dropped_zero);
    }
    if kept.len() < n_atoms {
        return Err(SparseError::InsufficientSamples { needed: n_atoms, got: kept.len() });
    }
    let d = kept[0].len();
    if let Some(bad) = kept.iter().find(|s| s.len() != d) {
        return Err(SparseError::DimensionMismatch { expected: d, got: bad.len() });
    }
    let m = kept.len();
    let y = DMatrix::from_fn(d, m, |i, j| kept[j][i]);

    let stride = m / n_atoms;
    let mut chosen: Vec<DVector<f64>> = Vec::with_capacity(n_atoms);
    for i in (0..n_atoms).map(|a| a * stride).chain(0..m) {
        if chosen.len() == n_atoms {
            break;
        }
        let v = y.column(i).normalize();
        if chosen.iter().all(|c| c.dot(&v).abs() < DUPLICATE_DOT) {
            chosen.push(v);
        }
    }
    if chosen.len() < n_atoms {
        return Err(SparseError::InsufficientSamples { needed: n_atoms, got: chosen.len() });
    }
    let mut atoms = DMatrix::from_columns(&chosen);
    let mut codes = DMatrix::zeros(n_atoms, m);

    for it in 0..iters {
        for j in 0..m {
            let col = y.column(j).into_owned();
            let (beta, r) = omp(&atoms, sparsity, &col);
            let prev = (&col - &atoms * codes.column(j)).norm();
            if it == 0 || r < prev {
                codes.set_column(j, &beta);
            }
        }
        for k in 0..n_atoms {
            let users: Vec<usize> = (0..m).filter(|&j| codes[(k, j)] != 0.0).collect();
            if users.is_empty() {
                let err = &y - &atoms * &codes;
                let worst = (0..m)
                    .map(|j| (err.column(j).norm(), j))
                    .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
                let cand = y.column(worst.1).normalize();
                let unique = (0..n_atoms).all(|o| o == k || atoms.column(o).dot(&cand).abs() < DUPLICATE_DOT);
                if unique {
                    atoms.set_column(k, &cand);
                    report.reseeded += 1;
                }
                continue;
            }
            let mut e = DMatrix::from_fn(d, users.len(), |i, u| y[(i, users[u])]);
            for (u, &j) in users.iter().enumerate() {
                let mut approx = &atoms * codes.column(j);
                approx -= atoms.column(k) * codes[(k, j)];
                let mut col = e.column_mut(u);
                col -= approx;
            }
            let svd = e.svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let (top, sigma) = svd
                .singular_values
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (i, &s)| if s > a.1 { (i, s) } else { a });
            let mut atom = u.column(top).into_owned();
            let mut coef = vt.row(top).transpose() * sigma;
            let pivot = atom.iamax();
            if atom[pivot] < 0.0 {
                atom = -atom;
                coef = -coef;
            }
            let unique = (0..n_atoms).all(|o| o == k || atoms.column(o).dot(&atom).abs() < DUPLICATE_DOT);
            if !unique || sigma <= 0.0 {
                continue;
            }
            atoms.set_column(k, &atom);
            for (u, &j) in users.iter().enumerate() {
                codes[(k, j)] = coef[u];
            }
        }
        report.residuals.push(rms(&y, &atoms, &codes));
    }
    Ok((SparseDictionary { partition: 0, atoms, sparsity }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_vec(rng: &mut Xoshiro256PlusPlus, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
    }

    fn random_dict(rng: &mut Xoshiro256PlusPlus, d: usize, n: usize) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..n).map(|_| random_vec(rng, d).normalize()).collect();
        DMatrix::from_columns(&cols)
    }

    #[test]
    fn exact_atom_codes_to_unit_vector() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let atoms = random_dict(&mut rng, 10, 6);
        let dict = SparseDictionary { partition: 0, atoms: atoms.clone(), sparsity: 3 };
        let (beta, r) = sparse_code(&dict, &atoms.column(2).into_owned());
        assert!(r < 1e-10);
        assert!((beta[2] - 1.0).abs() < 1e-10);
        assert!(beta.iter().enumerate().all(|(j, b)| j == 2 || b.abs() < 1e-10));
    }

    #[test]
    fn orthogonal_input_is_untouched() {
        let atoms = DMatrix::from_columns(&[DVector::from_vec(vec![1.0, 0.0, 0.0]), DVector::from_vec(vec![0.0, 1.0, 0.0])]);
        let dict = SparseDictionary { partition: 0, atoms, sparsity: 2 };
        let f = DVector::from_vec(vec![0.0, 0.0, 2.5]);
        let (beta, r) = sparse_code(&dict, &f);
        assert_eq!(beta, DVector::zeros(2));
        assert_eq!(r, 2.5);
    }

    #[test]
    fn omp_against_exhaustive_pairs() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let (d, n, trials) = (8, 5, 1000);
        let mut matches = 0;
        for _ in 0..trials {
            let atoms = random_dict(&mut rng, d, n);
            let f = random_vec(&mut rng, d);
            let (_, r) = omp(&atoms, 2, &f);
            let mut best = f64::INFINITY;
            for a in 0..n {
                for b in a + 1..n {
                    let sub = DMatrix::from_columns(&[atoms.column(a).into_owned(), atoms.column(b).into_owned()]);
                    let qr = sub.clone().qr();
                    let coef = qr.r().solve_upper_triangular(&(qr.q().transpose() * &f)).unwrap();
                    best = best.min((&f - sub * coef).norm());
                }
            }
            assert!(r >= best - 1e-9, "OMP {r} beat exhaustive {best}");
            if (r - best).abs() <= 1e-9 {
                matches += 1;
            }
        }
        // unstructured Gaussian instances: OMP is optimal on roughly 80-85%
        assert!(matches >= 750, "{matches}/{trials}");
    }

    #[test]
    fn rank_one_data_learns_its_direction() {
        let v = DVector::from_vec(vec![3.0, -1.0, 2.0, 0.5]);
        let samples: Vec<DVector<f64>> = (0..12).map(|_| v.clone()).collect();
        let (dict, report) = ksvd_train(&samples, 1, 1, 5).unwrap();
        let atom = dict.atoms.column(0).into_owned();
        assert!((atom.dot(&v.normalize()).abs() - 1.0).abs() < 1e-12);
        assert!(*report.residuals.last().unwrap() < 1e-10);
    }

    #[test]
    fn planted_atoms_recovered() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let planted = DMatrix::<f64>::identity(12, 12).columns(0, 3).into_owned();
        let rot = random_dict(&mut rng, 12, 12).qr().q();
        let planted = rot * planted;
        let samples: Vec<DVector<f64>> = (0..150)
            .map(|i| {
                let amp: f64 = rng.gen_range(0.5..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                planted.column(i % 3) * amp
            })
            .collect();
        let (dict, _) = ksvd_train(&samples, 3, 1, 10).unwrap();
        for p in 0..3 {
            let best = (0..3).map(|a| dict.atoms.column(a).dot(&planted.column(p)).abs()).fold(0.0, f64::max);
            assert!(best > 0.99, "planted {p}: {best}");
        }
    }

    #[test]
    fn residual_log_non_increasing() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let samples: Vec<DVector<f64>> = (0..200).map(|_| random_vec(&mut rng, 16)).collect();
        let (dict, report) = ksvd_train(&samples, 24, 3, 20).unwrap();
        dict.validate().unwrap();
        for w in report.residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{:?}", report.residuals);
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let samples = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::zeros(2)];
        match ksvd_train(&samples, 2, 1, 3) {
            Err(SparseError::InsufficientSamples { needed: 2, got: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }
}
