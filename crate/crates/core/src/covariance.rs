//! Fold-wise plug-in covariance of held-out losses.
//!
//! Each fold's losses are centered at their own fold mean, so the target is
//! the covariance conditional on the fitted models.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{FoldPlan, LossMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Divisor {
    /// `|I_v| - 1`
    Unbiased,
}

/// `Sigma = V^{-1} sum_v Sigma_v` and its diagonal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovEstimate {
    #[serde(serialize_with = "ser_matrix")]
    pub sigma: DMatrix<f64>,
    pub lambda_diag: Vec<f64>,
    pub divisor: Divisor,
}

/// Covariance of the `p - 1` difference losses `l_r - l_s`, `s != r`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffCovEstimate {
    pub candidate: usize,
    #[serde(serialize_with = "ser_matrix")]
    pub sigma: DMatrix<f64>,
    pub diag: Vec<f64>,
    /// Row `k` of `sigma` corresponds to competitor `others[k]`.
    pub others: Vec<usize>,
}

/// Correlation over the coordinates whose variance clears the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub corr: DMatrix<f64>,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub floor: f64,
}

pub(crate) fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for row in m.row_iter() {
        seq.serialize_element(&row.iter().copied().collect::<Vec<f64>>())?;
    }
    seq.end()
}

fn fold_block_covariance(values: &DMatrix<f64>, rows: &[usize], fold: usize) -> Result<DMatrix<f64>> {
    let m = rows.len();
    if m < 2 {
        return Err(Error::DegenerateFold { fold, size: m });
    }
    let p = values.ncols();
    let mut mean = DVector::<f64>::zeros(p);
    for &i in rows {
        mean += values.row(i).transpose();
    }
    mean /= m as f64;
    let mut centered = DMatrix::<f64>::zeros(m, p);
    for (k, &i) in rows.iter().enumerate() {
        for r in 0..p {
            centered[(k, r)] = values[(i, r)] - mean[r];
        }
    }
    let mut cov = centered.tr_mul(&centered) / (m - 1) as f64;
    symmetrize(&mut cov);
    Ok(cov)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for r in 0..m.nrows() {
        for s in 0..r {
            let avg = 0.5 * (m[(r, s)] + m[(s, r)]);
            m[(r, s)] = avg;
            m[(s, r)] = avg;
        }
    }
}

fn aggregate(values: &DMatrix<f64>, plan: &FoldPlan) -> Result<DMatrix<f64>> {
    let p = values.ncols();
    let mut total = DMatrix::<f64>::zeros(p, p);
    for (v, rows) in plan.index_sets.iter().enumerate() {
        total += fold_block_covariance(values, rows, v)?;
    }
    Ok(total / plan.folds as f64)
}

/// Sample covariance of the loss rows in fold `v`.
pub fn fold_covariance(lm: &LossMatrix, fold: usize) -> Result<DMatrix<f64>> {
    let rows = lm.plan.index_sets.get(fold).ok_or(Error::IndexOutOfRange {
        index: fold,
        limit: lm.plan.folds,
    })?;
    fold_block_covariance(&lm.values, rows, fold)
}

pub fn aggregate_covariance(lm: &LossMatrix) -> Result<CovEstimate> {
    let sigma = aggregate(&lm.values, &lm.plan)?;
    let lambda_diag = sigma.diagonal().iter().copied().collect();
    Ok(CovEstimate {
        sigma,
        lambda_diag,
        divisor: Divisor::Unbiased,
    })
}

/// `1e-12 * max(max_r sigma_rr, 1)`.
pub fn default_variance_floor(diag: &[f64]) -> f64 {
    1e-12 * diag.iter().copied().fold(1.0, f64::max)
}

/// Standardizes a covariance to a correlation, dropping coordinates with
/// variance at or below `floor` (default [`default_variance_floor`]).
pub fn standardize(sigma: &DMatrix<f64>, floor: Option<f64>) -> Result<Standardized> {
    let diag: Vec<f64> = sigma.diagonal().iter().copied().collect();
    let floor = floor.unwrap_or_else(|| default_variance_floor(&diag));
    let (kept, dropped): (Vec<usize>, Vec<usize>) = (0..diag.len()).partition(|&r| diag[r] > floor);
    if kept.is_empty() {
        return Err(Error::EmptyProblem { floor });
    }
    let inv_sd: Vec<f64> = kept.iter().map(|&r| 1.0 / diag[r].sqrt()).collect();
    let q = kept.len();
    let corr = DMatrix::from_fn(q, q, |a, b| {
        if a == b {
            1.0
        } else {
            sigma[(kept[a], kept[b])] * inv_sd[a] * inv_sd[b]
        }
    });
    Ok(Standardized {
        corr,
        kept,
        dropped,
        floor,
    })
}

pub fn standardized_correlation(cov: &CovEstimate, floor: Option<f64>) -> Result<Standardized> {
    standardize(&cov.sigma, floor)
}

/// Differencing map rows `e_r - e_s` for `s != r`, shape `(p-1) x p`.
pub fn differencing_map(p: usize, candidate: usize) -> DMatrix<f64> {
    let others: Vec<usize> = (0..p).filter(|&s| s != candidate).collect();
    DMatrix::from_fn(p - 1, p, |k, c| {
        if c == candidate {
            1.0
        } else if c == others[k] {
            -1.0
        } else {
            0.0
        }
    })
}

pub fn difference_covariance(lm: &LossMatrix, candidate: usize) -> Result<DiffCovEstimate> {
    let p = lm.p();
    if p < 2 {
        return Err(Error::EmptyDifference);
    }
    if candidate >= p {
        return Err(Error::IndexOutOfRange {
            index: candidate,
            limit: p,
        });
    }
    let others: Vec<usize> = (0..p).filter(|&s| s != candidate).collect();
    let n = lm.n();
    let diffs = DMatrix::from_fn(n, p - 1, |i, k| lm.values[(i, candidate)] - lm.values[(i, others[k])]);
    let sigma = aggregate(&diffs, &lm.plan)?;
    let diag = sigma.diagonal().iter().copied().collect();
    Ok(DiffCovEstimate {
        candidate,
        sigma,
        diag,
        others,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_folds, FoldMode};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lm(n: usize, p: usize, folds: usize, seed: u64) -> LossMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = make_folds(n, folds, FoldMode::Strict).unwrap();
        LossMatrix::from_values(DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 4.0 - 1.0), plan).unwrap()
    }

    /// Textbook two-pass covariance over explicit row lists.
    fn two_pass(values: &DMatrix<f64>, rows: &[usize], r: usize, s: usize) -> f64 {
        let m = rows.len() as f64;
        let mr = rows.iter().map(|&i| values[(i, r)]).sum::<f64>() / m;
        let ms = rows.iter().map(|&i| values[(i, s)]).sum::<f64>() / m;
        rows.iter().map(|&i| (values[(i, r)] - mr) * (values[(i, s)] - ms)).sum::<f64>() / (m - 1.0)
    }

    #[test]
    fn fold_covariance_cases() {
        let plan = make_folds(4, 2, FoldMode::Strict).unwrap();
        let constant = LossMatrix::from_values(DMatrix::from_element(4, 2, 3.0), plan.clone()).unwrap();
        assert_eq!(fold_covariance(&constant, 0).unwrap(), DMatrix::zeros(2, 2));

        let lm = LossMatrix::from_values(DMatrix::from_column_slice(4, 1, &[1.5, -0.5, 0.0, 0.0]), plan).unwrap();
        assert_relative_eq!(fold_covariance(&lm, 0).unwrap()[(0, 0)], 2.0f64.powi(2) / 2.0);

        let lm = random_lm(50, 3, 5, 1);
        let c = fold_covariance(&lm, 2).unwrap();
        for r in 0..3 {
            for s in 0..3 {
                assert!((c[(r, s)] - two_pass(&lm.values, &lm.plan.index_sets[2], r, s)).abs() < 1e-12);
            }
        }
        let singles = LossMatrix::from_values(DMatrix::zeros(4, 1), make_folds(4, 4, FoldMode::Strict).unwrap()).unwrap();
        assert!(matches!(fold_covariance(&singles, 0), Err(Error::DegenerateFold { size: 1, .. })));
    }

    #[test]
    fn aggregate_matches_direct_average() {
        let lm = random_lm(50, 4, 5, 2);
        let est = aggregate_covariance(&lm).unwrap();
        for r in 0..4 {
            for s in 0..4 {
                let direct = (0..5).map(|v| two_pass(&lm.values, &lm.plan.index_sets[v], r, s)).sum::<f64>() / 5.0;
                assert!((est.sigma[(r, s)] - direct).abs() < 1e-12);
            }
            assert_eq!(est.lambda_diag[r], est.sigma[(r, r)]);
        }
        let constant = LossMatrix::from_values(DMatrix::from_element(10, 3, -2.0), make_folds(10, 5, FoldMode::Strict).unwrap()).unwrap();
        assert_eq!(aggregate_covariance(&constant).unwrap().sigma, DMatrix::zeros(3, 3));
    }

    #[test]
    fn identical_fold_blocks_reproduce_block_covariance() {
        let block = random_lm(10, 3, 2, 3).values.rows(0, 5).into_owned();
        let mut values = DMatrix::zeros(20, 3);
        for v in 0..4 {
            values.rows_mut(5 * v, 5).copy_from(&block);
        }
        let lm = LossMatrix::from_values(values, make_folds(20, 4, FoldMode::Strict).unwrap()).unwrap();
        let c = fold_covariance(&lm, 0).unwrap();
        assert!((aggregate_covariance(&lm).unwrap().sigma - c).amax() < 1e-14);
    }

    #[test]
    fn correlation_cases() {
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 5.0]));
        assert_eq!(standardize(&diag, None).unwrap().corr, DMatrix::identity(2, 2));

        let s = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 1.0]);
        let c = standardize(&s, None).unwrap().corr;
        assert!((c - DMatrix::from_element(2, 2, 1.0)).amax() < 1e-15);

        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.2, 0.0, 2.0]);
        let st = standardize(&s, None).unwrap();
        assert_eq!(st.dropped, vec![1]);
        assert_eq!(st.kept, vec![0, 2]);
        assert!(matches!(standardize(&DMatrix::zeros(2, 2), None), Err(Error::EmptyProblem { .. })));
    }

    #[test]
    fn difference_covariance_cases() {
        let plan = make_folds(10, 5, FoldMode::Strict).unwrap();
        let col: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let same = LossMatrix::from_values(DMatrix::from_fn(10, 3, |i, _| col[i]), plan).unwrap();
        assert_eq!(difference_covariance(&same, 1).unwrap().sigma, DMatrix::zeros(2, 2));

        let lm = random_lm(30, 2, 5, 4);
        let dc = difference_covariance(&lm, 0).unwrap();
        let diff = DMatrix::from_fn(30, 1, |i, _| lm.values[(i, 0)] - lm.values[(i, 1)]);
        let direct = (0..5).map(|v| two_pass(&diff, &lm.plan.index_sets[v], 0, 0)).sum::<f64>() / 5.0;
        assert!((dc.sigma[(0, 0)] - direct).abs() < 1e-12);

        let single = random_lm(10, 1, 5, 5);
        assert_eq!(difference_covariance(&single, 0), Err(Error::EmptyDifference));
    }

    #[test]
    fn difference_covariance_is_bilinear_transform() {
        let lm = random_lm(60, 5, 5, 6);
        let joint = aggregate_covariance(&lm).unwrap().sigma;
        for r in 0..5 {
            let a = differencing_map(5, r);
            let via = &a * &joint * a.transpose();
            let direct = difference_covariance(&lm, r).unwrap();
            assert!((via - direct.sigma).amax() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn fold_shift_invariance(seed in 0u64..5000, shifts in proptest::collection::vec(-5.0f64..5.0, 5 * 3)) {
            let lm = random_lm(25, 3, 5, seed);
            let mut shifted = lm.clone();
            for i in 0..25 {
                let v = lm.plan.fold_of[i];
                for r in 0..3 {
                    shifted.values[(i, r)] += shifts[3 * v + r];
                }
            }
            let a = aggregate_covariance(&lm).unwrap().sigma;
            let b = aggregate_covariance(&shifted).unwrap().sigma;
            prop_assert!((a - b).amax() < 1e-10);
        }

        #[test]
        fn column_scaling(seed in 0u64..5000, c in 0.1f64..10.0) {
            let lm = random_lm(25, 3, 5, seed);
            let mut scaled = lm.clone();
            scaled.values.column_mut(1).scale_mut(c);
            let a = aggregate_covariance(&lm).unwrap();
            let b = aggregate_covariance(&scaled).unwrap();
            prop_assert!((b.sigma[(1, 1)] - c * c * a.sigma[(1, 1)]).abs() < 1e-10 * (1.0 + c * c));
            prop_assert!((b.sigma[(0, 1)] - c * a.sigma[(0, 1)]).abs() < 1e-10 * (1.0 + c));
            let ca = standardized_correlation(&a, None).unwrap().corr;
            let cb = standardized_correlation(&b, None).unwrap().corr;
            prop_assert!((ca - cb).amax() < 1e-10);
        }

        #[test]
        fn symmetric_and_psd(seed in 0u64..5000) {
            let lm = random_lm(30, 4, 5, seed);
            let s = aggregate_covariance(&lm).unwrap().sigma;
            prop_assert!((&s - s.transpose()).amax() <= 1e-12);
            let eig = nalgebra::SymmetricEigen::new(s.clone());
            prop_assert!(eig.eigenvalues.min() >= -1e-12 * s.amax().max(1.0));
        }
    }
}
