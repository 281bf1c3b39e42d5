//! Hold-out estimates of the covariance of the cross-validated risk around
//! its expectation (deterministic centering).
//!
//! Both estimators swap single training points for fresh hold-out samples
//! and recompute the CV risk vector:
//!
//! * pair: `phi = (n^2/m) sum_{j<=m/2} (R^{i,2j-1} - R^{i,2j})(R^{i,2j-1} - R^{i,2j})'`
//! * perturb: `phi = (n^2/2m) sum_j (R - R^{i_j,j})(R - R^{i_j,j})'`
//!
//! where `R^{i,j}` is the CV risk with sample `i` replaced by hold-out point `j`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::covariance::ser_matrix;
use crate::cv::{cross_validate, cv_risk, fit_all_folds, replace_one_cv_risk, FoldFits};
use crate::data::{Dataset, FoldPlan, LearnerSpec};
use crate::error::{Error, Result};

/// Fresh samples from the data distribution, disjoint from the CV data.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutSet {
    pub samples: Dataset,
}

impl HoldoutSet {
    pub fn new(samples: Dataset) -> Self {
        Self { samples }
    }

    pub fn m(&self) -> usize {
        self.samples.n()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiVariant {
    Pair,
    Perturb,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiEstimate {
    #[serde(serialize_with = "ser_matrix")]
    pub phi: DMatrix<f64>,
    pub m: usize,
    pub variant: PhiVariant,
    /// Replaced training index for each hold-out point (0-based).
    pub indices: Vec<usize>,
    /// Per-summand diagonal terms, scaled so that their mean is `phi_rr`;
    /// `summands[k][r]`. Used for standard errors.
    pub summands: Vec<Vec<f64>>,
}

impl PhiEstimate {
    /// Standard error of `phi_rr` from the spread of its summands.
    pub fn diagonal_se(&self, r: usize) -> f64 {
        let k = self.summands.len();
        if k < 2 {
            return f64::NAN;
        }
        let mean = self.summands.iter().map(|s| s[r]).sum::<f64>() / k as f64;
        let var = self.summands.iter().map(|s| (s[r] - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        (var / k as f64).sqrt()
    }
}

/// `ceil(n^0.6)`, rounded up to an even number.
pub fn default_holdout_size(n: usize) -> usize {
    let m = (n as f64).powf(0.6).ceil() as usize;
    (m + m % 2).max(2)
}

fn check(ds: &Dataset, holdout: &HoldoutSet) -> Result<()> {
    if holdout.samples.d() != ds.d() {
        return Err(Error::Dimension(format!(
            "hold-out has {} features, data has {}",
            holdout.samples.d(),
            ds.d()
        )));
    }
    Ok(())
}

fn replaced_risks(
    ds: &Dataset,
    specs: &[LearnerSpec],
    plan: &FoldPlan,
    holdout: &HoldoutSet,
    indices: &[usize],
    cached: &FoldFits,
) -> Result<Vec<DVector<f64>>> {
    indices
        .par_iter()
        .enumerate()
        .map(|(j, &i)| {
            let rv = replace_one_cv_risk(ds, specs, plan, i, &holdout.samples.sample(j), cached)?;
            Ok(DVector::from_vec(rv.values))
        })
        .collect()
}

fn accumulate(diffs: &[DVector<f64>], scale: f64) -> (DMatrix<f64>, Vec<Vec<f64>>) {
    let p = diffs.first().map_or(0, |d| d.len());
    let mut phi = DMatrix::zeros(p, p);
    for d in diffs {
        phi.ger(scale, d, d, 1.0);
    }
    // each summand, rescaled so the summand mean equals the estimate
    let k = diffs.len() as f64;
    let summands = diffs
        .iter()
        .map(|d| d.iter().map(|x| scale * k * x * x).collect())
        .collect();
    (phi, summands)
}

/// Pair estimator; every hold-out point replaces training sample `replace`.
pub fn phi_pair(
    ds: &Dataset,
    specs: &[LearnerSpec],
    plan: &FoldPlan,
    holdout: &HoldoutSet,
    replace: usize,
) -> Result<PhiEstimate> {
    check(ds, holdout)?;
    let m = holdout.m();
    if m % 2 == 1 {
        return Err(Error::Parity(m));
    }
    if m < 2 {
        return Err(Error::Domain("the pair estimator needs at least two hold-out points".into()));
    }
    if replace >= ds.n() {
        return Err(Error::IndexOutOfRange { index: replace, limit: ds.n() });
    }
    let cached = fit_all_folds(ds, specs, plan)?;
    let indices = vec![replace; m];
    let risks = replaced_risks(ds, specs, plan, holdout, &indices, &cached)?;
    let diffs: Vec<DVector<f64>> = risks.chunks(2).map(|c| &c[0] - &c[1]).collect();
    let n = ds.n() as f64;
    let (phi, summands) = accumulate(&diffs, n * n / m as f64);
    Ok(PhiEstimate {
        phi,
        m,
        variant: PhiVariant::Pair,
        indices,
        summands,
    })
}

/// Round-robin schedule `i_j = j mod n`.
pub fn round_robin_schedule(n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|j| j % n).collect()
}

/// Perturbation estimator; hold-out point `j` replaces training sample
/// `schedule[j]` (round-robin when `None`).
pub fn phi_perturb(
    ds: &Dataset,
    specs: &[LearnerSpec],
    plan: &FoldPlan,
    holdout: &HoldoutSet,
    schedule: Option<&[usize]>,
) -> Result<PhiEstimate> {
    check(ds, holdout)?;
    let m = holdout.m();
    if m == 0 {
        return Err(Error::Domain("the perturbation estimator needs a hold-out point".into()));
    }
    let indices = match schedule {
        Some(s) => {
            if s.len() != m {
                return Err(Error::Dimension(format!("schedule of length {} for {m} hold-out points", s.len())));
            }
            if let Some(&bad) = s.iter().find(|&&i| i >= ds.n()) {
                return Err(Error::IndexOutOfRange { index: bad, limit: ds.n() });
            }
            s.to_vec()
        }
        None => round_robin_schedule(ds.n(), m),
    };
    let (cached, lm) = cross_validate(ds, specs, plan)?;
    let base = DVector::from_vec(cv_risk(&lm).values);
    let risks = replaced_risks(ds, specs, plan, holdout, &indices, &cached)?;
    let diffs: Vec<DVector<f64>> = risks.iter().map(|r| &base - r).collect();
    let n = ds.n() as f64;
    let (phi, summands) = accumulate(&diffs, n * n / (2.0 * m as f64));
    Ok(PhiEstimate {
        phi,
        m,
        variant: PhiVariant::Perturb,
        indices,
        summands,
    })
}
