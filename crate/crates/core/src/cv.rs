//! V-fold fitting, held-out loss matrices and replace-one recomputation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Dataset, FittedModel, FoldPlan, Learner, LearnerSpec, Link, LossKind, LossMatrix, Sample};
use crate::error::{Error, Result};
use crate::learners;
use crate::simgen::GeneratorTruth;

/// Cross-validated risks `R_cv,r = n^{-1} sum_i loss(i, r)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskVector {
    pub values: Vec<f64>,
    pub n: usize,
    pub model_labels: Vec<String>,
}

impl RiskVector {
    pub fn p(&self) -> usize {
        self.values.len()
    }
}

/// `grid[v][r]` is model `r` trained on every sample outside fold `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldFits {
    pub grid: Vec<Vec<FittedModel>>,
}

impl FoldFits {
    pub fn get(&self, fold: usize, model: usize) -> &FittedModel {
        &self.grid[fold][model]
    }
}

fn fit_fold(ds: &Dataset, specs: &[LearnerSpec], plan: &FoldPlan, v: usize) -> Result<Vec<FittedModel>> {
    let train = ds.select_rows(&plan.training_indices(v));
    // one Gram matrix serves the whole lasso path
    let gram = specs
        .iter()
        .any(|s| matches!(s.learner, Learner::Lasso { .. }))
        .then(|| learners::gram_and_corr(&train.features, &train.response));
    specs
        .par_iter()
        .enumerate()
        .map(|(r, spec)| {
            let fitted = match (&spec.learner, &gram) {
                (Learner::Lasso { lambda, tol, max_iter }, Some((g, c))) => {
                    spec.learner.validate().and_then(|_| learners::fit_lasso_gram(g, c, *lambda, *tol, *max_iter))
                }
                (learner, _) => learners::fit(learner, &train.features, &train.response),
            };
            fitted.map_err(|e| Error::Learner {
                fold: v,
                model: r,
                source: Box::new(e),
            })
        })
        .collect()
}

fn check_inputs(ds: &Dataset, specs: &[LearnerSpec], plan: &FoldPlan) -> Result<()> {
    if ds.n() != plan.n {
        return Err(Error::Dimension(format!("dataset has {} rows, plan expects {}", ds.n(), plan.n)));
    }
    if ds.d() == 0 {
        return Err(Error::Dimension("dataset has no features".into()));
    }
    if specs.is_empty() {
        return Err(Error::Config("no learners given".into()));
    }
    Ok(())
}

/// Fits all `V x p` models; training rows stay in ascending index order.
pub fn fit_all_folds(ds: &Dataset, specs: &[LearnerSpec], plan: &FoldPlan) -> Result<FoldFits> {
    check_inputs(ds, specs, plan)?;
    let grid = (0..plan.folds)
        .into_par_iter()
        .map(|v| fit_fold(ds, specs, plan, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldFits { grid })
}

fn loss_of(model: &FittedModel, kind: LossKind, features: &DMatrix<f64>, row: usize, y: f64) -> f64 {
    kind.eval(y, model.predict_row(features, row))
}

/// Entry `(i, r)` evaluates the fold-`v_i` fit of model `r` at sample `i`.
pub fn loss_matrix(ds: &Dataset, fits: &FoldFits, plan: &FoldPlan, specs: &[LearnerSpec]) -> Result<LossMatrix> {
    check_inputs(ds, specs, plan)?;
    if fits.grid.len() != plan.folds || fits.grid.iter().any(|row| row.len() != specs.len()) {
        return Err(Error::Dimension("fold fits do not match the plan and learner bank".into()));
    }
    let p = specs.len();
    let mut values = DMatrix::zeros(plan.n, p);
    for i in 0..plan.n {
        let v = plan.fold_of[i];
        for (r, spec) in specs.iter().enumerate() {
            values[(i, r)] = loss_of(fits.get(v, r), spec.loss, &ds.features, i, ds.response[i]);
        }
    }
    LossMatrix::new(values, plan.clone(), specs.iter().map(|s| s.label.clone()).collect())
}

/// Fits every fold and returns the fits together with the loss matrix.
pub fn cross_validate(ds: &Dataset, specs: &[LearnerSpec], plan: &FoldPlan) -> Result<(FoldFits, LossMatrix)> {
    let fits = fit_all_folds(ds, specs, plan)?;
    let lm = loss_matrix(ds, &fits, plan, specs)?;
    Ok((fits, lm))
}

pub fn cv_risk(lm: &LossMatrix) -> RiskVector {
    let n = lm.n();
    let values = lm
        .values
        .column_iter()
        .map(|col| col.iter().sum::<f64>() / n as f64)
        .collect();
    RiskVector {
        values,
        n,
        model_labels: lm.model_labels.clone(),
    }
}

/// CV risk after replacing sample `i` by `x`.
///
/// The fold-`v_i` fits never saw sample `i`, so they are reused from `cached`;
/// the other `V - 1` folds are refit. The result equals a from-scratch
/// recomputation on the modified dataset.
pub fn replace_one_cv_risk(
    ds: &Dataset,
    specs: &[LearnerSpec],
    plan: &FoldPlan,
    i: usize,
    x: &Sample,
    cached: &FoldFits,
) -> Result<RiskVector> {
    let modified = ds.with_replaced(i, x)?;
    let vi = plan.fold_of[i];
    let grid = (0..plan.folds)
        .into_par_iter()
        .map(|v| {
            if v == vi {
                Ok(cached.grid[v].clone())
            } else {
                fit_fold(&modified, specs, plan, v)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let lm = loss_matrix(&modified, &FoldFits { grid }, plan, specs)?;
    Ok(cv_risk(&lm))
}

/// `R~_r = V^{-1} sum_v R_r(X_{-v})` with `R_r(X_{-v}) = sigma^2 + |b_{r,v} - beta|^2`,
/// valid for squared loss under the identity-covariance Gaussian design.
pub fn average_fitted_risk_oracle(fits: &FoldFits, specs: &[LearnerSpec], truth: &GeneratorTruth) -> Result<Vec<f64>> {
    let (beta, sigma2) = match truth {
        GeneratorTruth::SparseLinear { beta, sigma2 } => (DVector::from_column_slice(beta), *sigma2),
        other => {
            return Err(Error::UnsupportedGenerator(format!(
                "closed-form risk needs the sparse linear design, got {other:?}"
            )))
        }
    };
    if let Some(spec) = specs.iter().find(|s| s.loss != LossKind::Squared) {
        return Err(Error::Config(format!("closed-form risk needs squared loss ({})", spec.label)));
    }
    let folds = fits.grid.len();
    (0..specs.len())
        .map(|r| {
            let mut total = 0.0;
            for v in 0..folds {
                let m = fits.get(v, r);
                if m.link != Link::Identity || m.coefficients.len() != beta.len() || m.intercept != 0.0 {
                    return Err(Error::Config(format!("model {r} is not a zero-intercept linear fit of dimension {}", beta.len())));
                }
                total += sigma2 + (&m.coefficients - &beta).norm_squared();
            }
            Ok(total / folds as f64)
        })
        .collect()
}
