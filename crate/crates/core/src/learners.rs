//! Model families: least squares, ridge, lasso, forward selection,
//! single-pass SGD and truncated series estimates.
//!
//! All fits are linear in the covariates with zero intercept and return
//! coefficients padded to the ambient dimension.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Family, FittedModel, Learner, Link, Sample};
use crate::error::{Error, Result};

pub const LASSO_DEFAULT_TOL: f64 = 1e-8;
pub const LASSO_DEFAULT_MAX_ITER: usize = 100_000;

/// Fits `learner` on the rows of `features`/`response` in their given order.
pub fn fit(learner: &Learner, features: &DMatrix<f64>, response: &DVector<f64>) -> Result<FittedModel> {
    learner.validate()?;
    match learner {
        Learner::Ols => Ok(fit_ols(features, response)),
        Learner::Ridge { lambda } => fit_ridge(features, response, *lambda),
        Learner::Lasso {
            lambda,
            tol,
            max_iter,
        } => fit_lasso(features, response, *lambda, *tol, *max_iter),
        Learner::Forward { steps } => fit_forward(features, response, *steps),
        Learner::Sgd(cfg) => fit_sgd(features, response, cfg),
        Learner::Series(cfg) => fit_series(features, response, cfg),
        Learner::Fixed { coefficients } => {
            if coefficients.len() != features.ncols() {
                return Err(Error::Dimension(format!(
                    "fixed model has {} coefficients, data has {} features",
                    coefficients.len(),
                    features.ncols()
                )));
            }
            Ok(FittedModel::linear(Family::Fixed, DVector::from_column_slice(coefficients)))
        }
    }
}

/// Minimum-norm solution of `gram * x = rhs` for symmetric PSD `gram`.
fn solve_psd_min_norm(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    if gram.nrows() == 0 {
        return DVector::zeros(0);
    }
    let max_diag = gram.diagonal().amax();
    if max_diag == 0.0 {
        return DVector::zeros(gram.nrows());
    }
    // Cholesky is accepted only when the pivots stay well away from zero, so
    // nearly singular systems still take the pseudo-inverse route.
    if let Some(chol) = Cholesky::new(gram.clone()) {
        let l = chol.l_dirty();
        let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot > max_diag * 1e-10 {
            return chol.solve(rhs);
        }
    }
    let eig = SymmetricEigen::new(gram.clone());
    let cutoff = eig.eigenvalues.amax() * (gram.nrows() as f64) * f64::EPSILON * 16.0;
    let proj = eig.eigenvectors.transpose() * rhs;
    let scaled = DVector::from_iterator(
        proj.len(),
        proj.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(p, &ev)| if ev > cutoff { p / ev } else { 0.0 }),
    );
    &eig.eigenvectors * scaled
}

/// Least squares; rank-deficient designs get the minimum-norm solution.
pub fn fit_ols(features: &DMatrix<f64>, response: &DVector<f64>) -> FittedModel {
    let gram = features.tr_mul(features);
    let rhs = features.tr_mul(response);
    FittedModel::linear(Family::Ols, solve_psd_min_norm(&gram, &rhs))
}

/// `argmin (1/n)|y - Z b|^2 + lambda |b|^2`.
pub fn fit_ridge(features: &DMatrix<f64>, response: &DVector<f64>, lambda: f64) -> Result<FittedModel> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("ridge penalty must be >= 0, got {lambda}")));
    }
    let n = features.nrows().max(1) as f64;
    let mut gram = features.tr_mul(features) / n;
    for j in 0..gram.nrows() {
        gram[(j, j)] += lambda;
    }
    let rhs = features.tr_mul(response) / n;
    Ok(FittedModel::linear(Family::Ridge, solve_psd_min_norm(&gram, &rhs)))
}

/// Smallest penalty at which the lasso solution is identically zero, `|Z'y|_inf / n`.
pub fn lasso_lambda_max(features: &DMatrix<f64>, response: &DVector<f64>) -> f64 {
    let n = features.nrows().max(1) as f64;
    features.tr_mul(response).amax() / n
}

/// Ten penalties `lambda_max 2^i / sqrt(1 - 1/V)`, `i = 0, -1, .., -9`.
pub fn lasso_grid(features: &DMatrix<f64>, response: &DVector<f64>, folds: usize) -> Result<Vec<f64>> {
    if folds < 2 {
        return Err(Error::Domain(format!("need at least 2 folds, got {folds}")));
    }
    let lmax = lasso_lambda_max(features, response);
    if !(lmax > 0.0) {
        return Err(Error::Domain("Z'y is identically zero; the lasso grid is degenerate".into()));
    }
    let scale = lmax / (1.0 - 1.0 / folds as f64).sqrt();
    Ok((0..10).map(|k| scale * 0.5f64.powi(k)).collect())
}

/// `count` log-spaced penalties from `lambda_max` down to `lambda_max * min_ratio`.
pub fn lasso_log_grid(
    features: &DMatrix<f64>,
    response: &DVector<f64>,
    count: usize,
    min_ratio: f64,
) -> Result<Vec<f64>> {
    let lmax = lasso_lambda_max(features, response);
    if !(lmax > 0.0) {
        return Err(Error::Domain("Z'y is identically zero; the lasso grid is degenerate".into()));
    }
    if count < 2 || !(min_ratio > 0.0 && min_ratio < 1.0) {
        return Err(Error::Config(format!("bad log grid: count {count}, ratio {min_ratio}")));
    }
    let step = min_ratio.ln() / (count - 1) as f64;
    Ok((0..count).map(|k| lmax * (step * k as f64).exp()).collect())
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Largest violation of the lasso optimality conditions for
/// `(1/2n)|y - Z b|^2 + lambda |b|_1`, given `gram = Z'Z/n` and `corr = Z'y/n`.
pub fn lasso_kkt_residual(gram: &DMatrix<f64>, corr: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    let grad = corr - gram * beta;
    grad.iter()
        .zip(beta.iter())
        .map(|(g, b)| {
            if *b > 0.0 {
                (g - lambda).abs()
            } else if *b < 0.0 {
                (g + lambda).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Cyclic coordinate descent with soft-thresholding on the Gram matrix.
///
/// Stops once a full sweep moves no coordinate by `tol` or more and the KKT
/// residual is at most `10 tol`.
pub fn fit_lasso(
    features: &DMatrix<f64>,
    response: &DVector<f64>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FittedModel> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lasso penalty must be >= 0, got {lambda}")));
    }
    let (gram, corr) = gram_and_corr(features, response);
    fit_lasso_gram(&gram, &corr, lambda, tol, max_iter)
}

/// `(Z'Z/n, Z'y/n)`.
pub fn gram_and_corr(features: &DMatrix<f64>, response: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = features.nrows().max(1) as f64;
    (features.tr_mul(features) / n, features.tr_mul(response) / n)
}

/// [`fit_lasso`] on precomputed `gram = Z'Z/n` and `corr = Z'y/n`, so a
/// penalty path can share one Gram matrix.
pub fn fit_lasso_gram(gram: &DMatrix<f64>, corr: &DVector<f64>, lambda: f64, tol: f64, max_iter: usize) -> Result<FittedModel> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lasso penalty must be >= 0, got {lambda}")));
    }
    let d = gram.ncols();
    let mut beta = DVector::<f64>::zeros(d);
    // fitted = gram * beta, kept in sync with every coordinate move
    let mut fitted = DVector::<f64>::zeros(d);
    let mut last_update = f64::INFINITY;

    for sweep in 1..=max_iter {
        let mut max_update = 0.0f64;
        for j in 0..d {
            let gjj = gram[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let old = beta[j];
            let rho = corr[j] - fitted[j] + gjj * old;
            let new = soft_threshold(rho, lambda) / gjj;
            let delta = new - old;
            if delta != 0.0 {
                beta[j] = new;
                fitted.axpy(delta, &gram.column(j), 1.0);
                max_update = max_update.max(delta.abs());
            }
        }
        last_update = max_update;
        if max_update < tol {
            fitted = gram * &beta;
            if lasso_kkt_residual(gram, corr, &beta, lambda) <= 10.0 * tol {
                let mut model = FittedModel::linear(Family::Lasso, beta);
                model.iterations = sweep;
                return Ok(model);
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        last_update,
    })
}

/// Greedy forward selection: each step adds the feature with the largest
/// residual-sum-of-squares reduction (ties to the smallest index), then the
/// selected support is refit by least squares.
pub fn fit_forward(features: &DMatrix<f64>, response: &DVector<f64>, steps: usize) -> Result<FittedModel> {
    let d = features.ncols();
    if steps > d {
        return Err(Error::Config(format!("forward selection with {steps} steps on {d} features")));
    }
    let gram = features.tr_mul(features);
    let corr = features.tr_mul(response);
    let yy = response.dot(response);
    let rss = |support: &[usize]| -> (f64, DVector<f64>) {
        let g = gram.select_rows(support.iter()).select_columns(support.iter());
        let c = DVector::from_iterator(support.len(), support.iter().map(|&j| corr[j]));
        let b = solve_psd_min_norm(&g, &c);
        (yy - c.dot(&b), b)
    };

    let mut selected: Vec<usize> = Vec::with_capacity(steps);
    let mut coef_sel = DVector::zeros(0);
    for _ in 0..steps {
        let mut best: Option<(f64, usize, DVector<f64>)> = None;
        for j in (0..d).filter(|j| !selected.contains(j)) {
            let mut cand = selected.clone();
            cand.push(j);
            let (r, b) = rss(&cand);
            if best.as_ref().is_none_or(|(br, _, _)| r < *br) {
                best = Some((r, j, b));
            }
        }
        let (_, j, b) = best.expect("steps <= d leaves a candidate");
        selected.push(j);
        coef_sel = b;
    }
    let mut coefficients = DVector::zeros(d);
    for (k, &j) in selected.iter().enumerate() {
        coefficients[j] = coef_sel[k];
    }
    let mut model = FittedModel::linear(Family::Forward, coefficients);
    model.support = selected;
    model.iterations = steps;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SgdObjective {
    /// `psi = (y - z't)^2 / 2 + lambda |t|^2 / 2`
    RidgeSquared,
    /// `psi = -y z't + log(1 + e^{z't}) + lambda |t|^2`
    LogisticRidge,
}

/// Single-pass SGD with step `alpha_t = t^{-a} / beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub objective: SgdObjective,
    pub lambda: f64,
    pub step_exponent: f64,
    /// Gradient Lipschitz constant (smoothness) `beta`.
    pub smoothness: f64,
    pub lipschitz: f64,
    pub strong_convexity: f64,
    pub hessian_lipschitz: f64,
    pub radius_x: f64,
    pub radius_theta: f64,
    pub project: bool,
}

impl SgdConfig {
    /// Ridge objective on `|(y, z)| <= r_x`, `|theta| <= r_theta`.
    pub fn ridge(lambda: f64, step_exponent: f64, radius_x: f64, radius_theta: f64) -> Self {
        let rx2 = radius_x * radius_x;
        Self {
            objective: SgdObjective::RidgeSquared,
            lambda,
            step_exponent,
            smoothness: rx2 + lambda,
            lipschitz: rx2 * (1.0 + radius_theta) + lambda * radius_theta,
            strong_convexity: lambda,
            hessian_lipschitz: 0.0,
            radius_x,
            radius_theta,
            project: true,
        }
    }

    pub fn logistic_ridge(lambda: f64, step_exponent: f64, radius_x: f64, radius_theta: f64) -> Self {
        let rx2 = radius_x * radius_x;
        Self {
            objective: SgdObjective::LogisticRidge,
            lambda,
            step_exponent,
            smoothness: radius_x / radius_theta + lambda,
            lipschitz: rx2 + (1.0 + (radius_x * radius_theta).exp()).ln() / radius_theta + lambda * radius_theta,
            strong_convexity: 2.0 * lambda,
            hessian_lipschitz: rx2 / (4.0 * radius_theta),
            radius_x,
            radius_theta,
            project: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.step_exponent;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!("step exponent must lie in (0, 1), got {a}")));
        }
        if !(self.lambda >= 0.0 && self.smoothness > 0.0 && self.strong_convexity >= 0.0) {
            return Err(Error::Config("SGD constants must be nonnegative with beta > 0".into()));
        }
        if self.project && !(self.radius_theta > 0.0) {
            return Err(Error::Config("projection needs a positive radius".into()));
        }
        // alpha_1 = 1/beta <= 2/(beta + gamma) and the steps only shrink
        if self.strong_convexity > self.smoothness {
            return Err(Error::Config(format!(
                "strong convexity {} exceeds smoothness {}",
                self.strong_convexity, self.smoothness
            )));
        }
        Ok(())
    }

    /// `alpha_t` for the 1-based step `t`.
    pub fn step(&self, t: usize) -> f64 {
        (t as f64).powf(-self.step_exponent) / self.smoothness
    }

    pub fn gradient(&self, theta: &DVector<f64>, z: &DVector<f64>, y: f64) -> DVector<f64> {
        let eta = z.dot(theta);
        match self.objective {
            SgdObjective::RidgeSquared => z * (eta - y) + theta * self.lambda,
            SgdObjective::LogisticRidge => {
                let s = 1.0 / (1.0 + (-eta).exp());
                z * (s - y) + theta * (2.0 * self.lambda)
            }
        }
    }

    /// `(2L / beta) n^{-a}`.
    pub fn first_order_bound(&self, n: usize) -> f64 {
        2.0 * self.lipschitz / self.smoothness * (n as f64).powf(-self.step_exponent)
    }

    /// `gamma / beta >= a (1-a) / (1 - 2^{-(1-a)}) * log n / n^{1-a}`.
    pub fn ratio_condition(&self, n: usize) -> bool {
        let a = self.step_exponent;
        let nf = n as f64;
        let rhs = a * (1.0 - a) / (1.0 - 2f64.powf(-(1.0 - a))) * nf.ln() / nf.powf(1.0 - a);
        self.strong_convexity / self.smoothness >= rhs
    }
}

/// Runs one SGD pass in row order from `theta_0 = 0`; rows listed in
/// `replacements` are swapped for the given samples.
pub fn sgd_pass(
    features: &DMatrix<f64>,
    response: &DVector<f64>,
    cfg: &SgdConfig,
    replacements: &[(usize, &Sample)],
) -> DVector<f64> {
    let d = features.ncols();
    let mut theta = DVector::<f64>::zeros(d);
    let mut z = DVector::<f64>::zeros(d);
    for t in 0..features.nrows() {
        let y = match replacements.iter().find(|(i, _)| *i == t) {
            Some((_, s)) => {
                z.copy_from(&s.z);
                s.y
            }
            None => {
                z.copy_from(&features.row(t).transpose());
                response[t]
            }
        };
        let g = cfg.gradient(&theta, &z, y);
        theta.axpy(-cfg.step(t + 1), &g, 1.0);
        if cfg.project {
            let norm = theta.norm();
            if norm > cfg.radius_theta {
                theta *= cfg.radius_theta / norm;
            }
        }
    }
    theta
}

pub fn fit_sgd(features: &DMatrix<f64>, response: &DVector<f64>, cfg: &SgdConfig) -> Result<FittedModel> {
    cfg.validate()?;
    let theta = sgd_pass(features, response, cfg, &[]);
    let mut model = FittedModel::linear(Family::Sgd, theta);
    model.iterations = features.nrows();
    if cfg.objective == SgdObjective::LogisticRidge {
        model.link = Link::Logistic;
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesConfig {
    pub truncation: usize,
}

/// `beta_j = n^{-1} sum_i y_i z_ij` for `j < J`, zero beyond.
pub fn fit_series(features: &DMatrix<f64>, response: &DVector<f64>, cfg: &SeriesConfig) -> Result<FittedModel> {
    let d = features.ncols();
    if cfg.truncation == 0 || cfg.truncation > d {
        return Err(Error::Config(format!(
            "series truncation {} outside 1..={d}",
            cfg.truncation
        )));
    }
    let n = features.nrows().max(1) as f64;
    let mut coefficients = DVector::zeros(d);
    for j in 0..cfg.truncation {
        coefficients[j] = features.column(j).dot(response) / n;
    }
    Ok(FittedModel::linear(Family::Series, coefficients))
}
