//! Datasets, fold plans, loss matrices and the learner contract.
//!
//! Indices are 0-based throughout: sample `i` here is `X_{i+1}` in the usual
//! 1-based notation, and fold `v` is the `(v+1)`-th fold.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{SeriesConfig, SgdConfig};

/// Response `y` plus covariates `z` for `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x d`, row `i` is `Z_i`.
    pub features: DMatrix<f64>,
    pub response: DVector<f64>,
    pub names: Option<Vec<String>>,
}

/// A single observation `x = (y, z)`, used for replacements and hold-outs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub z: DVector<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    RowMismatch { features: usize, response: usize },
    NonFiniteFeature { row: usize, col: usize },
    NonFiniteResponse { row: usize },
    NameCount { names: usize, columns: usize },
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, response: DVector<f64>) -> Result<Self> {
        let ds = Self {
            features,
            response,
            names: None,
        };
        match validate_dataset(&ds).first() {
            None => Ok(ds),
            Some(v) => Err(Error::Dimension(format!("{v:?}"))),
        }
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            z: self.features.row(i).transpose(),
            y: self.response[i],
        }
    }

    /// Rows `rows` in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let features = self.features.select_rows(rows.iter());
        let response = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.response[i]));
        Dataset {
            features,
            response,
            names: self.names.clone(),
        }
    }

    pub fn with_replaced(&self, i: usize, x: &Sample) -> Result<Dataset> {
        if i >= self.n() {
            return Err(Error::IndexOutOfRange {
                index: i,
                limit: self.n(),
            });
        }
        if x.z.len() != self.d() {
            return Err(Error::Dimension(format!(
                "replacement has {} features, dataset has {}",
                x.z.len(),
                self.d()
            )));
        }
        let mut out = self.clone();
        out.features.row_mut(i).copy_from(&x.z.transpose());
        out.response[i] = x.y;
        Ok(out)
    }

    /// Reads the `y,z1,..,zd` CSV layout.
    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let y_col = headers
            .iter()
            .position(|h| h.trim() == "y")
            .ok_or_else(|| Error::Parse("missing response column `y`".into()))?;
        let mut z_cols = Vec::new();
        for (idx, h) in headers.iter().enumerate() {
            let h = h.trim();
            if idx == y_col {
                continue;
            }
            let k: usize = h
                .strip_prefix('z')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse(format!("unexpected column `{h}`")))?;
            z_cols.push((k, idx));
        }
        z_cols.sort_unstable();
        for (pos, (k, _)) in z_cols.iter().enumerate() {
            if *k != pos + 1 {
                return Err(Error::Parse(format!("feature columns must be z1..zd, found z{k}")));
            }
        }
        let d = z_cols.len();
        let mut ys = Vec::new();
        let mut zs = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != headers.len() {
                return Err(Error::Parse(format!("row {} has {} fields", line + 1, rec.len())));
            }
            let parse = |s: &str| -> Result<f64> {
                let s = s.trim();
                if s.is_empty() {
                    return Err(Error::Parse(format!("row {} has a missing field", line + 1)));
                }
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: `{s}`: {e}", line + 1)))
            };
            ys.push(parse(&rec[y_col])?);
            for &(_, idx) in &z_cols {
                zs.push(parse(&rec[idx])?);
            }
        }
        let n = ys.len();
        let features = DMatrix::from_row_slice(n, d, &zs);
        let mut ds = Dataset::new(features, DVector::from_vec(ys))?;
        ds.names = Some((1..=d).map(|k| format!("z{k}")).collect());
        Ok(ds)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.d()).map(|k| format!("z{k}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![format_real(self.response[i])];
            rec.extend(self.features.row(i).iter().map(|v| format_real(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest decimal that round-trips to the same `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:?}")
}

/// Reports every structural problem; an empty list means the dataset is usable.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if ds.features.nrows() != ds.response.len() {
        out.push(Violation::RowMismatch {
            features: ds.features.nrows(),
            response: ds.response.len(),
        });
    }
    for row in 0..ds.features.nrows() {
        for col in 0..ds.features.ncols() {
            if !ds.features[(row, col)].is_finite() {
                out.push(Violation::NonFiniteFeature { row, col });
            }
        }
    }
    for (row, y) in ds.response.iter().enumerate() {
        if !y.is_finite() {
            out.push(Violation::NonFiniteResponse { row });
        }
    }
    if let Some(names) = &ds.names {
        if names.len() != ds.features.ncols() {
            out.push(Violation::NameCount {
                names: names.len(),
                columns: ds.features.ncols(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    /// Requires `folds | n`; fold `v` is `{n v / V, .., n (v+1) / V - 1}`.
    Strict,
    /// Contiguous folds of size `floor(n/V)` or `ceil(n/V)`, larger ones first.
    Balanced,
}

/// Partition of `0..n` into `V` contiguous evaluation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldPlan {
    pub n: usize,
    pub folds: usize,
    pub fold_of: Vec<usize>,
    pub index_sets: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Training complement of fold `v` in ascending order.
    pub fn training_indices(&self, v: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.fold_of[i] != v).collect()
    }

    pub fn fold_size(&self, v: usize) -> usize {
        self.index_sets[v].len()
    }

    /// Training size `n (1 - 1/V)` for equal folds.
    pub fn training_size(&self, v: usize) -> usize {
        self.n - self.fold_size(v)
    }
}

pub fn make_folds(n: usize, folds: usize, mode: FoldMode) -> Result<FoldPlan> {
    if folds < 2 {
        return Err(Error::Domain(format!("need at least 2 folds, got {folds}")));
    }
    if n < folds {
        return Err(Error::Domain(format!("{n} samples cannot fill {folds} folds")));
    }
    let sizes: Vec<usize> = match mode {
        FoldMode::Strict => {
            if n % folds != 0 {
                return Err(Error::Divisibility { n, folds });
            }
            vec![n / folds; folds]
        }
        FoldMode::Balanced => {
            let (base, extra) = (n / folds, n % folds);
            (0..folds).map(|v| base + usize::from(v < extra)).collect()
        }
    };
    let mut fold_of = Vec::with_capacity(n);
    let mut index_sets = Vec::with_capacity(folds);
    let mut start = 0;
    for (v, &size) in sizes.iter().enumerate() {
        index_sets.push((start..start + size).collect());
        fold_of.extend(std::iter::repeat_n(v, size));
        start += size;
    }
    Ok(FoldPlan {
        n,
        folds,
        fold_of,
        index_sets,
    })
}

/// Per-point loss `rho(y, yhat)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Squared,
    /// Misclassification of the label `y` by thresholding the prediction at 0.5.
    ZeroOne,
    Absolute,
}

impl LossKind {
    pub fn eval(self, y: f64, yhat: f64) -> f64 {
        match self {
            LossKind::Squared => (y - yhat) * (y - yhat),
            LossKind::ZeroOne => {
                let label = if yhat >= 0.5 { 1.0 } else { 0.0 };
                if (y - label).abs() < 0.5 {
                    0.0
                } else {
                    1.0
                }
            }
            LossKind::Absolute => (y - yhat).abs(),
        }
    }
}

/// Model family and hyperparameters for one candidate `r`.
#[derive(Debug, Clone, PartialEq)]
pub enum Learner {
    Ols,
    Ridge {
        lambda: f64,
    },
    Lasso {
        lambda: f64,
        tol: f64,
        max_iter: usize,
    },
    /// Greedy forward selection stopped after `steps` variables.
    Forward {
        steps: usize,
    },
    Sgd(SgdConfig),
    Series(SeriesConfig),
    /// Coefficients fixed in advance; the fit ignores its training data.
    Fixed {
        coefficients: Vec<f64>,
    },
}

impl Learner {
    pub fn lasso(lambda: f64) -> Self {
        Learner::Lasso {
            lambda,
            tol: crate::learners::LASSO_DEFAULT_TOL,
            max_iter: crate::learners::LASSO_DEFAULT_MAX_ITER,
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Learner::Ols => Family::Ols,
            Learner::Ridge { .. } => Family::Ridge,
            Learner::Lasso { .. } => Family::Lasso,
            Learner::Forward { .. } => Family::Forward,
            Learner::Sgd(_) => Family::Sgd,
            Learner::Series(_) => Family::Series,
            Learner::Fixed { .. } => Family::Fixed,
        }
    }

    /// Hyperparameter checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        match self {
            Learner::Ols | Learner::Forward { .. } => Ok(()),
            Learner::Ridge { lambda } if *lambda >= 0.0 => Ok(()),
            Learner::Lasso {
                lambda, tol, max_iter,
            } if *lambda >= 0.0 && *tol > 0.0 && *max_iter > 0 => Ok(()),
            Learner::Sgd(cfg) => cfg.validate(),
            Learner::Series(cfg) if cfg.truncation >= 1 => Ok(()),
            Learner::Fixed { coefficients } if coefficients.iter().all(|c| c.is_finite()) => Ok(()),
            other => Err(Error::Config(format!("invalid hyperparameters for {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ols,
    Ridge,
    Lasso,
    Forward,
    Sgd,
    Series,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSpec {
    pub learner: Learner,
    pub loss: LossKind,
    pub label: String,
}

impl LearnerSpec {
    pub fn new(learner: Learner, label: impl Into<String>) -> Self {
        Self {
            learner,
            loss: LossKind::Squared,
            label: label.into(),
        }
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logistic,
}

/// Linear predictor `z' coef` (intercept always 0), possibly behind a link.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub family: Family,
    /// Length `d`; zero on unselected coordinates.
    pub coefficients: DVector<f64>,
    pub intercept: f64,
    pub link: Link,
    pub support: Vec<usize>,
    pub iterations: usize,
}

impl FittedModel {
    pub fn linear(family: Family, coefficients: DVector<f64>) -> Self {
        let support = coefficients
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(j, _)| j)
            .collect();
        Self {
            family,
            coefficients,
            intercept: 0.0,
            link: Link::Identity,
            support,
            iterations: 0,
        }
    }

    pub fn predict_row(&self, features: &DMatrix<f64>, row: usize) -> f64 {
        let eta = self.intercept + features.row(row).dot(&self.coefficients.transpose());
        self.apply_link(eta)
    }

    pub fn predict(&self, z: &DVector<f64>) -> f64 {
        self.apply_link(self.intercept + z.dot(&self.coefficients))
    }

    fn apply_link(&self, eta: f64) -> f64 {
        match self.link {
            Link::Identity => eta,
            Link::Logistic => 1.0 / (1.0 + (-eta).exp()),
        }
    }
}

/// Held-out losses: entry `(i, r)` is model `r`, fitted without fold
/// `fold_of[i]`, evaluated at sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    pub values: DMatrix<f64>,
    pub plan: FoldPlan,
    pub model_labels: Vec<String>,
}

impl LossMatrix {
    pub fn new(values: DMatrix<f64>, plan: FoldPlan, model_labels: Vec<String>) -> Result<Self> {
        if values.nrows() != plan.n {
            return Err(Error::Dimension(format!(
                "loss matrix has {} rows, fold plan has n = {}",
                values.nrows(),
                plan.n
            )));
        }
        if model_labels.len() != values.ncols() {
            return Err(Error::Dimension(format!(
                "{} labels for {} models",
                model_labels.len(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite loss".into()));
        }
        Ok(Self {
            values,
            plan,
            model_labels,
        })
    }

    /// Unlabeled convenience constructor (`m1..mp`).
    pub fn from_values(values: DMatrix<f64>, plan: FoldPlan) -> Result<Self> {
        let labels = (1..=values.ncols()).map(|r| format!("m{r}")).collect();
        Self::new(values, plan, labels)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }
}
