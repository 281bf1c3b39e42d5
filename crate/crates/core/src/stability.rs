//! Empirical stability diagnostics: first- and second-order differences of
//! SGD iterates and of held-out losses under sample replacement, and
//! log-log scaling fits of their magnitudes in `n`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Dataset, FoldPlan, LearnerSpec, Sample};
use crate::error::{Error, Result};
use crate::learners::{self, sgd_pass, SeriesConfig, SgdConfig};
use crate::simgen::{normal, SeriesGen, Substream};

/// SGD on a fixed dataset, run in row order.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdProblem {
    pub data: Dataset,
    pub config: SgdConfig,
}

impl SgdProblem {
    fn run(&self, replacements: &[(usize, &Sample)]) -> DVector<f64> {
        sgd_pass(&self.data.features, &self.data.response, &self.config, replacements)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.data.n() {
            return Err(Error::IndexOutOfRange { index: i, limit: self.data.n() });
        }
        Ok(())
    }
}

/// `|theta(X) - theta(X^i)|`.
///
/// Refuses configurations where the step/ratio precondition of the
/// deterministic first-order bound fails.
pub fn param_first_diff(problem: &SgdProblem, i: usize, x: &Sample) -> Result<f64> {
    problem.config.validate()?;
    problem.check_index(i)?;
    let n = problem.data.n();
    if !problem.config.ratio_condition(n) {
        return Err(Error::Config(format!(
            "gamma/beta = {:.4} is below the ratio required at n = {n}",
            problem.config.strong_convexity / problem.config.smoothness
        )));
    }
    Ok((problem.run(&[]) - problem.run(&[(i, x)])).norm())
}

/// `|theta(X) - theta(X^i) - theta(X^j) + theta(X^{ij})|`.
pub fn param_second_diff(problem: &SgdProblem, i: usize, j: usize, xi: &Sample, xj: &Sample) -> Result<f64> {
    problem.config.validate()?;
    problem.check_index(i)?;
    problem.check_index(j)?;
    if i == j {
        return Err(Error::Domain(format!("second difference needs distinct indices, got {i} twice")));
    }
    let base = problem.run(&[]);
    let ri = problem.run(&[(i, xi)]);
    let rj = problem.run(&[(j, xj)]);
    let rij = problem.run(&[(i, xi), (j, xj)]);
    Ok((base - ri - rj + rij).norm())
}

/// `loss_r(x0; X_{-v}) - loss_r(x0; X^i_{-v})` for every model, both sides
/// freshly fitted on the training complement of `fold`.
pub fn loss_first_diff(
    ds: &Dataset,
    specs: &[LearnerSpec],
    plan: &FoldPlan,
    fold: usize,
    x0: &Sample,
    i: usize,
    x: &Sample,
) -> Result<Vec<f64>> {
    if fold >= plan.folds {
        return Err(Error::IndexOutOfRange { index: fold, limit: plan.folds });
    }
    if i >= ds.n() {
        return Err(Error::IndexOutOfRange { index: i, limit: ds.n() });
    }
    if plan.fold_of[i] == fold {
        return Err(Error::Domain(format!("sample {i} lies in evaluation fold {fold}")));
    }
    let rows = plan.training_indices(fold);
    let train = ds.select_rows(&rows);
    let modified = ds.with_replaced(i, x)?.select_rows(&rows);
    specs
        .iter()
        .map(|spec| {
            let a = learners::fit(&spec.learner, &train.features, &train.response)?;
            let b = learners::fit(&spec.learner, &modified.features, &modified.response)?;
            Ok(spec.loss.eval(x0.y, a.predict(&x0.z)) - spec.loss.eval(x0.y, b.predict(&x0.z)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "q")]
pub enum Statistic {
    Max,
    Quantile(f64),
}

impl Statistic {
    pub fn median() -> Self {
        Statistic::Quantile(0.5)
    }

    pub fn eval(self, samples: &[f64]) -> f64 {
        match self {
            Statistic::Max => samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Statistic::Quantile(q) => quantile(samples, q),
        }
    }
}

/// Linear-interpolation sample quantile.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return f64::NAN;
    }
    let h = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
}

pub const MIN_GRID_POINTS: usize = 3;
pub const MIN_SAMPLES: usize = 30;

/// Least-squares fit of `log(statistic)` on `log(n)`.
pub fn scaling_fit(grid: &[usize], samples: &[Vec<f64>], statistic: Statistic) -> Result<ScalingFit> {
    if grid.len() != samples.len() {
        return Err(Error::Dimension(format!("{} grid points, {} sample sets", grid.len(), samples.len())));
    }
    if grid.len() < MIN_GRID_POINTS {
        return Err(Error::Domain(format!("need at least {MIN_GRID_POINTS} grid points, got {}", grid.len())));
    }
    if let Some(s) = samples.iter().find(|s| s.len() < MIN_SAMPLES) {
        return Err(Error::Domain(format!("need at least {MIN_SAMPLES} samples per grid point, got {}", s.len())));
    }
    let values: Vec<f64> = samples.iter().map(|s| statistic.eval(s)).collect();
    log_log_fit(grid, &values)
}

/// Least-squares fit of `log(value)` on `log(n)` from one value per point.
pub fn log_log_fit(grid: &[usize], values: &[f64]) -> Result<ScalingFit> {
    if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::DegenerateFit(format!("statistic {v} has no logarithm")));
    }
    let x: Vec<f64> = grid.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("grid has a single distinct n".into()));
    }
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let stderr = if x.len() > 2 { (rss / (k - 2.0) / sxx).sqrt() } else { f64::NAN };
    Ok(ScalingFit { slope, intercept, stderr })
}

/// Scales any `(y, z)` with `|(y, z)| > radius` back onto the sphere.
pub fn clip_to_ball(ds: &mut Dataset, radius: f64) {
    for i in 0..ds.n() {
        let norm = (ds.response[i].powi(2) + ds.features.row(i).norm_squared()).sqrt();
        if norm > radius {
            let c = radius / norm;
            ds.response[i] *= c;
            let mut row = ds.features.row_mut(i);
            row *= c;
        }
    }
}

/// Linear model `y = z'theta + eps` with `z ~ N(0, I/d)` clipped into the
/// `radius` ball, so the SGD smoothness constants apply.
pub fn bounded_linear_data<R: Rng + ?Sized>(n: usize, theta: &DVector<f64>, noise: f64, radius: f64, rng: &mut R) -> Dataset {
    let d = theta.len();
    let scale = 1.0 / (d as f64).sqrt();
    let features = DMatrix::from_fn(n, d, |_, _| normal(rng) * scale);
    let response = DVector::from_fn(n, |i, _| features.row(i).dot(&theta.transpose()) + noise * normal(rng));
    let mut ds = Dataset { features, response, names: None };
    clip_to_ball(&mut ds, radius);
    ds
}

/// Which training indices are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexWindow {
    /// Uniform over all `n` indices.
    Uniform,
    /// Uniform over the last `ceil(n^a)` steps, where the step size is
    /// `~ n^{-a}` and perturbations have not yet been contracted away.
    Tail,
}

impl IndexWindow {
    fn range(self, n: usize, a: f64) -> (usize, usize) {
        match self {
            IndexWindow::Uniform => (0, n),
            IndexWindow::Tail => {
                let w = ((n as f64).powf(a).ceil() as usize).clamp(2, n);
                (n - w, n)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    SgdFirst,
    SgdSecond,
    DiffLoss,
}

/// One replication at one `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub n: usize,
    pub trial: usize,
    pub i: usize,
    pub j: Option<usize>,
    /// Parameter or loss first difference (absolute value).
    pub first: Option<f64>,
    pub second: Option<f64>,
    /// Loss difference between the two models at the evaluation point.
    pub value: Option<f64>,
    pub bound: Option<f64>,
    pub violated: bool,
}

/// Per-`n` aggregates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub n: usize,
    pub trials: usize,
    pub median_first: Option<f64>,
    pub median_second: Option<f64>,
    pub max_first: Option<f64>,
    pub bound: Option<f64>,
    pub violations: usize,
    /// Monte-Carlo `Var(loss_r - loss_s)`.
    pub variance: Option<f64>,
    pub variance_lower_bound: Option<f64>,
    /// `sqrt(n) median|first| / sqrt(Var)`.
    pub first_ratio: Option<f64>,
    /// `n median|second| / sqrt(Var)`.
    pub second_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedFit {
    pub name: String,
    #[serde(flatten)]
    pub fit: ScalingFit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub kind: ProbeKind,
    pub grid: Vec<usize>,
    pub rows: Vec<TrialRow>,
    pub summaries: Vec<GridSummary>,
    pub fits: Vec<NamedFit>,
    pub violations: usize,
    pub flags: Vec<String>,
}

impl StabilityReport {
    pub fn fit(&self, name: &str) -> Option<&ScalingFit> {
        self.fits.iter().find(|f| f.name == name).map(|f| &f.fit)
    }

    pub fn rows_at(&self, n: usize) -> impl Iterator<Item = &TrialRow> {
        self.rows.iter().filter(move |r| r.n == n)
    }
}

/// SGD campaign settings; data come from [`bounded_linear_data`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SgdCampaign {
    pub config: SgdConfig,
    pub d: usize,
    pub noise: f64,
    pub grid: Vec<usize>,
    pub trials: usize,
    pub window: IndexWindow,
    #[serde(skip)]
    pub stream: Substream,
}

fn campaign_theta(d: usize) -> DVector<f64> {
    DVector::from_element(d, 0.5 / (d as f64).sqrt())
}

fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

fn sgd_trial(c: &SgdCampaign, n: usize, trial: usize, second: bool) -> Result<TrialRow> {
    let mut rng = c.stream.child("trial", &[n as u64, trial as u64]).rng();
    let theta = campaign_theta(c.d);
    let rx = c.config.radius_x;
    let data = bounded_linear_data(n, &theta, c.noise, rx, &mut rng);
    let fresh = bounded_linear_data(2, &theta, c.noise, rx, &mut rng);
    let problem = SgdProblem { data, config: c.config };
    let (lo, hi) = c.window.range(n, c.config.step_exponent);
    let i = rng.random_range(lo..hi);
    if !second {
        let first = param_first_diff(&problem, i, &fresh.sample(0))?;
        let bound = c.config.first_order_bound(n);
        return Ok(TrialRow {
            n,
            trial,
            i,
            j: None,
            first: Some(first),
            second: None,
            value: None,
            bound: Some(bound),
            violated: first > bound,
        });
    }
    let j = loop {
        let j = rng.random_range(lo..hi);
        if j != i {
            break j;
        }
    };
    let s = param_second_diff(&problem, i, j, &fresh.sample(0), &fresh.sample(1))?;
    Ok(TrialRow {
        n,
        trial,
        i,
        j: Some(j),
        first: None,
        second: Some(s),
        value: None,
        bound: None,
        violated: false,
    })
}

fn run_grid<F>(grid: &[usize], trials: usize, f: F) -> Result<Vec<TrialRow>>
where
    F: Fn(usize, usize) -> Result<TrialRow> + Sync,
{
    let jobs: Vec<(usize, usize)> = grid.iter().flat_map(|&n| (0..trials).map(move |t| (n, t))).collect();
    jobs.par_iter().map(|&(n, t)| f(n, t)).collect()
}

fn check_campaign(grid: &[usize], trials: usize) -> Result<()> {
    if grid.is_empty() || trials == 0 {
        return Err(Error::Config("stability campaigns need a grid and at least one trial".into()));
    }
    if grid.iter().any(|&n| n < 2) {
        return Err(Error::Config("every grid size must be at least 2".into()));
    }
    Ok(())
}

/// Fits slopes on the median statistic when the grid and trial counts allow.
fn fit_if_possible(grid: &[usize], rows: &[TrialRow], name: &str, pick: impl Fn(&TrialRow) -> Option<f64>) -> Option<NamedFit> {
    let samples: Vec<Vec<f64>> = grid
        .iter()
        .map(|&n| rows.iter().filter(|r| r.n == n).filter_map(&pick).collect())
        .collect();
    scaling_fit(grid, &samples, Statistic::median())
        .ok()
        .map(|fit| NamedFit { name: name.into(), fit })
}

/// First-order SGD parameter stability against the deterministic bound.
pub fn sgd_first_order_campaign(c: &SgdCampaign) -> Result<StabilityReport> {
    check_campaign(&c.grid, c.trials)?;
    let rows = run_grid(&c.grid, c.trials, |n, t| sgd_trial(c, n, t, false))?;
    let summaries: Vec<GridSummary> = c
        .grid
        .iter()
        .map(|&n| {
            let firsts: Vec<f64> = rows.iter().filter(|r| r.n == n).filter_map(|r| r.first).collect();
            GridSummary {
                n,
                trials: firsts.len(),
                median_first: Some(median(&firsts)),
                median_second: None,
                max_first: Some(firsts.iter().copied().fold(0.0, f64::max)),
                bound: Some(c.config.first_order_bound(n)),
                violations: rows.iter().filter(|r| r.n == n && r.violated).count(),
                variance: None,
                variance_lower_bound: None,
                first_ratio: None,
                second_ratio: None,
            }
        })
        .collect();
    let fits = fit_if_possible(&c.grid, &rows, "first", |r| r.first).into_iter().collect();
    Ok(StabilityReport {
        kind: ProbeKind::SgdFirst,
        grid: c.grid.clone(),
        violations: rows.iter().filter(|r| r.violated).count(),
        rows,
        summaries,
        fits,
        flags: Vec::new(),
    })
}

/// Second-order SGD parameter stability; no bound, only the scaling slope.
pub fn sgd_second_order_campaign(c: &SgdCampaign) -> Result<StabilityReport> {
    check_campaign(&c.grid, c.trials)?;
    let rows = run_grid(&c.grid, c.trials, |n, t| sgd_trial(c, n, t, true))?;
    let summaries = c
        .grid
        .iter()
        .map(|&n| {
            let seconds: Vec<f64> = rows.iter().filter(|r| r.n == n).filter_map(|r| r.second).collect();
            GridSummary {
                n,
                trials: seconds.len(),
                median_first: None,
                median_second: Some(median(&seconds)),
                max_first: None,
                bound: None,
                violations: 0,
                variance: None,
                variance_lower_bound: None,
                first_ratio: None,
                second_ratio: None,
            }
        })
        .collect();
    let fits = fit_if_possible(&c.grid, &rows, "second", |r| r.second).into_iter().collect();
    Ok(StabilityReport {
        kind: ProbeKind::SgdSecond,
        grid: c.grid.clone(),
        rows,
        summaries,
        fits,
        violations: 0,
        flags: Vec::new(),
    })
}

/// Settings for the loss-difference probe between two truncated series
/// estimators with `small <= large` terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffLossProbe {
    pub generator: SeriesGen,
    pub small: usize,
    pub large: usize,
    pub grid: Vec<usize>,
    pub trials: usize,
    #[serde(skip)]
    pub stream: Substream,
}

/// `4 sigma^2 (sum_{small<j<=large} beta_j^2 + (large - small) sigma^2 / n)`.
pub fn diff_loss_variance_lower_bound(gen: &SeriesGen, small: usize, large: usize, n: usize) -> f64 {
    let beta = gen.beta();
    let s2 = gen.sigma_eps * gen.sigma_eps;
    let signal: f64 = (small..large).map(|j| beta[j] * beta[j]).sum();
    4.0 * s2 * (signal + (large - small) as f64 * s2 / n as f64)
}

/// `loss_small(x0) - loss_large(x0)` under squared loss.
fn series_loss_gap(ds: &Dataset, small: usize, large: usize, x0: &Sample) -> Result<f64> {
    let a = learners::fit_series(&ds.features, &ds.response, &SeriesConfig { truncation: small })?;
    let b = learners::fit_series(&ds.features, &ds.response, &SeriesConfig { truncation: large })?;
    Ok((x0.y - a.predict(&x0.z)).powi(2) - (x0.y - b.predict(&x0.z)).powi(2))
}

fn diff_loss_trial(p: &DiffLossProbe, n: usize, trial: usize) -> Result<TrialRow> {
    let mut rng = p.stream.child("trial", &[n as u64, trial as u64]).rng();
    let data = p.generator.draw(n, &mut rng);
    let extra = p.generator.draw(3, &mut rng);
    let (x0, xi, xj) = (extra.sample(0), extra.sample(1), extra.sample(2));
    let i = rng.random_range(0..n);
    let j = loop {
        let j = rng.random_range(0..n);
        if j != i {
            break j;
        }
    };
    let di = data.with_replaced(i, &xi)?;
    let dj = data.with_replaced(j, &xj)?;
    let dij = di.with_replaced(j, &xj)?;
    let g = |ds: &Dataset| series_loss_gap(ds, p.small, p.large, &x0);
    let (base, gi, gj, gij) = (g(&data)?, g(&di)?, g(&dj)?, g(&dij)?);
    Ok(TrialRow {
        n,
        trial,
        i,
        j: Some(j),
        first: Some((base - gi).abs()),
        second: Some((base - gi - gj + gij).abs()),
        value: Some(base),
        bound: None,
        violated: false,
    })
}

fn sample_variance(v: &[f64]) -> f64 {
    let k = v.len() as f64;
    let m = v.iter().sum::<f64>() / k;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0)
}

/// Loss-difference stability between nested series estimators, with the
/// regime indicators `large * small^{a/2} / n` and `/ sqrt(n)`.
///
/// Out-of-regime configurations are flagged but still run.
pub fn diff_loss_stability_probe(p: &DiffLossProbe) -> Result<StabilityReport> {
    check_campaign(&p.grid, p.trials)?;
    p.generator.validate()?;
    if p.small == 0 || p.small > p.large || p.large > p.generator.j_max {
        return Err(Error::Config(format!(
            "need 1 <= small <= large <= {}, got {} and {}",
            p.generator.j_max, p.small, p.large
        )));
    }
    if p.trials < 2 {
        return Err(Error::Config("the probe needs at least two trials per n".into()));
    }
    let rows = run_grid(&p.grid, p.trials, |n, t| diff_loss_trial(p, n, t))?;
    let a = p.generator.decay;
    let load = p.large as f64 * (p.small as f64).powf(a / 2.0);
    let mut flags = Vec::new();
    if p.small == p.large {
        flags.push("identical models: all differences vanish".to_string());
    }
    let summaries = p
        .grid
        .iter()
        .map(|&n| {
            let at: Vec<&TrialRow> = rows.iter().filter(|r| r.n == n).collect();
            let firsts: Vec<f64> = at.iter().filter_map(|r| r.first).collect();
            let seconds: Vec<f64> = at.iter().filter_map(|r| r.second).collect();
            let values: Vec<f64> = at.iter().filter_map(|r| r.value).collect();
            let var = sample_variance(&values);
            let sd = var.sqrt();
            let nf = n as f64;
            if load / nf >= 1.0 {
                flags.push(format!("n={n}: large*small^(a/2)/n = {:.3} outside regime (a)", load / nf));
            }
            if load / nf.sqrt() >= 1.0 {
                flags.push(format!("n={n}: large*small^(a/2)/sqrt(n) = {:.3} outside regime (b)", load / nf.sqrt()));
            }
            let ratio = |x: f64, scale: f64| if sd > 0.0 { Some(scale * x / sd) } else { Some(0.0) };
            GridSummary {
                n,
                trials: at.len(),
                median_first: Some(median(&firsts)),
                median_second: Some(median(&seconds)),
                max_first: Some(firsts.iter().copied().fold(0.0, f64::max)),
                bound: None,
                violations: 0,
                variance: Some(var),
                variance_lower_bound: Some(diff_loss_variance_lower_bound(&p.generator, p.small, p.large, n)),
                first_ratio: ratio(median(&firsts), nf.sqrt()),
                second_ratio: ratio(median(&seconds), nf),
            }
        })
        .collect();
    let mut fits: Vec<NamedFit> = Vec::new();
    fits.extend(fit_if_possible(&p.grid, &rows, "first", |r| r.first));
    fits.extend(fit_if_possible(&p.grid, &rows, "second", |r| r.second));
    Ok(StabilityReport {
        kind: ProbeKind::DiffLoss,
        grid: p.grid.clone(),
        rows,
        summaries,
        fits,
        violations: 0,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_folds, FoldMode, Learner};
    use crate::simgen::derive_substream;
    use approx::assert_relative_eq;

    fn problem(n: usize, seed: u64, project: bool) -> SgdProblem {
        let mut rng = derive_substream(seed, "sgd", &[]).rng();
        let theta = campaign_theta(3);
        let mut config = SgdConfig::ridge(0.5, 0.6, 1.0, 1.0);
        config.project = project;
        SgdProblem {
            data: bounded_linear_data(n, &theta, 0.3, 1.0, &mut rng),
            config,
        }
    }

    #[test]
    fn identity_replacement_vanishes() {
        let p = problem(4096, 1, true);
        let xi = p.data.sample(7);
        assert_eq!(param_first_diff(&p, 7, &xi).unwrap(), 0.0);
        let xj = p.data.sample(9);
        let other = Sample { z: DVector::from_element(3, 0.1), y: 0.2 };
        assert_eq!(param_second_diff(&p, 7, 9, &xi, &xj).unwrap(), 0.0);
        // replacing j by itself telescopes to zero
        assert_eq!(param_second_diff(&p, 7, 9, &other, &xj).unwrap(), 0.0);
        assert!(param_second_diff(&p, 7, 7, &xi, &xj).is_err());
    }

    #[test]
    fn precondition_refused() {
        let mut p = problem(256, 2, true);
        p.config = SgdConfig::ridge(0.01, 0.6, 1.0, 1.0);
        let x = p.data.sample(0);
        assert!(matches!(param_first_diff(&p, 0, &x), Err(Error::Config(_))));
    }

    #[test]
    fn last_step_unrolls() {
        let p = problem(4096, 3, false);
        let n = p.data.n();
        let x = Sample { z: DVector::from_vec(vec![0.3, -0.2, 0.1]), y: -0.4 };
        let prev = sgd_pass(
            &p.data.features.rows(0, n - 1).into_owned(),
            &p.data.response.rows(0, n - 1).into_owned(),
            &p.config,
            &[],
        );
        let last = p.data.sample(n - 1);
        let want = p.config.step(n) * (p.config.gradient(&prev, &last.z, last.y) - p.config.gradient(&prev, &x.z, x.y)).norm();
        assert_relative_eq!(param_first_diff(&p, n - 1, &x).unwrap(), want, max_relative = 1e-10);
    }

    #[test]
    fn first_order_bound_holds() {
        for seed in 0..5 {
            let p = problem(4096, seed, true);
            let mut rng = derive_substream(seed, "x", &[]).rng();
            let x = bounded_linear_data(1, &campaign_theta(3), 0.3, 1.0, &mut rng).sample(0);
            let i = rng.random_range(0..4096);
            assert!(param_first_diff(&p, i, &x).unwrap() <= p.config.first_order_bound(4096));
        }
    }

    #[test]
    fn loss_first_diff_cases() {
        let mut rng = derive_substream(4, "loss", &[]).rng();
        let ds = bounded_linear_data(20, &campaign_theta(2), 0.3, 2.0, &mut rng);
        let plan = make_folds(20, 4, FoldMode::Strict).unwrap();
        let specs = vec![
            LearnerSpec::new(Learner::Fixed { coefficients: vec![0.2, 0.1] }, "fixed"),
            LearnerSpec::new(Learner::Ridge { lambda: 0.1 }, "ridge"),
        ];
        let x0 = ds.sample(0);
        let x = Sample { z: DVector::from_vec(vec![1.0, -1.0]), y: 3.0 };
        let d = loss_first_diff(&ds, &specs, &plan, 0, &x0, 10, &x).unwrap();
        assert_eq!(d[0], 0.0);
        assert!(d[1].abs() > 0.0);
        assert_eq!(loss_first_diff(&ds, &specs, &plan, 0, &x0, 10, &ds.sample(10)).unwrap(), vec![0.0, 0.0]);
        assert!(loss_first_diff(&ds, &specs, &plan, 0, &x0, 2, &x).is_err());
    }

    #[test]
    fn ridge_hand_instance() {
        // one feature, three training points, ridge (z'z/n + lam)^{-1} z'y/n
        let ds = Dataset::new(
            DMatrix::from_column_slice(4, 1, &[9.0, 1.0, 2.0, 3.0]),
            DVector::from_vec(vec![9.0, 1.0, 1.0, 4.0]),
        )
        .unwrap();
        let plan = make_folds(4, 4, FoldMode::Strict).unwrap();
        let specs = vec![LearnerSpec::new(Learner::Ridge { lambda: 0.5 }, "ridge")];
        let x0 = Sample { z: DVector::from_vec(vec![2.0]), y: 1.0 };
        let x = Sample { z: DVector::from_vec(vec![-1.0]), y: 2.0 };
        let fit = |zs: [f64; 3], ys: [f64; 3]| {
            let zz: f64 = zs.iter().map(|z| z * z).sum::<f64>() / 3.0;
            let zy: f64 = zs.iter().zip(ys).map(|(z, y)| z * y).sum::<f64>() / 3.0;
            zy / (zz + 0.5)
        };
        let b0 = fit([1.0, 2.0, 3.0], [1.0, 1.0, 4.0]);
        let b1 = fit([1.0, -1.0, 3.0], [1.0, 2.0, 4.0]);
        let want = (1.0 - 2.0 * b0).powi(2) - (1.0 - 2.0 * b1).powi(2);
        let got = loss_first_diff(&ds, &specs, &plan, 0, &x0, 2, &x).unwrap();
        assert_relative_eq!(got[0], want, epsilon = 1e-12);
    }

    #[test]
    fn exact_power_laws() {
        let grid = [100usize, 400, 1600, 6400];
        for (c, e) in [(2.0, -0.5), (0.7, -1.5)] {
            let samples: Vec<Vec<f64>> = grid.iter().map(|&n| vec![c * (n as f64).powf(e); 30]).collect();
            for st in [Statistic::Max, Statistic::median(), Statistic::Quantile(0.9)] {
                let f = scaling_fit(&grid, &samples, st).unwrap();
                assert!((f.slope - e).abs() < 1e-10);
                assert_relative_eq!(f.intercept.exp(), c, max_relative = 1e-9);
            }
        }
        let zeros = vec![vec![0.0; 30]; 4];
        assert!(matches!(scaling_fit(&grid, &zeros, Statistic::Max), Err(Error::DegenerateFit(_))));
        assert!(scaling_fit(&grid[..2], &zeros[..2], Statistic::Max).is_err());
        assert!(scaling_fit(&grid, &vec![vec![1.0; 29]; 4], Statistic::Max).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
        assert_eq!(quantile(&[1.0, 2.0, 5.0], 1.0), 5.0);
    }

    fn series_probe(small: usize, large: usize, grid: Vec<usize>, trials: usize) -> DiffLossProbe {
        DiffLossProbe {
            generator: SeriesGen { n: 0, j_max: 40, decay: 1.0, sigma_eps: 1.0, seed: 0 },
            small,
            large,
            grid,
            trials,
            stream: derive_substream(9, "probe", &[]),
        }
    }

    #[test]
    fn equal_truncations_vanish() {
        let rep = diff_loss_stability_probe(&series_probe(4, 4, vec![50, 100, 200], 30)).unwrap();
        assert!(rep.rows.iter().all(|r| r.first == Some(0.0) && r.second == Some(0.0) && r.value == Some(0.0)));
        assert!(!rep.flags.is_empty());
    }

    #[test]
    fn probe_diagnostics() {
        let rep = diff_loss_stability_probe(&series_probe(2, 8, vec![200, 800, 3200], 200)).unwrap();
        for s in &rep.summaries {
            let ratio = s.variance.unwrap() / s.variance_lower_bound.unwrap();
            assert!((0.25..=4.0).contains(&ratio), "variance ratio {ratio} at n={}", s.n);
        }
        let r: Vec<f64> = rep.summaries.iter().map(|s| s.first_ratio.unwrap()).collect();
        assert!(r[2] <= r[0], "first ratios {r:?}");
        assert!(rep.fit("first").unwrap().slope < 0.0);
    }
}
