//! One replication of each experiment kind: data, learner bank, cross-validation,
//! inference, and the CSV row(s) that record the outcome.

use std::time::Instant;

use cvconf_core::covariance::aggregate_covariance;
use cvconf_core::cv::{average_fitted_risk_oracle, cross_validate, cv_risk};
use cvconf_core::data::{make_folds, Dataset, FoldMode, Learner, LearnerSpec};
use cvconf_core::inference::{
    band_covers, band_covers_each, best_candidate, cvc_set, naive_set, pointwise_band, simultaneous_band, CvcQuantiles,
    QuantileSource,
};
use cvconf_core::learners::{lasso_grid, lasso_log_grid, SeriesConfig, SgdConfig};
use cvconf_core::simgen::{derive_substream, gen_series, gen_sparse_linear, GeneratorTruth, SeriesGen, SparseLinearGen};
use cvconf_core::stability::bounded_linear_data;
use cvconf_core::{Error, Result};
use nalgebra::DVector;

use crate::config::{BankSpec, ExperimentConfig, ExperimentKind, FixedCoefficients, GeneratorSpec};

pub const BASE_COLUMNS: [&str; 7] = ["rep", "seed", "alpha", "covered", "size_naive", "size_cvc", "ms_elapsed"];

/// Seed of replication `rep` at sample size `n`.
pub fn replication_seed(master: u64, kind: ExperimentKind, n: usize, rep: usize) -> u64 {
    derive_substream(master, kind.tag(), &[n as u64, rep as u64]).id()
}

/// Draws `n` samples with the configured generator.
pub fn generate(spec: &GeneratorSpec, n: usize, seed: u64) -> Result<(Dataset, Option<GeneratorTruth>)> {
    match *spec {
        GeneratorSpec::SparseLinear { d, s, nu } => {
            let (ds, truth) = gen_sparse_linear(&SparseLinearGen { n, d: d.resolve(n), s, nu, seed })?;
            Ok((ds, Some(truth)))
        }
        GeneratorSpec::Series { j_max, decay, sigma_eps } => {
            let (ds, truth) = gen_series(&SeriesGen { n, j_max, decay, sigma_eps, seed })?;
            Ok((ds, Some(truth)))
        }
        GeneratorSpec::Bounded { d, noise } => {
            let theta = DVector::from_element(d, 0.5 / (d as f64).sqrt());
            let mut rng = derive_substream(seed, "bounded", &[]).rng();
            Ok((bounded_linear_data(n, &theta, noise, 1.0, &mut rng), None))
        }
    }
}

/// Fresh samples from the same population (for hold-out sets).
pub fn generate_more(spec: &GeneratorSpec, n: usize, rows: usize, seed: u64) -> Result<Dataset> {
    let stream = derive_substream(seed, "holdout", &[]);
    let mut rng = stream.rng();
    Ok(match *spec {
        GeneratorSpec::SparseLinear { d, s, nu } => SparseLinearGen { n, d: d.resolve(n), s, nu, seed }.draw(rows, &mut rng),
        GeneratorSpec::Series { j_max, decay, sigma_eps } => SeriesGen { n, j_max, decay, sigma_eps, seed }.draw(rows, &mut rng),
        GeneratorSpec::Bounded { d, noise } => {
            let theta = DVector::from_element(d, 0.5 / (d as f64).sqrt());
            bounded_linear_data(rows, &theta, noise, 1.0, &mut rng)
        }
    })
}

/// Model labels of a bank, independent of the data.
pub fn bank_labels(spec: &BankSpec) -> Vec<String> {
    match spec {
        BankSpec::LassoLogGrid { count, .. } => (0..*count).map(|k| format!("lasso{k}")).collect(),
        BankSpec::LassoGrid => (0..10).map(|k| format!("lasso{k}")).collect(),
        BankSpec::Forward { steps, lasso } => {
            let mut labels: Vec<String> = steps.iter().map(|s| format!("fwd{s}")).collect();
            if let Some((count, _)) = lasso {
                labels.extend((0..*count).map(|k| format!("lasso{k}")));
            }
            labels
        }
        BankSpec::Ridge { lambdas } => (0..lambdas.len()).map(|k| format!("ridge{k}")).collect(),
        BankSpec::Fixed { coefficients } => (0..coefficients.len()).map(|k| format!("fixed{k}")).collect(),
        BankSpec::Sgd { .. } => vec!["sgd".into()],
        BankSpec::Series { truncations } => truncations.iter().map(|j| format!("series{j}")).collect(),
    }
}

/// Instantiates the bank on a dataset (penalty grids depend on the data).
pub fn build_bank(spec: &BankSpec, ds: &Dataset, truth: Option<&GeneratorTruth>, folds: usize) -> Result<Vec<LearnerSpec>> {
    let labels = bank_labels(spec);
    let learners: Vec<Learner> = match spec {
        BankSpec::LassoLogGrid { count, min_ratio } => lasso_log_grid(&ds.features, &ds.response, *count, *min_ratio)?
            .into_iter()
            .map(Learner::lasso)
            .collect(),
        BankSpec::LassoGrid => lasso_grid(&ds.features, &ds.response, folds)?.into_iter().map(Learner::lasso).collect(),
        BankSpec::Forward { steps, lasso } => {
            let mut out: Vec<Learner> = steps.iter().map(|&steps| Learner::Forward { steps }).collect();
            if let Some((count, ratio)) = lasso {
                out.extend(lasso_log_grid(&ds.features, &ds.response, *count, *ratio)?.into_iter().map(Learner::lasso));
            }
            out
        }
        BankSpec::Ridge { lambdas } => lambdas.iter().map(|&lambda| Learner::Ridge { lambda }).collect(),
        BankSpec::Fixed { coefficients } => coefficients
            .iter()
            .map(|c| match c {
                FixedCoefficients::Values(v) => Ok(Learner::Fixed { coefficients: v.clone() }),
                FixedCoefficients::Truth => match truth {
                    Some(GeneratorTruth::SparseLinear { beta, .. }) | Some(GeneratorTruth::Series { beta, .. }) => {
                        Ok(Learner::Fixed { coefficients: beta.clone() })
                    }
                    None => Err(Error::Config("`truth` coefficients need a generator with known coefficients".into())),
                },
            })
            .collect::<Result<_>>()?,
        BankSpec::Sgd { lambda, step_exponent, radius_x, radius_theta } => {
            vec![Learner::Sgd(SgdConfig::ridge(*lambda, *step_exponent, *radius_x, *radius_theta))]
        }
        BankSpec::Series { truncations } => truncations
            .iter()
            .map(|&truncation| Learner::Series(SeriesConfig { truncation }))
            .collect(),
    };
    Ok(learners.into_iter().zip(labels).map(|(l, label)| LearnerSpec::new(l, label)).collect())
}

/// Extra CSV columns after [`BASE_COLUMNS`].
pub fn extra_columns(cfg: &ExperimentConfig, kind: ExperimentKind) -> Vec<String> {
    match kind {
        ExperimentKind::BandCoverage => vec!["covered_pointwise".into(), "z_hat".into(), "mean_half_width".into()],
        ExperimentKind::CvcSize => vec!["covered_naive".into(), "best".into()],
        ExperimentKind::FwdPointwise => bank_labels(&cfg.learners).into_iter().map(|l| format!("cover_{l}")).collect(),
        ExperimentKind::Stability | ExperimentKind::Phi => Vec::new(),
    }
}

pub fn fmt_real(v: f64) -> String {
    cvconf_core::data::format_real(v)
}

fn fmt_bool(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

/// Rows (one per alpha) produced by a replication; `ms_elapsed` is filled in by the caller.
pub struct RepRows {
    pub rows: Vec<Vec<String>>,
}

fn sparse_truth(truth: &Option<GeneratorTruth>) -> Result<&GeneratorTruth> {
    truth
        .as_ref()
        .ok_or_else(|| Error::UnsupportedGenerator("coverage experiments need a generator with a risk oracle".into()))
}

/// Runs replication `rep` of a coverage experiment at size `n`.
pub fn run_replication(cfg: &ExperimentConfig, kind: ExperimentKind, n: usize, rep: usize) -> Result<RepRows> {
    let started = Instant::now();
    let seed = replication_seed(cfg.seed, kind, n, rep);
    let (ds, truth) = generate(&cfg.generator, n, seed)?;
    let truth = sparse_truth(&truth)?;
    let plan = make_folds(n, cfg.folds, FoldMode::Balanced)?;
    let specs = build_bank(&cfg.learners, &ds, Some(truth), cfg.folds)?;
    let (fits, lm) = cross_validate(&ds, &specs, &plan)?;
    let target = average_fitted_risk_oracle(&fits, &specs, truth)?;
    let risk = cv_risk(&lm);
    let cov = aggregate_covariance(&lm)?;

    let mut rows = Vec::with_capacity(cfg.alphas.len());
    for (k, &alpha) in cfg.alphas.iter().enumerate() {
        let mc = |tag: &str| derive_substream(seed, tag, &[k as u64]);
        let base = |covered: bool, size_naive: Option<usize>, size_cvc: Option<usize>| {
            vec![
                rep.to_string(),
                seed.to_string(),
                fmt_real(alpha),
                fmt_bool(covered),
                size_naive.map_or(String::new(), |s| s.to_string()),
                size_cvc.map_or(String::new(), |s| s.to_string()),
                String::new(),
            ]
        };
        let row = match kind {
            ExperimentKind::BandCoverage => {
                let source = QuantileSource::MonteCarlo { draws: cfg.draws, stream: mc("band") };
                let band = simultaneous_band(&risk, &cov, alpha, source)?;
                let pw = pointwise_band(&risk, &cov, alpha)?;
                let naive = naive_set(&band)?;
                let mut row = base(band_covers(&band, &target)?, Some(naive.size()), None);
                let mean_hw = band.half_width.iter().sum::<f64>() / band.half_width.len() as f64;
                row.extend([fmt_bool(band_covers(&pw, &target)?), fmt_real(band.z_used), fmt_real(mean_hw)]);
                row
            }
            ExperimentKind::CvcSize => {
                let source = QuantileSource::MonteCarlo { draws: cfg.draws, stream: mc("band") };
                let naive = naive_set(&simultaneous_band(&risk, &cov, alpha, source)?)?;
                let cvc = cvc_set(&lm, alpha, &CvcQuantiles::MonteCarlo { draws: cfg.draws, stream: mc("cvc") })?;
                let best = best_candidate(&target);
                let mut row = base(cvc.contains(best), Some(naive.size()), Some(cvc.size()));
                row.extend([fmt_bool(naive.contains(best)), best.to_string()]);
                row
            }
            ExperimentKind::FwdPointwise => {
                let pw = pointwise_band(&risk, &cov, alpha)?;
                let each = band_covers_each(&pw, &target);
                let mut row = base(each.iter().all(|c| *c), None, None);
                row.extend(each.into_iter().map(fmt_bool));
                row
            }
            ExperimentKind::Stability | ExperimentKind::Phi => {
                return Err(Error::Config(format!("{kind} is not a replication experiment")))
            }
        };
        rows.push(row);
    }
    let ms = if cfg.timing { started.elapsed().as_millis() } else { 0 };
    for row in &mut rows {
        row[6] = ms.to_string();
    }
    Ok(RepRows { rows })
}
