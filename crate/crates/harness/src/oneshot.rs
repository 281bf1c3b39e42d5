//! Single bands and confidence sets on a user-supplied dataset.

use std::io::Write;

use serde::Serialize;

use cvconf_core::covariance::aggregate_covariance;
use cvconf_core::cv::{cross_validate, cv_risk};
use cvconf_core::data::{make_folds, Dataset, FoldMode};
use cvconf_core::inference::{
    cvc_set, naive_set, pointwise_band, simultaneous_band, BandSet, CvcQuantiles, ModelConfidenceSet, QuantileSource,
};
use cvconf_core::simgen::derive_substream;
use cvconf_core::Result;

use crate::config::ExperimentConfig;
use crate::experiments::{build_bank, fmt_real};

/// Simultaneous and pointwise bands for the configured bank at the first alpha.
pub struct BandReport {
    pub labels: Vec<String>,
    pub simultaneous: BandSet,
    pub pointwise: BandSet,
}

pub fn band_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<BandReport> {
    let alpha = cfg.alphas[0];
    let specs = build_bank(&cfg.learners, ds, None, cfg.folds)?;
    let plan = make_folds(ds.n(), cfg.folds, FoldMode::Balanced)?;
    let (_, lm) = cross_validate(ds, &specs, &plan)?;
    let risk = cv_risk(&lm);
    let cov = aggregate_covariance(&lm)?;
    let stream = derive_substream(cfg.seed, "band", &[0]);
    Ok(BandReport {
        labels: lm.model_labels.clone(),
        simultaneous: simultaneous_band(&risk, &cov, alpha, QuantileSource::MonteCarlo { draws: cfg.draws, stream })?,
        pointwise: pointwise_band(&risk, &cov, alpha)?,
    })
}

pub fn write_band<W: Write>(report: &BandReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "risk", "lower", "upper", "pointwise_lower", "pointwise_upper", "z_hat"])?;
    let (s, p) = (&report.simultaneous, &report.pointwise);
    for (r, label) in report.labels.iter().enumerate() {
        w.write_record([
            label.clone(),
            fmt_real(s.center[r]),
            fmt_real(s.lower[r]),
            fmt_real(s.upper[r]),
            fmt_real(p.lower[r]),
            fmt_real(p.upper[r]),
            fmt_real(s.z_used),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SetReport {
    pub labels: Vec<String>,
    pub risks: Vec<f64>,
    pub naive: ModelConfidenceSet,
    pub cvc: ModelConfidenceSet,
}

/// Naive and difference-based confidence sets at the first alpha.
pub fn sets_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<SetReport> {
    let alpha = cfg.alphas[0];
    let specs = build_bank(&cfg.learners, ds, None, cfg.folds)?;
    let plan = make_folds(ds.n(), cfg.folds, FoldMode::Balanced)?;
    let (_, lm) = cross_validate(ds, &specs, &plan)?;
    let risk = cv_risk(&lm);
    let cov = aggregate_covariance(&lm)?;
    let band_stream = derive_substream(cfg.seed, "band", &[0]);
    let band = simultaneous_band(&risk, &cov, alpha, QuantileSource::MonteCarlo { draws: cfg.draws, stream: band_stream })?;
    let cvc_stream = derive_substream(cfg.seed, "cvc", &[0]);
    Ok(SetReport {
        labels: lm.model_labels.clone(),
        naive: naive_set(&band)?,
        cvc: cvc_set(&lm, alpha, &CvcQuantiles::MonteCarlo { draws: cfg.draws, stream: cvc_stream })?,
        risks: risk.values,
    })
}
