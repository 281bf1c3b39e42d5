//! Confidence bands for the vector of cross-validated risks and confidence
//! sets for the best candidate.
//!
//! * [`pointwise_band`]: `R_r +/- sigma_rr^{1/2} Phi^{-1}(1 - alpha/2) / sqrt(n)`, no
//!   multiplicity adjustment.
//! * [`simultaneous_band`]: same centers, multiplier `z_alpha` = upper
//!   `1 - alpha` quantile of `max |Z|` for `Z` with the estimated loss correlation.
//! * [`naive_set`]: every candidate whose band overlaps the lowest upper end.
//! * [`cvc_set`]: candidate `r` survives when no standardized risk gap
//!   `sqrt(n) (R_r - R_s) / sigma^{(r)}_ss^{1/2}` exceeds the one-sided max
//!   quantile of the difference-loss correlation.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::{difference_covariance, standardize, CovEstimate};
use crate::cv::{cv_risk, RiskVector};
use crate::data::LossMatrix;
use crate::error::{Error, Result};
use crate::gaussian_mc::{max_quantile, MaxMode, QuantileRequest};
use crate::simgen::Substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BandKind {
    Pointwise,
    Simultaneous,
}

/// Intervals `center_r +/- half_width_r`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandSet {
    pub center: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub half_width: Vec<f64>,
    pub alpha: f64,
    pub z_used: f64,
    pub kind: BandKind,
    pub n: usize,
    /// Zero-variance coordinates, given width 0.
    pub dropped: Vec<usize>,
}

/// Where a Gaussian max quantile comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantileSource {
    /// Fixed multiplier; skips sampling.
    Injected(f64),
    MonteCarlo { draws: usize, stream: Substream },
}

#[derive(Debug, Clone, PartialEq)]
pub enum CvcQuantiles {
    /// One multiplier per candidate.
    Injected(Vec<f64>),
    /// Candidate `r` samples from `stream.child("cvc", [r])`.
    MonteCarlo { draws: usize, stream: Substream },
}

pub fn standard_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

fn check_shapes(risk: &RiskVector, cov: &CovEstimate) -> Result<()> {
    if risk.n < 2 {
        return Err(Error::Domain(format!("need n >= 2, got {}", risk.n)));
    }
    if risk.p() == 0 || risk.p() != cov.lambda_diag.len() {
        return Err(Error::Dimension(format!(
            "{} risks against a {}-dimensional covariance",
            risk.p(),
            cov.lambda_diag.len()
        )));
    }
    Ok(())
}

fn build_band(risk: &RiskVector, cov: &CovEstimate, alpha: f64, z: f64, kind: BandKind, dropped: Vec<usize>) -> BandSet {
    let root_n = (risk.n as f64).sqrt();
    let half_width: Vec<f64> = (0..risk.p())
        .map(|r| {
            if dropped.contains(&r) {
                0.0
            } else {
                cov.lambda_diag[r].max(0.0).sqrt() * z / root_n
            }
        })
        .collect();
    let center = risk.values.clone();
    let lower = center.iter().zip(&half_width).map(|(c, h)| c - h).collect();
    let upper = center.iter().zip(&half_width).map(|(c, h)| c + h).collect();
    BandSet {
        center,
        lower,
        upper,
        half_width,
        alpha,
        z_used: z,
        kind,
        n: risk.n,
        dropped,
    }
}

pub fn simultaneous_band(risk: &RiskVector, cov: &CovEstimate, alpha: f64, source: QuantileSource) -> Result<BandSet> {
    check_shapes(risk, cov)?;
    let st = standardize(&cov.sigma, None)?;
    let z = match source {
        QuantileSource::Injected(z) => z,
        QuantileSource::MonteCarlo { draws, stream } => {
            max_quantile(&QuantileRequest {
                corr: st.corr,
                alpha,
                draws,
                mode: MaxMode::AbsMax,
                stream,
            })?
            .z_hat
        }
    };
    Ok(build_band(risk, cov, alpha, z, BandKind::Simultaneous, st.dropped))
}

pub fn pointwise_band(risk: &RiskVector, cov: &CovEstimate, alpha: f64) -> Result<BandSet> {
    check_shapes(risk, cov)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let z = standard_normal_quantile(1.0 - alpha / 2.0);
    Ok(build_band(risk, cov, alpha, z, BandKind::Pointwise, Vec::new()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SetMethod {
    Naive,
    Cvc,
}

/// Membership evidence for one candidate.
///
/// Naive: `statistic` is the lower band end, `threshold` the smallest upper end.
/// CVC: `statistic` is the largest standardized gap over competitors with
/// positive difference variance (`-inf` if there are none), `threshold` the
/// one-sided quantile, and `blockers` the zero-variance competitors with a
/// strictly smaller risk.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateStat {
    pub candidate: usize,
    pub included: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub blockers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfidenceSet {
    pub members: Vec<usize>,
    pub method: SetMethod,
    pub alpha: f64,
    pub stats: Vec<CandidateStat>,
}

impl ModelConfidenceSet {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, r: usize) -> bool {
        self.members.contains(&r)
    }
}

pub fn naive_set(band: &BandSet) -> Result<ModelConfidenceSet> {
    if band.kind != BandKind::Simultaneous {
        return Err(Error::Config("the naive set is built from a simultaneous band".into()));
    }
    let min_upper = band.upper.iter().copied().fold(f64::INFINITY, f64::min);
    let stats: Vec<CandidateStat> = band
        .lower
        .iter()
        .enumerate()
        .map(|(r, &lo)| CandidateStat {
            candidate: r,
            included: lo <= min_upper,
            statistic: lo,
            threshold: min_upper,
            blockers: Vec::new(),
        })
        .collect();
    Ok(ModelConfidenceSet {
        members: stats.iter().filter(|s| s.included).map(|s| s.candidate).collect(),
        method: SetMethod::Naive,
        alpha: band.alpha,
        stats,
    })
}

fn cvc_candidate(lm: &LossMatrix, risk: &RiskVector, r: usize, alpha: f64, quantiles: &CvcQuantiles) -> Result<CandidateStat> {
    let root_n = (lm.n() as f64).sqrt();
    let dc = difference_covariance(lm, r)?;
    let floor = crate::covariance::default_variance_floor(&dc.diag);
    let (kept, dropped): (Vec<usize>, Vec<usize>) = (0..dc.others.len()).partition(|&k| dc.diag[k] > floor);

    let blockers: Vec<usize> = dropped
        .iter()
        .map(|&k| dc.others[k])
        .filter(|&s| risk.values[r] > risk.values[s])
        .collect();
    let statistic = kept
        .iter()
        .map(|&k| root_n * (risk.values[r] - risk.values[dc.others[k]]) / dc.diag[k].sqrt())
        .fold(f64::NEG_INFINITY, f64::max);

    let threshold = match quantiles {
        CvcQuantiles::Injected(z) => z[r],
        CvcQuantiles::MonteCarlo { .. } if kept.is_empty() => f64::NAN,
        CvcQuantiles::MonteCarlo { draws, stream } => {
            let st = standardize(&dc.sigma, Some(floor))?;
            max_quantile(&QuantileRequest {
                corr: st.corr,
                alpha,
                draws: *draws,
                mode: MaxMode::Max,
                stream: stream.child("cvc", &[r as u64]),
            })?
            .z_hat
        }
    };
    let included = blockers.is_empty() && (kept.is_empty() || statistic <= threshold);
    Ok(CandidateStat {
        candidate: r,
        included,
        statistic,
        threshold,
        blockers,
    })
}

/// Difference-based confidence set for the best candidate.
pub fn cvc_set(lm: &LossMatrix, alpha: f64, quantiles: &CvcQuantiles) -> Result<ModelConfidenceSet> {
    let p = lm.p();
    if p == 0 {
        return Err(Error::Dimension("no candidates".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if let CvcQuantiles::Injected(z) = quantiles {
        if z.len() != p {
            return Err(Error::Dimension(format!("{} injected quantiles for {p} candidates", z.len())));
        }
    }
    if p == 1 {
        return Ok(ModelConfidenceSet {
            members: vec![0],
            method: SetMethod::Cvc,
            alpha,
            stats: vec![CandidateStat {
                candidate: 0,
                included: true,
                statistic: f64::NEG_INFINITY,
                threshold: f64::NAN,
                blockers: Vec::new(),
            }],
        });
    }
    let risk = cv_risk(lm);
    let stats = {
        use rayon::prelude::*;
        (0..p)
            .into_par_iter()
            .map(|r| cvc_candidate(lm, &risk, r, alpha, quantiles))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(ModelConfidenceSet {
        members: stats.iter().filter(|s| s.included).map(|s| s.candidate).collect(),
        method: SetMethod::Cvc,
        alpha,
        stats,
    })
}

/// True iff every target lies in its interval.
pub fn band_covers(band: &BandSet, target: &[f64]) -> Result<bool> {
    if target.len() != band.center.len() {
        return Err(Error::Dimension(format!("{} targets for {} intervals", target.len(), band.center.len())));
    }
    Ok(target
        .iter()
        .zip(band.lower.iter().zip(&band.upper))
        .all(|(t, (lo, hi))| lo <= t && t <= hi))
}

/// Per-interval coverage indicators.
pub fn band_covers_each(band: &BandSet, target: &[f64]) -> Vec<bool> {
    target
        .iter()
        .zip(band.lower.iter().zip(&band.upper))
        .map(|(t, (lo, hi))| lo <= t && t <= hi)
        .collect()
}

/// `argmin_r target_r`, ties to the smallest index.
pub fn best_candidate(target: &[f64]) -> usize {
    let mut best = 0;
    for (r, t) in target.iter().enumerate() {
        if *t < target[best] {
            best = r;
        }
    }
    best
}

pub fn set_covers(set: &ModelConfidenceSet, target: &[f64]) -> bool {
    set.contains(best_candidate(target))
}
