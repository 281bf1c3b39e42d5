//! Monte-Carlo quantiles of `max_j Z_j` and `max_j |Z_j|` for a centered
//! Gaussian vector `Z` with a given correlation matrix.
//!
//! Draws are generated in fixed-size blocks, each from its own substream, so
//! the result depends only on the request (including its stream) and never
//! on how blocks are scheduled across threads.

use nalgebra::{Cholesky, DMatrix};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::simgen::Substream;

pub const DEFAULT_DRAWS: usize = 100_000;
pub const MIN_DRAWS: usize = 1000;
const BLOCK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxMode {
    /// `max_j |Z_j|`, two-sided.
    AbsMax,
    /// `max_j Z_j`, one-sided.
    Max,
}

#[derive(Debug, Clone)]
pub struct QuantileRequest {
    pub corr: DMatrix<f64>,
    pub alpha: f64,
    pub draws: usize,
    pub mode: MaxMode,
    pub stream: Substream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantileResult {
    pub z_hat: f64,
    pub draws: usize,
    pub alpha: f64,
    pub mode: MaxMode,
    pub jitter: f64,
}

/// Relative jitter levels tried in order; each is multiplied by `trace / q`.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterPolicy {
    pub ladder: Vec<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            ladder: vec![0.0, 1e-12, 1e-10, 1e-8, 1e-6],
        }
    }
}

/// `lower * lower' = M + jitter I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFactor {
    pub lower: DMatrix<f64>,
    pub jitter: f64,
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::Dimension("matrix is not symmetric".into()));
    }
    Ok(())
}

pub fn psd_factor(m: &DMatrix<f64>, policy: &JitterPolicy) -> Result<PsdFactor> {
    check_symmetric(m)?;
    let q = m.nrows();
    let base = if q == 0 { 0.0 } else { m.trace() / q as f64 };
    let mut max_jitter = 0.0;
    for &level in &policy.ladder {
        let jitter = level * base;
        max_jitter = jitter;
        let mut shifted = m.clone();
        for j in 0..q {
            shifted[(j, j)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(PsdFactor {
                lower: chol.unpack(),
                jitter,
            });
        }
    }
    Err(Error::Indefinite { max_jitter })
}

/// Iterator over iid standard normals from `stream`.
pub fn standard_normal_stream(stream: Substream) -> impl Iterator<Item = f64> {
    StandardNormal.sample_iter(stream.rng())
}

/// `draws` realizations of the max statistic of `lower * eps`.
pub fn max_statistics(factor: &PsdFactor, mode: MaxMode, draws: usize, stream: Substream) -> Vec<f64> {
    let q = factor.lower.nrows();
    // row-major packed lower triangle
    let mut packed = Vec::with_capacity(q * (q + 1) / 2);
    for j in 0..q {
        for k in 0..=j {
            packed.push(factor.lower[(j, k)]);
        }
    }
    let blocks = draws.div_ceil(BLOCK);
    let per_block: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let len = BLOCK.min(draws - b * BLOCK);
            let mut normals = standard_normal_stream(stream.child("block", &[b as u64]));
            let mut eps = vec![0.0; q];
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                for e in eps.iter_mut() {
                    *e = normals.next().expect("infinite stream");
                }
                let mut best = f64::NEG_INFINITY;
                let mut off = 0;
                for j in 0..q {
                    let row = &packed[off..off + j + 1];
                    let z: f64 = row.iter().zip(&eps).map(|(l, e)| l * e).sum();
                    let stat = match mode {
                        MaxMode::AbsMax => z.abs(),
                        MaxMode::Max => z,
                    };
                    best = best.max(stat);
                    off += j + 1;
                }
                out.push(best);
            }
            out
        })
        .collect();
    per_block.concat()
}

/// The `ceil(B (1 - alpha))`-th smallest value.
pub fn upper_order_statistic(mut stats: Vec<f64>, alpha: f64) -> f64 {
    let b = stats.len();
    let k = ((b as f64) * (1.0 - alpha) - 1e-9).ceil().clamp(1.0, b as f64) as usize;
    let (_, kth, _) = stats.select_nth_unstable_by(k - 1, |a, c| a.total_cmp(c));
    *kth
}

pub fn max_quantile(req: &QuantileRequest) -> Result<QuantileResult> {
    if !(req.alpha > 0.0 && req.alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {}", req.alpha)));
    }
    if req.draws < MIN_DRAWS {
        return Err(Error::Domain(format!("need at least {MIN_DRAWS} draws, got {}", req.draws)));
    }
    check_symmetric(&req.corr)?;
    if req.corr.diagonal().iter().any(|d| (d - 1.0).abs() > 1e-8) {
        return Err(Error::Domain("correlation matrix needs a unit diagonal".into()));
    }
    let factor = psd_factor(&req.corr, &JitterPolicy::default())?;
    let stats = max_statistics(&factor, req.mode, req.draws, req.stream);
    Ok(QuantileResult {
        z_hat: upper_order_statistic(stats, req.alpha),
        draws: req.draws,
        alpha: req.alpha,
        mode: req.mode,
        jitter: factor.jitter,
    })
}
