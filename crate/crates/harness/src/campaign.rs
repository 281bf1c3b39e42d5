//! Replication campaigns: worker pool, ordered CSV output, resumption, and
//! JSON manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use cvconf_core::data::{make_folds, FoldMode};
use cvconf_core::det_variance::{default_holdout_size, phi_pair, phi_perturb, HoldoutSet, PhiEstimate};
use cvconf_core::learners::SgdConfig;
use cvconf_core::simgen::{derive_substream, SeriesGen};
use cvconf_core::stability::{
    diff_loss_stability_probe, sgd_first_order_campaign, sgd_second_order_campaign, DiffLossProbe, IndexWindow,
    SgdCampaign, StabilityReport,
};
use cvconf_core::{Error, Result};

use crate::config::{BankSpec, ExperimentConfig, ExperimentKind, GeneratorSpec, Probe};
use crate::experiments::{self, fmt_real, replication_seed, BASE_COLUMNS};

/// Worker count: the requested value capped by `CVCONF_THREADS` (0 = auto).
pub fn effective_threads(requested: usize) -> usize {
    let cap = std::env::var("CVCONF_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    match (requested, cap) {
        (r, 0) => r,
        (0, c) => c,
        (r, c) => r.min(c),
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(effective_threads(threads))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("cvconf-out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Column means for one alpha, recomputable from the CSV alone.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub reps: usize,
    pub coverage: f64,
    /// Binomial standard error of `coverage`.
    pub coverage_se: f64,
    /// Mean of every other numeric column except `rep`, `seed`, `ms_elapsed`.
    pub means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeSummary {
    pub n: usize,
    pub csv: String,
    pub completed: usize,
    pub failed: usize,
    pub resumed: usize,
    pub by_alpha: Vec<AlphaSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignManifest {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub columns: Vec<String>,
    pub sizes: Vec<SizeSummary>,
}

impl CampaignManifest {
    pub fn size(&self, n: usize) -> Option<&SizeSummary> {
        self.sizes.iter().find(|s| s.n == n)
    }

    pub fn summary(&self, n: usize, alpha: f64) -> Option<&AlphaSummary> {
        self.size(n)?.by_alpha.iter().find(|a| a.alpha == alpha)
    }
}

pub fn csv_path(dir: &Path, kind: ExperimentKind, n: usize) -> PathBuf {
    dir.join(format!("{}_n{n}.csv", kind.tag()))
}

fn failures_path(dir: &Path, kind: ExperimentKind, n: usize) -> PathBuf {
    dir.join(format!("{}_n{n}.failures.csv", kind.tag()))
}

fn csv_line(fields: &[String]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(fields)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

/// Complete replication groups already on disk, keyed by replication index.
fn read_existing(path: &Path, header: &[String], rows_per_rep: usize) -> Result<BTreeMap<usize, Vec<Vec<String>>>> {
    let mut groups: BTreeMap<usize, Vec<Vec<String>>> = BTreeMap::new();
    if !path.exists() {
        return Ok(groups);
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Config(format!(
            "{} has a different column layout; use a fresh output directory",
            path.display()
        )));
    }
    for rec in rdr.records() {
        let Ok(rec) = rec else { continue };
        if rec.len() != header.len() {
            continue;
        }
        let Ok(rep) = rec[0].parse::<usize>() else { continue };
        groups.entry(rep).or_default().push(rec.iter().map(str::to_string).collect());
    }
    groups.retain(|_, rows| rows.len() == rows_per_rep);
    Ok(groups)
}

fn read_failures(path: &Path) -> Result<BTreeMap<usize, String>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    for rec in rdr.records().flatten() {
        if let (Some(rep), Some(msg)) = (rec.get(0).and_then(|r| r.parse().ok()), rec.get(2)) {
            out.insert(rep, msg.to_string());
        }
    }
    Ok(out)
}

fn summarize(header: &[String], groups: &BTreeMap<usize, Vec<Vec<String>>>, alphas: &[f64]) -> Vec<AlphaSummary> {
    alphas
        .iter()
        .enumerate()
        .map(|(k, &alpha)| {
            let rows: Vec<&Vec<String>> = groups.values().filter_map(|g| g.get(k)).collect();
            let mut means = BTreeMap::new();
            for (c, name) in header.iter().enumerate() {
                if matches!(name.as_str(), "rep" | "seed" | "alpha" | "ms_elapsed") {
                    continue;
                }
                let vals: Vec<f64> = rows.iter().filter_map(|r| r[c].parse::<f64>().ok()).collect();
                if !vals.is_empty() {
                    means.insert(name.clone(), vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            let coverage = means.get("covered").copied().unwrap_or(f64::NAN);
            let reps = rows.len();
            AlphaSummary {
                alpha,
                reps,
                coverage,
                coverage_se: (coverage * (1.0 - coverage) / reps.max(1) as f64).sqrt(),
                means,
            }
        })
        .collect()
}

/// Recomputes per-alpha aggregates from a finished CSV.
pub fn summarize_csv(path: &Path, alphas: &[f64]) -> Result<Vec<AlphaSummary>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut groups: BTreeMap<usize, Vec<Vec<String>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let rep: usize = rec[0].parse().map_err(|_| Error::Parse(format!("bad rep {:?}", &rec[0])))?;
        groups.entry(rep).or_default().push(rec.iter().map(str::to_string).collect());
    }
    Ok(summarize(&header, &groups, alphas))
}

enum Outcome {
    Rows(Vec<Vec<String>>),
    Failed(String),
}

/// Writes outcomes in replication order as they arrive, buffering any that
/// complete early.
fn ordered_writer(
    rx: mpsc::Receiver<(usize, Outcome)>,
    order: &[usize],
    csv: &Path,
    failures: &Path,
    header: &[String],
) -> Result<BTreeMap<usize, Outcome>> {
    let fresh = !csv.exists();
    let mut out = OpenOptions::new().create(true).append(true).open(csv)?;
    if fresh {
        out.write_all(csv_line(header)?.as_bytes())?;
    }
    let fail_fresh = !failures.exists();
    let mut fail_out: Option<File> = None;
    let mut pending: BTreeMap<usize, Outcome> = BTreeMap::new();
    let mut done: BTreeMap<usize, Outcome> = BTreeMap::new();
    let mut next = 0;
    for (rep, outcome) in rx {
        pending.insert(rep, outcome);
        while next < order.len() {
            let Some(outcome) = pending.remove(&order[next]) else { break };
            let rep = order[next];
            match &outcome {
                Outcome::Rows(rows) => {
                    for row in rows {
                        out.write_all(csv_line(row)?.as_bytes())?;
                    }
                    out.flush()?;
                }
                Outcome::Failed(msg) => {
                    let f = match &mut fail_out {
                        Some(f) => f,
                        None => {
                            let mut f = OpenOptions::new().create(true).append(true).open(failures)?;
                            if fail_fresh {
                                f.write_all(csv_line(&["rep".into(), "seed".into(), "error".into()])?.as_bytes())?;
                            }
                            fail_out.insert(f)
                        }
                    };
                    f.write_all(csv_line(&[rep.to_string(), String::new(), msg.clone()])?.as_bytes())?;
                    f.flush()?;
                }
            }
            done.insert(rep, outcome);
            next += 1;
        }
    }
    Ok(done)
}

/// Runs a coverage campaign (band coverage, forward pointwise or CVC size)
/// over every configured `n`, resuming from any rows already in the output
/// directory.
pub fn run_coverage_campaign(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<CampaignManifest> {
    if !matches!(kind, ExperimentKind::BandCoverage | ExperimentKind::FwdPointwise | ExperimentKind::CvcSize) {
        return Err(Error::Config(format!("{kind} is not a coverage campaign")));
    }
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let mut header: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(experiments::extra_columns(cfg, kind));

    let mut sizes = Vec::new();
    for &n in &cfg.ns {
        let csv = csv_path(&dir, kind, n);
        let fail_path = failures_path(&dir, kind, n);
        let mut groups = read_existing(&csv, &header, cfg.alphas.len())?;
        let prior_failures = read_failures(&fail_path)?;
        let resumed = groups.len();
        let todo: Vec<usize> = (0..cfg.reps)
            .filter(|r| !groups.contains_key(r) && !prior_failures.contains_key(r))
            .collect();
        // drop partial groups before appending
        rewrite(&csv, &header, &groups)?;
        info!("{kind} n={n}: {} replications to run, {resumed} already done", todo.len());

        let (tx, rx) = mpsc::channel();
        let done = std::thread::scope(|scope| {
            let writer = scope.spawn(|| ordered_writer(rx, &todo, &csv, &fail_path, &header));
            let run = with_pool(cfg.threads, || {
                todo.par_iter().for_each_with(tx, |tx, &rep| {
                    let outcome = match experiments::run_replication(cfg, kind, n, rep) {
                        Ok(r) => Outcome::Rows(r.rows),
                        Err(e) => {
                            warn!("{kind} n={n} rep={rep} failed: {e}");
                            Outcome::Failed(e.to_string())
                        }
                    };
                    let _ = tx.send((rep, outcome));
                })
            });
            let written = writer.join().expect("writer thread panicked");
            run.and(written)
        })?;

        let mut failed = prior_failures.len();
        for (rep, outcome) in done {
            match outcome {
                Outcome::Rows(rows) => {
                    groups.insert(rep, rows);
                }
                Outcome::Failed(_) => failed += 1,
            }
        }
        rewrite(&csv, &header, &groups)?;
        let by_alpha = summarize_csv(&csv, &cfg.alphas)?;
        sizes.push(SizeSummary {
            n,
            csv: csv.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            completed: groups.len(),
            failed,
            resumed,
            by_alpha,
        });
        if failed > 0 {
            warn!("{kind} n={n}: {failed} replications failed and were excluded");
        }
    }
    let manifest = CampaignManifest {
        kind,
        config: cfg.clone(),
        columns: header,
        sizes,
    };
    write_json(&dir.join(format!("manifest_{}.json", kind.tag())), &manifest)?;
    Ok(manifest)
}

fn rewrite(path: &Path, header: &[String], groups: &BTreeMap<usize, Vec<Vec<String>>>) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        w.write_record(header)?;
        for rows in groups.values() {
            for row in rows {
                w.write_record(row)?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sgd_config(cfg: &ExperimentConfig) -> Result<SgdConfig> {
    match cfg.learners {
        BankSpec::Sgd { lambda, step_exponent, radius_x, radius_theta } => {
            Ok(SgdConfig::ridge(lambda, step_exponent, radius_x, radius_theta))
        }
        _ => Err(Error::Config("SGD probes need `family = sgd`".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct StabilitySummary<'a> {
    config: &'a ExperimentConfig,
    kind: cvconf_core::stability::ProbeKind,
    grid: &'a [usize],
    summaries: &'a [cvconf_core::stability::GridSummary],
    fits: &'a [cvconf_core::stability::NamedFit],
    violations: usize,
    trials: usize,
    flags: &'a [String],
}

/// Drives one stability probe over the configured `n` grid and writes
/// `stability_<probe>.csv` (one row per trial) plus a JSON summary.
pub fn run_stability(cfg: &ExperimentConfig) -> Result<StabilityReport> {
    let dir = out_dir(cfg)?;
    let stream = derive_substream(cfg.seed, "stability", &[]);
    let report = with_pool(cfg.threads, || -> Result<StabilityReport> {
        match cfg.probe {
            Probe::SgdFirst | Probe::SgdSecond => {
                let (d, noise) = match cfg.generator {
                    GeneratorSpec::Bounded { d, noise } => (d, noise),
                    _ => return Err(Error::Config("SGD probes need `kind = bounded` data".into())),
                };
                let campaign = SgdCampaign {
                    config: sgd_config(cfg)?,
                    d,
                    noise,
                    grid: cfg.ns.clone(),
                    trials: cfg.trials,
                    window: if cfg.tail_window { IndexWindow::Tail } else { IndexWindow::Uniform },
                    stream,
                };
                if cfg.probe == Probe::SgdFirst {
                    sgd_first_order_campaign(&campaign)
                } else {
                    sgd_second_order_campaign(&campaign)
                }
            }
            Probe::DiffLoss => {
                let GeneratorSpec::Series { j_max, decay, sigma_eps } = cfg.generator else {
                    return Err(Error::Config("the loss-difference probe needs `kind = series` data".into()));
                };
                let BankSpec::Series { truncations } = &cfg.learners else {
                    return Err(Error::Config("the loss-difference probe needs `family = series`".into()));
                };
                let [small, large] = truncations[..] else {
                    return Err(Error::Config("the loss-difference probe compares exactly two truncations".into()));
                };
                diff_loss_stability_probe(&DiffLossProbe {
                    generator: SeriesGen { n: 0, j_max, decay, sigma_eps, seed: cfg.seed },
                    small,
                    large,
                    grid: cfg.ns.clone(),
                    trials: cfg.trials,
                    stream,
                })
            }
        }
    })??;
    let tag = match cfg.probe {
        Probe::SgdFirst => "sgd_first",
        Probe::SgdSecond => "sgd_second",
        Probe::DiffLoss => "diff_loss",
    };
    let mut w = csv::Writer::from_path(dir.join(format!("stability_{tag}.csv")))?;
    w.write_record(["n", "trial", "i", "j", "first", "second", "value", "bound", "violated"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), fmt_real);
    for r in &report.rows {
        w.write_record([
            r.n.to_string(),
            r.trial.to_string(),
            r.i.to_string(),
            r.j.map_or(String::new(), |j| j.to_string()),
            opt(r.first),
            opt(r.second),
            opt(r.value),
            opt(r.bound),
            (r.violated as u8).to_string(),
        ])?;
    }
    w.flush()?;
    write_json(
        &dir.join(format!("stability_{tag}.json")),
        &StabilitySummary {
            config: cfg,
            kind: report.kind,
            grid: &report.grid,
            summaries: &report.summaries,
            fits: &report.fits,
            violations: report.violations,
            trials: cfg.trials,
            flags: &report.flags,
        },
    )?;
    for flag in &report.flags {
        warn!("{flag}");
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiSidecar {
    pub n: usize,
    pub m: usize,
    pub rep: usize,
    pub seed: u64,
    pub variant: cvconf_core::det_variance::PhiVariant,
    pub labels: Vec<String>,
    pub diagonal: Vec<f64>,
    pub diagonal_se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiRun {
    pub n: usize,
    pub rep: usize,
    pub pair: PhiEstimate,
    pub perturb: PhiEstimate,
}

fn write_phi(dir: &Path, labels: &[String], n: usize, rep: usize, seed: u64, est: &PhiEstimate) -> Result<()> {
    let variant = match est.variant {
        cvconf_core::det_variance::PhiVariant::Pair => "pair",
        cvconf_core::det_variance::PhiVariant::Perturb => "perturb",
    };
    let stem = format!("phi_{variant}_n{n}_rep{rep}");
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    w.write_record(labels)?;
    for r in 0..est.phi.nrows() {
        w.write_record((0..est.phi.ncols()).map(|s| fmt_real(est.phi[(r, s)])))?;
    }
    w.flush()?;
    let p = est.phi.nrows();
    write_json(
        &dir.join(format!("{stem}.json")),
        &PhiSidecar {
            n,
            m: est.m,
            rep,
            seed,
            variant: est.variant,
            labels: labels.to_vec(),
            diagonal: (0..p).map(|r| est.phi[(r, r)]).collect(),
            diagonal_se: (0..p).map(|r| est.diagonal_se(r)).collect(),
        },
    )
}

/// Pair and perturbation estimates for every `(n, rep)`.
pub fn run_phi(cfg: &ExperimentConfig) -> Result<Vec<PhiRun>> {
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let labels = experiments::bank_labels(&cfg.learners);
    let mut runs = Vec::new();
    for &n in &cfg.ns {
        let m = if cfg.holdout == 0 { default_holdout_size(n) } else { cfg.holdout };
        for rep in 0..cfg.reps {
            let seed = replication_seed(cfg.seed, ExperimentKind::Phi, n, rep);
            let (ds, truth) = experiments::generate(&cfg.generator, n, seed)?;
            let holdout = HoldoutSet::new(experiments::generate_more(&cfg.generator, n, m, seed)?);
            let specs = experiments::build_bank(&cfg.learners, &ds, truth.as_ref(), cfg.folds)?;
            let plan = make_folds(n, cfg.folds, FoldMode::Balanced)?;
            let (pair, perturb) = with_pool(cfg.threads, || -> Result<_> {
                Ok((
                    phi_pair(&ds, &specs, &plan, &holdout, cfg.replace)?,
                    phi_perturb(&ds, &specs, &plan, &holdout, None)?,
                ))
            })??;
            write_phi(&dir, &labels, n, rep, seed, &pair)?;
            write_phi(&dir, &labels, n, rep, seed, &perturb)?;
            runs.push(PhiRun { n, rep, pair, perturb });
        }
    }
    Ok(runs)
}

/// Writes `data_n<n>.csv` and `truth_n<n>.json` for every configured `n`.
pub fn run_gen(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    let mut written = Vec::new();
    for &n in &cfg.ns {
        let seed = derive_substream(cfg.seed, "gen", &[n as u64]).id();
        let (ds, truth) = experiments::generate(&cfg.generator, n, seed)?;
        let path = dir.join(format!("data_n{n}.csv"));
        ds.write_csv(File::create(&path)?)?;
        if let Some(truth) = truth {
            write_json(&dir.join(format!("truth_n{n}.json")), &truth)?;
        }
        written.push(path);
    }
    Ok(written)
}

/// Ensures that `got` and the requested subcommand agree when the config names a kind.
pub fn check_kind(cfg: &ExperimentConfig, want: ExperimentKind) -> Result<()> {
    match cfg.kind {
        Some(k) if k != want => Err(Error::Config(format!("config is for {k}, but {want} was requested"))),
        _ => Ok(()),
    }
}

/// Replications already recorded in a CSV, for diagnostics.
pub fn recorded_reps(path: &Path) -> Result<BTreeSet<usize>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.records().flatten().filter_map(|r| r.get(0).and_then(|x| x.parse().ok())).collect())
}
