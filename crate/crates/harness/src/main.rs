use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use cvconf::campaign::{check_kind, run_coverage_campaign, run_gen, run_phi, run_stability};
use cvconf::config::{ExperimentConfig, ExperimentKind};
use cvconf::oneshot;
use cvconf_core::data::Dataset;
use cvconf_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cvconf", version, about = "Joint inference for cross-validated risks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simultaneous and pointwise bands on a dataset
    Band(Common),
    /// Naive and difference-based model confidence sets on a dataset
    Cvc(Common),
    /// Simultaneous-band coverage campaign
    Coverage(Common),
    /// Pointwise coverage for forward selection and lasso
    Fwd(Common),
    /// Confidence-set size and coverage campaign
    CvcSize(Common),
    /// Stability probes
    Stability(Common),
    /// Hold-out variance estimates
    Phi(Common),
    /// Write synthetic datasets
    Gen(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Dataset CSV (`y, z1, .., zd`) for `band` and `cvc`
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_path(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(reps) = self.reps {
            cfg.reps = reps;
        }
        if let Some(threads) = self.threads {
            cfg.threads = threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset(&self) -> Result<Dataset> {
        let path = self.data.as_ref().ok_or_else(|| Error::Config("--data is required".into()))?;
        Dataset::read_csv(File::open(path)?)
    }
}

fn campaign(args: &Common, kind: ExperimentKind) -> Result<()> {
    let cfg = args.load()?;
    check_kind(&cfg, kind)?;
    let manifest = run_coverage_campaign(&cfg, kind)?;
    for size in &manifest.sizes {
        for a in &size.by_alpha {
            println!(
                "{kind} n={} alpha={} reps={} failed={} coverage={:.4} (se {:.4})",
                size.n, a.alpha, a.reps, size.failed, a.coverage, a.coverage_se
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Band(args) => {
            let cfg = args.load()?;
            let report = oneshot::band_on(&cfg, &args.dataset()?)?;
            match &cfg.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    oneshot::write_band(&report, File::create(dir.join("band.csv"))?)
                }
                None => oneshot::write_band(&report, std::io::stdout().lock()),
            }
        }
        Command::Cvc(args) => {
            let cfg = args.load()?;
            let report = oneshot::sets_on(&cfg, &args.dataset()?)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?;
            match &cfg.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join("sets.json"), text + "\n")?;
                }
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Coverage(args) => campaign(&args, ExperimentKind::BandCoverage),
        Command::Fwd(args) => campaign(&args, ExperimentKind::FwdPointwise),
        Command::CvcSize(args) => campaign(&args, ExperimentKind::CvcSize),
        Command::Stability(args) => {
            let cfg = args.load()?;
            check_kind(&cfg, ExperimentKind::Stability)?;
            let report = run_stability(&cfg)?;
            for s in &report.summaries {
                println!(
                    "n={} trials={} violations={} median_first={:?} median_second={:?}",
                    s.n, s.trials, s.violations, s.median_first, s.median_second
                );
            }
            for f in &report.fits {
                println!("slope[{}] = {:.4} (se {:.4})", f.name, f.fit.slope, f.fit.stderr);
            }
            Ok(())
        }
        Command::Phi(args) => {
            let cfg = args.load()?;
            check_kind(&cfg, ExperimentKind::Phi)?;
            for run in run_phi(&cfg)? {
                let diag = |e: &cvconf_core::det_variance::PhiEstimate| {
                    (0..e.phi.nrows()).map(|r| e.phi[(r, r)]).collect::<Vec<_>>()
                };
                println!("n={} rep={} pair={:?} perturb={:?}", run.n, run.rep, diag(&run.pair), diag(&run.perturb));
            }
            Ok(())
        }
        Command::Gen(args) => {
            for path in run_gen(&args.load()?)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
