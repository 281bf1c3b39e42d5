//! Experiment configuration: UTF-8 text with `[generator]`, `[learners]` and
//! `[run]` sections of `key = value` lines. `#` starts a comment; list values
//! are comma separated. Unknown sections and keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use cvconf_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    BandCoverage,
    FwdPointwise,
    CvcSize,
    Stability,
    Phi,
}

impl ExperimentKind {
    pub fn tag(self) -> &'static str {
        match self {
            ExperimentKind::BandCoverage => "band_coverage",
            ExperimentKind::FwdPointwise => "fwd_pointwise",
            ExperimentKind::CvcSize => "cvc_size",
            ExperimentKind::Stability => "stability",
            ExperimentKind::Phi => "phi",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "band_coverage" => ExperimentKind::BandCoverage,
            "fwd_pointwise" => ExperimentKind::FwdPointwise,
            "cvc_size" => ExperimentKind::CvcSize,
            "stability" => ExperimentKind::Stability,
            "phi" => ExperimentKind::Phi,
            other => return Err(Error::Config(format!("unknown experiment kind {other:?}"))),
        })
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Ambient dimension, either fixed or a fraction of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DimSpec {
    Fixed(usize),
    Ratio(f64),
}

impl DimSpec {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            DimSpec::Fixed(d) => d,
            DimSpec::Ratio(r) => ((n as f64) * r).round().max(1.0) as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GeneratorSpec {
    SparseLinear { d: DimSpec, s: usize, nu: f64 },
    Series { j_max: usize, decay: f64, sigma_eps: f64 },
    /// Bounded linear data for SGD probes.
    Bounded { d: usize, noise: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum BankSpec {
    /// `count` log-spaced lasso penalties from `lambda_max` down by `min_ratio`.
    LassoLogGrid { count: usize, min_ratio: f64 },
    /// Ten penalties `lambda_max 2^i / sqrt(1 - 1/V)`.
    LassoGrid,
    /// Forward selection at the given step counts, optionally followed by a
    /// lasso log grid.
    Forward { steps: Vec<usize>, lasso: Option<(usize, f64)> },
    Ridge { lambdas: Vec<f64> },
    /// Training-independent models; `truth` stands for the generator's coefficients.
    Fixed { coefficients: Vec<FixedCoefficients> },
    Sgd { lambda: f64, step_exponent: f64, radius_x: f64, radius_theta: f64 },
    Series { truncations: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedCoefficients {
    Truth,
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    SgdFirst,
    SgdSecond,
    DiffLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    pub generator: GeneratorSpec,
    pub learners: BankSpec,
    pub folds: usize,
    pub alphas: Vec<f64>,
    pub ns: Vec<usize>,
    pub reps: usize,
    pub draws: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub threads: usize,
    /// When false, `ms_elapsed` is written as 0 so reruns are bitwise identical.
    pub timing: bool,
    pub probe: Probe,
    pub trials: usize,
    /// Perturb only the last `ceil(n^a)` SGD steps.
    pub tail_window: bool,
    /// Hold-out size for phi; 0 picks the default from `n`.
    pub holdout: usize,
    /// Training index replaced by the pair estimator (0-based).
    pub replace: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            generator: GeneratorSpec::SparseLinear {
                d: DimSpec::Fixed(20),
                s: 5,
                nu: 1000.0,
            },
            learners: BankSpec::LassoLogGrid {
                count: 50,
                min_ratio: 1e-3,
            },
            folds: 5,
            alphas: vec![0.1],
            ns: vec![500],
            reps: 300,
            draws: cvconf_core::gaussian_mc::DEFAULT_DRAWS,
            seed: 1,
            out: None,
            threads: 0,
            timing: true,
            probe: Probe::SgdFirst,
            trials: 60,
            tail_window: false,
            holdout: 0,
            replace: 0,
        }
    }
}

type Section = BTreeMap<String, (usize, String)>;

fn parse_sections(text: &str) -> Result<BTreeMap<String, Section>> {
    let mut out: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (k, raw) in text.lines().enumerate() {
        let lineno = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !matches!(name, "generator" | "learners" | "run") {
                return Err(Error::Config(format!("line {lineno}: unknown section [{name}]")));
            }
            out.entry(name.to_string()).or_default();
            current = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {lineno}: expected key = value, got {line:?}")));
        };
        let Some(section) = &current else {
            return Err(Error::Config(format!("line {lineno}: key outside any section")));
        };
        let key = key.trim().to_string();
        let prev = out
            .get_mut(section)
            .expect("section registered")
            .insert(key.clone(), (lineno, value.trim().to_string()));
        if prev.is_some() {
            return Err(Error::Config(format!("line {lineno}: duplicate key {section}.{key}")));
        }
    }
    Ok(out)
}

/// Pops typed values out of one section, remembering which keys were used.
struct Reader {
    name: &'static str,
    entries: Section,
}

impl Reader {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("line {line}: cannot parse {}.{key} = {v:?}", self.name))
            }),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: cannot parse list {}.{key} = {v:?}", self.name))),
        }
    }

    fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key {}.{key}", self.name)));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        text.parse()
    }

    fn parse_text(text: &str) -> Result<Self> {
        let mut sections = parse_sections(text)?;
        let mut reader = |name: &'static str| Reader {
            name,
            entries: sections.remove(name).unwrap_or_default(),
        };
        let mut cfg = ExperimentConfig::default();

        let mut g = reader("generator");
        let gkind: String = g.take("kind")?.unwrap_or_else(|| "sparse_linear".into());
        if let Some(ns) = g.take_list("n")? {
            cfg.ns = ns;
        }
        cfg.generator = match gkind.as_str() {
            "sparse_linear" => {
                let d = match (g.take::<usize>("d")?, g.take::<f64>("d_ratio")?) {
                    (Some(_), Some(_)) => return Err(Error::Config("set only one of d and d_ratio".into())),
                    (Some(d), None) => DimSpec::Fixed(d),
                    (None, Some(r)) => DimSpec::Ratio(r),
                    (None, None) => DimSpec::Fixed(20),
                };
                GeneratorSpec::SparseLinear {
                    d,
                    s: g.take("s")?.unwrap_or(5),
                    nu: g.take("nu")?.unwrap_or(1000.0),
                }
            }
            "series" => GeneratorSpec::Series {
                j_max: g.take("j_max")?.unwrap_or(40),
                decay: g.take("decay")?.unwrap_or(1.0),
                sigma_eps: g.take("sigma_eps")?.unwrap_or(1.0),
            },
            "bounded" => GeneratorSpec::Bounded {
                d: g.take("d")?.unwrap_or(3),
                noise: g.take("noise")?.unwrap_or(0.3),
            },
            other => return Err(Error::UnsupportedGenerator(other.to_string())),
        };
        g.finish()?;

        let mut l = reader("learners");
        let family: String = l.take("family")?.unwrap_or_else(|| "lasso_log_grid".into());
        cfg.learners = match family.as_str() {
            "lasso_log_grid" => BankSpec::LassoLogGrid {
                count: l.take("count")?.unwrap_or(50),
                min_ratio: l.take("min_ratio")?.unwrap_or(1e-3),
            },
            "lasso_grid" => BankSpec::LassoGrid,
            "forward" => {
                let steps = l.take_list("steps")?.unwrap_or_else(|| vec![3, 5, 7]);
                let count: Option<usize> = l.take("lasso_count")?;
                let ratio: f64 = l.take("lasso_min_ratio")?.unwrap_or(1e-3);
                BankSpec::Forward {
                    steps,
                    lasso: count.map(|c| (c, ratio)),
                }
            }
            "ridge" => BankSpec::Ridge {
                lambdas: l.take_list("lambdas")?.unwrap_or_else(|| vec![0.1, 1.0]),
            },
            "fixed" => {
                let (line, raw) = l
                    .take_raw("coefficients")
                    .ok_or_else(|| Error::Config("family = fixed needs coefficients".into()))?;
                let coefficients = raw
                    .split(';')
                    .map(|set| {
                        let set = set.trim();
                        if set == "truth" {
                            return Ok(FixedCoefficients::Truth);
                        }
                        set.split_whitespace()
                            .map(|x| x.parse::<f64>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map(FixedCoefficients::Values)
                            .map_err(|_| Error::Config(format!("line {line}: bad coefficient set {set:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                BankSpec::Fixed { coefficients }
            }
            "sgd" => BankSpec::Sgd {
                lambda: l.take("lambda")?.unwrap_or(0.5),
                step_exponent: l.take("step_exponent")?.unwrap_or(0.6),
                radius_x: l.take("radius_x")?.unwrap_or(1.0),
                radius_theta: l.take("radius_theta")?.unwrap_or(1.0),
            },
            "series" => BankSpec::Series {
                truncations: l.take_list("truncations")?.unwrap_or_else(|| vec![2, 8]),
            },
            other => return Err(Error::Config(format!("unknown learner family {other:?}"))),
        };
        l.finish()?;

        let mut r = reader("run");
        cfg.kind = r.take("kind")?;
        macro_rules! set {
            ($field:ident, $key:literal) => {
                if let Some(v) = r.take($key)? {
                    cfg.$field = v;
                }
            };
        }
        set!(folds, "folds");
        set!(reps, "reps");
        set!(draws, "draws");
        set!(seed, "seed");
        set!(threads, "threads");
        set!(timing, "timing");
        set!(trials, "trials");
        set!(tail_window, "tail_window");
        set!(holdout, "holdout");
        set!(replace, "replace");
        if let Some(a) = r.take_list("alpha")? {
            cfg.alphas = a;
        }
        if let Some(out) = r.take::<String>("out")? {
            cfg.out = Some(PathBuf::from(out));
        }
        if let Some(p) = r.take::<String>("probe")? {
            cfg.probe = match p.as_str() {
                "sgd_first" => Probe::SgdFirst,
                "sgd_second" => Probe::SgdSecond,
                "diff_loss" => Probe::DiffLoss,
                other => return Err(Error::Config(format!("unknown probe {other:?}"))),
            };
        }
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.ns.is_empty() {
            return Err(Error::Config("need at least one sample size".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config(format!("alphas must lie in (0, 1): {:?}", self.alphas)));
        }
        if let GeneratorSpec::SparseLinear { d, s, .. } = self.generator {
            for &n in &self.ns {
                if s > d.resolve(n) {
                    return Err(Error::Config(format!("sparsity {s} exceeds dimension {} at n = {n}", d.resolve(n))));
                }
            }
        }
        Ok(())
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse_text(s)
    }
}
