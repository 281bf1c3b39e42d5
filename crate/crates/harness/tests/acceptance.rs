//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs as a plain binary so the verdicts are always visible.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::Rng;

use cvconf::campaign::{run_coverage_campaign, run_gen, run_phi, run_stability};
use cvconf::config::{BankSpec, DimSpec, ExperimentConfig, ExperimentKind, GeneratorSpec, Probe};
use cvconf_core::covariance::aggregate_covariance;
use cvconf_core::cv::{cross_validate, cv_risk, fit_all_folds, replace_one_cv_risk};
use cvconf_core::data::{make_folds, Dataset, FoldMode, Learner, LearnerSpec, LossMatrix, Sample};
use cvconf_core::det_variance::{phi_pair, phi_perturb, HoldoutSet};
use cvconf_core::gaussian_mc::{max_quantile, psd_factor, JitterPolicy, MaxMode, QuantileRequest};
use cvconf_core::inference::{
    best_candidate, cvc_set, naive_set, simultaneous_band, CvcQuantiles, QuantileSource,
};
use cvconf_core::learners::{fit_lasso, gram_and_corr, lasso_kkt_residual};
use cvconf_core::simgen::{derive_substream, normal, SparseLinearGen};
use cvconf_core::stability::{sgd_first_order_campaign, sgd_second_order_campaign, IndexWindow, SgdCampaign};
use cvconf_core::learners::SgdConfig;
use statrs::function::erf::erfc;

type Verdict = (bool, String);

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse normal CDF by bisection.
fn normal_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-12.0, 12.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn gaussian_max_quantiles() -> Verdict {
    // abs-max of one coordinate: Phi^{-1}(1 - a/2); max: Phi^{-1}(1 - a);
    // abs-max of two independent: (2 Phi(z) - 1)^2 = 1 - a
    let a: f64 = 0.05;
    let cases = [
        ("q=1 abs", DMatrix::identity(1, 1), MaxMode::AbsMax, normal_quantile(1.0 - a / 2.0)),
        ("q=1 max", DMatrix::identity(1, 1), MaxMode::Max, normal_quantile(1.0 - a)),
        ("q=2 abs", DMatrix::identity(2, 2), MaxMode::AbsMax, normal_quantile((1.0 + (1.0 - a).sqrt()) / 2.0)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, (name, corr, mode, oracle)) in cases.into_iter().enumerate() {
        let t = Instant::now();
        let z = max_quantile(&QuantileRequest {
            corr,
            alpha: a,
            draws: 200_000,
            mode,
            stream: derive_substream(11, "acceptance-mc", &[k as u64]),
        })
        .map(|r| r.z_hat)
        .unwrap_or(f64::NAN);
        let secs = t.elapsed().as_secs_f64();
        ok &= (z - oracle).abs() <= 0.02 && secs < 2.0;
        parts.push(format!("{name}: {z:.4} vs {oracle:.4} ({secs:.2}s)"));
    }
    (ok, parts.join("; "))
}

/// Membership by direct evaluation of the difference inequality.
fn brute_force_cvc(values: &DMatrix<f64>, folds: &[Vec<usize>], z: &[f64]) -> Vec<usize> {
    let (n, p) = values.shape();
    let mean = |c: usize| (0..n).map(|i| values[(i, c)]).sum::<f64>() / n as f64;
    let risks: Vec<f64> = (0..p).map(mean).collect();
    let diff_var = |r: usize, s: usize| {
        let mut acc = 0.0;
        for fold in folds {
            let d: Vec<f64> = fold.iter().map(|&i| values[(i, r)] - values[(i, s)]).collect();
            let m = d.iter().sum::<f64>() / d.len() as f64;
            acc += d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() - 1) as f64;
        }
        acc / folds.len() as f64
    };
    (0..p)
        .filter(|&r| {
            if p == 1 {
                return true;
            }
            let vars: Vec<(usize, f64)> = (0..p).filter(|&s| s != r).map(|s| (s, diff_var(r, s))).collect();
            let floor = 1e-12 * vars.iter().map(|v| v.1).fold(1.0, f64::max);
            vars.iter().all(|&(s, v)| {
                if v > floor {
                    (n as f64).sqrt() * (risks[r] - risks[s]) / v.sqrt() <= z[r]
                } else {
                    risks[r] <= risks[s]
                }
            })
        })
        .collect()
}

fn random_loss_matrix(rng: &mut impl Rng, n: usize, p: usize, folds: usize) -> LossMatrix {
    let shifts: Vec<f64> = (0..p).map(|_| rng.random::<f64>() * 0.5).collect();
    let mut values = DMatrix::from_fn(n, p, |_, r| rng.random::<f64>() + shifts[r]);
    // occasional duplicated or shifted-duplicate columns give zero-variance differences
    if p >= 2 && rng.random_bool(0.3) {
        let (a, b) = (rng.random_range(0..p), rng.random_range(0..p));
        let shift = if rng.random_bool(0.5) { 0.0 } else { 0.25 };
        let col = values.column(a).add_scalar(shift);
        values.set_column(b, &col);
    }
    LossMatrix::from_values(values, make_folds(n, folds, FoldMode::Balanced).unwrap()).unwrap()
}

fn brute_force_cvc_equivalence() -> Verdict {
    let mut rng = derive_substream(12, "acceptance-cvc", &[]).rng();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let p = rng.random_range(1..=5);
        let folds = rng.random_range(2..=5);
        let n = rng.random_range(2 * folds..=60);
        let lm = random_loss_matrix(&mut rng, n, p, folds);
        let z: Vec<f64> = (0..p).map(|_| rng.random_range(-0.5..3.0)).collect();
        let got = cvc_set(&lm, 0.05, &CvcQuantiles::Injected(z.clone())).unwrap().members;
        if got != brute_force_cvc(&lm.values, &lm.plan.index_sets, &z) {
            mismatches += 1;
        }
    }
    (mismatches == 0, format!("{mismatches} mismatches in 1000 instances"))
}

fn fig1_config(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        generator: GeneratorSpec::SparseLinear { d: DimSpec::Fixed(20), s: 5, nu: 1000.0 },
        learners: BankSpec::LassoLogGrid { count: 50, min_ratio: 1e-3 },
        folds: 5,
        alphas: vec![0.1],
        ns: vec![500],
        reps: 300,
        seed: 2024,
        out: Some(dir.to_path_buf()),
        timing: false,
        ..ExperimentConfig::default()
    }
}

fn fig1_band_coverage() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let m = run_coverage_campaign(&fig1_config(dir.path()), ExperimentKind::BandCoverage).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let s = m.summary(500, 0.1).unwrap();
    let pointwise = s.means["covered_pointwise"];
    let ok = (0.86..=0.94).contains(&s.coverage) && pointwise <= s.coverage - 0.05 && secs <= 600.0 && s.reps == 300;
    (
        ok,
        format!(
            "band coverage {:.3}, pointwise {:.3}, {} reps, {} failed, {secs:.0}s",
            s.coverage,
            pointwise,
            s.reps,
            m.size(500).unwrap().failed
        ),
    )
}

fn fig3_cvc_size() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        generator: GeneratorSpec::SparseLinear { d: DimSpec::Ratio(0.1), s: 5, nu: 1.0 },
        learners: BankSpec::LassoGrid,
        alphas: vec![0.05],
        ns: vec![1000, 2500],
        reps: 300,
        seed: 2024,
        out: Some(dir.path().to_path_buf()),
        timing: false,
        ..ExperimentConfig::default()
    };
    let t = Instant::now();
    let m = run_coverage_campaign(&cfg, ExperimentKind::CvcSize).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let mut ok = secs <= 1800.0;
    let mut parts = Vec::new();
    for n in [1000, 2500] {
        let s = m.summary(n, 0.05).unwrap();
        let (cov_naive, size_cvc, size_naive) = (s.means["covered_naive"], s.means["size_cvc"], s.means["size_naive"]);
        ok &= s.reps == 300 && s.coverage >= 0.93 && cov_naive >= 0.93 && size_cvc < size_naive;
        parts.push(format!(
            "n={n}: cov(cvc) {:.3}, cov(naive) {cov_naive:.3}, size {size_cvc:.2} vs {size_naive:.2}",
            s.coverage
        ));
    }
    parts.push(format!("{secs:.0}s"));
    (ok, parts.join("; "))
}

fn sgd_campaign(grid: Vec<usize>, trials: usize, window: IndexWindow) -> SgdCampaign {
    SgdCampaign {
        config: SgdConfig::ridge(0.5, 0.6, 1.0, 1.0),
        d: 3,
        noise: 0.3,
        grid,
        trials,
        window,
        stream: derive_substream(13, "acceptance-sgd", &[]),
    }
}

fn sgd_first_order_bound() -> Verdict {
    let c = sgd_campaign(vec![4096], 200, IndexWindow::Uniform);
    let rep = sgd_first_order_campaign(&c).unwrap();
    let s = &rep.summaries[0];
    (
        rep.violations == 0 && s.trials == 200,
        format!(
            "{} violations in {} trials; max {:.3e} vs bound {:.3e}",
            rep.violations,
            s.trials,
            s.max_first.unwrap(),
            s.bound.unwrap()
        ),
    )
}

fn sgd_second_order_slope() -> Verdict {
    let grid: Vec<usize> = (8..=13).map(|k| 1usize << k).collect();
    let t = Instant::now();
    let rep = sgd_second_order_campaign(&sgd_campaign(grid, 60, IndexWindow::Tail)).unwrap();
    let slope = rep.fit("second").unwrap().slope;
    let a = 0.6;
    let ok = (-2.0 * a - 0.2..=-2.0 * a + 0.4).contains(&slope) && t.elapsed().as_secs() <= 600;
    (ok, format!("slope {slope:.3}, window [{:.1}, {:.1}]", -2.0 * a - 0.2, -2.0 * a + 0.4))
}

fn phi_analytic_target() -> Verdict {
    let m = 2000;
    let gen = SparseLinearGen { n: m, d: 3, s: 2, nu: 2.0, seed: 14 };
    let mut rng = derive_substream(14, "acceptance-phi", &[]).rng();
    let ds = gen.draw(m, &mut rng);
    let hold = HoldoutSet::new(gen.draw(m, &mut rng));
    let coefs = [vec![1.0, 1.0, 0.0], vec![0.5, 0.0, 0.3]];
    let specs: Vec<LearnerSpec> = coefs
        .iter()
        .enumerate()
        .map(|(k, c)| LearnerSpec::new(Learner::Fixed { coefficients: c.clone() }, format!("fixed{k}")))
        .collect();
    let plan = make_folds(m, 5, FoldMode::Strict).unwrap();
    let pair = phi_pair(&ds, &specs, &plan, &hold, 0).unwrap();
    let pert = phi_perturb(&ds, &specs, &plan, &hold, None).unwrap();
    // residual y - z'c ~ N(0, tau^2) with tau^2 = |beta - c|^2 + sigma^2, so Var(loss) = 2 tau^4
    let beta = [1.0, 1.0, 0.0];
    let mut ok = true;
    let mut parts = Vec::new();
    for (r, c) in coefs.iter().enumerate() {
        let tau2 = beta.iter().zip(c).map(|(b, x)| (b - x) * (b - x)).sum::<f64>() + gen.sigma2();
        let target = 2.0 * tau2 * tau2;
        let (a, b) = (pair.phi[(r, r)], pert.phi[(r, r)]);
        let (sa, sb) = (pair.diagonal_se(r), pert.diagonal_se(r));
        ok &= (a - target).abs() <= 5.0 * sa && (b - target).abs() <= 5.0 * sb && (a - b).abs() <= 5.0 * (sa * sa + sb * sb).sqrt();
        parts.push(format!("r={r}: pair {a:.3}±{sa:.3}, perturb {b:.3}±{sb:.3}, target {target:.3}"));
    }
    (ok, parts.join("; "))
}

fn run_props<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(PropConfig { cases: 1000, failure_persistence: None, ..PropConfig::default() });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn loss_instance() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..=5, 2usize..=5, 0usize..=50)
}

fn build_instance((seed, p, folds, extra): (u64, usize, usize, usize)) -> LossMatrix {
    let mut rng = derive_substream(seed, "prop", &[]).rng();
    random_loss_matrix(&mut rng, 2 * folds + extra, p, folds)
}

fn campaign_files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn deterministic_campaigns() -> Result<(), String> {
    let run_all = |dir: &std::path::Path| {
        let base = ExperimentConfig {
            reps: 3,
            draws: 2000,
            timing: false,
            out: Some(dir.to_path_buf()),
            ..ExperimentConfig::default()
        };
        let small = ExperimentConfig { ns: vec![100], ..base.clone() };
        run_coverage_campaign(&ExperimentConfig { learners: BankSpec::LassoLogGrid { count: 8, min_ratio: 1e-2 }, ..small.clone() }, ExperimentKind::BandCoverage).unwrap();
        run_coverage_campaign(&ExperimentConfig { learners: BankSpec::Forward { steps: vec![3, 5, 7], lasso: Some((4, 1e-2)) }, ..small.clone() }, ExperimentKind::FwdPointwise).unwrap();
        run_coverage_campaign(
            &ExperimentConfig {
                generator: GeneratorSpec::SparseLinear { d: DimSpec::Ratio(0.1), s: 5, nu: 1.0 },
                learners: BankSpec::LassoGrid,
                alphas: vec![0.05, 0.2],
                ..base.clone()
            },
            ExperimentKind::CvcSize,
        )
        .unwrap();
        for probe in [Probe::SgdFirst, Probe::SgdSecond] {
            run_stability(&ExperimentConfig {
                generator: GeneratorSpec::Bounded { d: 3, noise: 0.3 },
                learners: BankSpec::Sgd { lambda: 0.5, step_exponent: 0.6, radius_x: 1.0, radius_theta: 1.0 },
                ns: vec![4096, 8192, 16384],
                probe,
                trials: 30,
                tail_window: true,
                ..base.clone()
            })
            .unwrap();
        }
        run_stability(&ExperimentConfig {
            generator: GeneratorSpec::Series { j_max: 20, decay: 1.0, sigma_eps: 1.0 },
            learners: BankSpec::Series { truncations: vec![2, 6] },
            ns: vec![100, 200, 400],
            probe: Probe::DiffLoss,
            trials: 30,
            ..base.clone()
        })
        .unwrap();
        run_phi(&ExperimentConfig {
            learners: BankSpec::Ridge { lambdas: vec![0.1, 1.0] },
            ns: vec![100],
            reps: 2,
            ..base.clone()
        })
        .unwrap();
        run_gen(&small).unwrap();
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_all(a.path());
    run_all(b.path());
    let strip = |files: Vec<(String, Vec<u8>)>, dir: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        // manifests echo the output directory; compare everything else verbatim
        let d = dir.to_string_lossy().into_owned();
        files
            .into_iter()
            .map(|(n, bytes)| (n, String::from_utf8_lossy(&bytes).replace(&d, "<out>").into_bytes()))
            .collect()
    };
    let (fa, fb) = (strip(campaign_files(a.path()), a.path()), strip(campaign_files(b.path()), b.path()));
    if fa.len() < 10 {
        return Err(format!("only {} output files", fa.len()));
    }
    if fa != fb {
        let diff: Vec<&String> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
        return Err(format!("campaign outputs differ: {diff:?}"));
    }
    Ok(())
}

fn invariant_suite() -> Verdict {
    let mut failures: Vec<String> = Vec::new();
    let mut record = |r: Result<(), String>| {
        if let Err(e) = r {
            failures.push(e);
        }
    };

    record(run_props("argmin in cvc set", (loss_instance(), prop::collection::vec(0.0f64..4.0, 5)), |(inst, z)| {
        let lm = build_instance(inst);
        let z = z[..lm.p()].to_vec();
        let set = cvc_set(&lm, 0.05, &CvcQuantiles::Injected(z)).unwrap();
        prop_assert!(set.contains(best_candidate(&cv_risk(&lm).values)));
        Ok(())
    }));

    record(run_props("argmin in naive set", (loss_instance(), 0.0f64..4.0), |(inst, z)| {
        let lm = build_instance(inst);
        let band = simultaneous_band(&cv_risk(&lm), &aggregate_covariance(&lm).unwrap(), 0.1, QuantileSource::Injected(z)).unwrap();
        prop_assert!(naive_set(&band).unwrap().contains(best_candidate(&cv_risk(&lm).values)));
        Ok(())
    }));

    record(run_props("rescaling invariance", (loss_instance(), 0.01f64..100.0, any::<u64>()), |(inst, c, seed)| {
        let lm = build_instance(inst);
        let mut scaled = lm.clone();
        scaled.values *= c;
        let sets = |lm: &LossMatrix| {
            let stream = derive_substream(seed, "band", &[]);
            let band = simultaneous_band(&cv_risk(lm), &aggregate_covariance(lm).unwrap(), 0.1, QuantileSource::MonteCarlo { draws: 1000, stream }).unwrap();
            let cvc = cvc_set(lm, 0.1, &CvcQuantiles::MonteCarlo { draws: 1000, stream: derive_substream(seed, "cvc", &[]) }).unwrap();
            (naive_set(&band).unwrap().members, cvc.members)
        };
        prop_assert_eq!(sets(&lm), sets(&scaled));
        Ok(())
    }));

    record(run_props("covariance symmetric and PSD", loss_instance(), |inst| {
        let lm = build_instance(inst);
        let cov = aggregate_covariance(&lm).unwrap();
        prop_assert_eq!(&cov.sigma, &cov.sigma.transpose());
        let min_eig = cov.sigma.clone().symmetric_eigenvalues().min();
        prop_assert!(min_eig >= -1e-10 * cov.sigma.trace().max(1e-300));
        prop_assert!(psd_factor(&cov.sigma, &JitterPolicy::default()).is_ok());
        Ok(())
    }));

    record(run_props("lasso KKT", (any::<u64>(), 10usize..60, 1usize..12, 0.001f64..1.0), |(seed, n, d, frac)| {
        let mut rng = derive_substream(seed, "kkt", &[]).rng();
        let x = DMatrix::from_fn(n, d, |_, _| normal(&mut rng));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] + 0.5 * normal(&mut rng));
        let (gram, corr) = gram_and_corr(&x, &y);
        let lambda = frac * corr.amax();
        let fit = fit_lasso(&x, &y, lambda, 1e-8, 100_000).unwrap();
        prop_assert!(lasso_kkt_residual(&gram, &corr, &fit.coefficients, lambda) <= 1e-7);
        Ok(())
    }));

    record(run_props("fold formula", (2usize..400, 2usize..20), |(n, folds)| {
        prop_assume!(n >= folds);
        let plan = make_folds(n, folds, FoldMode::Balanced).unwrap();
        let mut next = 0;
        for (v, set) in plan.index_sets.iter().enumerate() {
            let want = n / folds + usize::from(v < n % folds);
            prop_assert_eq!(set.len(), want);
            prop_assert_eq!(set.clone(), (next..next + want).collect::<Vec<_>>());
            prop_assert!(set.iter().all(|&i| plan.fold_of[i] == v));
            next += want;
        }
        prop_assert_eq!(next, n);
        prop_assert_eq!(make_folds(n, folds, FoldMode::Strict).is_ok(), n % folds == 0);
        Ok(())
    }));

    record(run_props("replace-one identity", (any::<u64>(), 10usize..40, 0usize..1000), |(seed, n, i)| {
        let i = i % n;
        let mut rng = derive_substream(seed, "r1", &[]).rng();
        let ds = Dataset::new(
            DMatrix::from_fn(n, 3, |_, _| normal(&mut rng)),
            DVector::from_fn(n, |_, _| normal(&mut rng)),
        )
        .unwrap();
        let specs = vec![
            LearnerSpec::new(Learner::Ridge { lambda: 0.3 }, "ridge"),
            LearnerSpec::new(Learner::lasso(0.1), "lasso"),
            LearnerSpec::new(Learner::Forward { steps: 2 }, "fwd"),
        ];
        let plan = make_folds(n, 5, FoldMode::Balanced).unwrap();
        let fits = fit_all_folds(&ds, &specs, &plan).unwrap();
        let (_, lm) = cross_validate(&ds, &specs, &plan).unwrap();
        let same = replace_one_cv_risk(&ds, &specs, &plan, i, &ds.sample(i), &fits).unwrap();
        prop_assert_eq!(same.values, cv_risk(&lm).values);
        let x = Sample { z: DVector::from_fn(3, |_, _| normal(&mut rng)), y: normal(&mut rng) };
        let fast = replace_one_cv_risk(&ds, &specs, &plan, i, &x, &fits).unwrap();
        let (_, scratch) = cross_validate(&ds.with_replaced(i, &x).unwrap(), &specs, &plan).unwrap();
        prop_assert_eq!(fast.values, cv_risk(&scratch).values);
        Ok(())
    }));

    record(deterministic_campaigns());

    let ok = failures.is_empty();
    let detail = if ok {
        "argmin-in-sets, rescaling, covariance PSD, KKT, folds, replace-one: 1000 cases each; campaign reruns byte-identical".to_string()
    } else {
        failures.join(" | ")
    };
    (ok, detail)
}

fn covariance_consistency() -> Verdict {
    // unit variances: the tolerance carries no scale factor
    let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.3, 0.2, 0.3, 1.0]);
    let chol = sigma.clone().cholesky().unwrap().l();
    let mut parts = Vec::new();
    let mut ok = true;
    for n in [500usize, 2000] {
        let tol = 5.0 * 3f64.ln().sqrt() / (n as f64).sqrt();
        let passes = (0..100u64)
            .filter(|&seed| {
                let mut rng = derive_substream(seed, "acceptance-cov", &[n as u64]).rng();
                let mut values = DMatrix::zeros(n, 3);
                for i in 0..n {
                    let g = DVector::from_fn(3, |_, _| normal(&mut rng));
                    let row = &chol * g;
                    for r in 0..3 {
                        values[(i, r)] = row[r] + r as f64;
                    }
                }
                let lm = LossMatrix::from_values(values, make_folds(n, 5, FoldMode::Strict).unwrap()).unwrap();
                (aggregate_covariance(&lm).unwrap().sigma - &sigma).amax() <= tol
            })
            .count();
        ok &= passes >= 95;
        parts.push(format!("n={n}: {passes}/100 within {tol:.3}"));
    }
    (ok, parts.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gaussian max quantiles", gaussian_max_quantiles),
        ("brute-force CVC equivalence", brute_force_cvc_equivalence),
        ("simultaneous band coverage (n=500, p=50)", fig1_band_coverage),
        ("confidence set size and coverage (n=1000, 2500)", fig3_cvc_size),
        ("SGD first-order bound", sgd_first_order_bound),
        ("SGD second-order scaling", sgd_second_order_slope),
        ("hold-out variance analytic target", phi_analytic_target),
        ("invariant suite", invariant_suite),
        ("covariance consistency", covariance_consistency),
    ];
    let mut all = true;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        all &= ok;
        println!(
            "{} [{}] {name}: {detail} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            k + 1,
            t.elapsed().as_secs_f64()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
