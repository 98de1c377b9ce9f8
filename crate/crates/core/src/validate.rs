//! Acceptance suites. Exact checks run on fixed inputs; the statistical
//! ones run scaled Monte Carlo experiments on synthetic data.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::chi2::chi2_quantile;
use crate::coex::{classical_expected, coex_stats, coex_table, CoexTable};
use crate::downstream::{
    gdi_from_s, gdi_threshold_test, GdiAccumulator, DEFAULT_ALPHA, DEFAULT_GDI_FLOOR, DEFAULT_GDI_QUANTILE,
};
use crate::engine::{pairwise_coex, EngineOptions, PairResult, VecSink};
use crate::error::Result;
use crate::estimate::{estimate, EstimatorKind};
use crate::matrix::{filter_genes, CountMatrix};
use crate::pipeline::fit_model;
use crate::plot::{ecdf_max_deviation, pvalue_ecdf};
use crate::special::{SqrtPoissonEval, TAU_MAX};
use crate::synth::{generate, NuLaw, SynthConfig, SynthFile};
use crate::zero::{solve_dispersion, RhoMatrix};

pub const TAU_MAX_TOL: f64 = 5e-4;
pub const IDENTITY_TOL: f64 = 1e-9;
pub const PSI_GAP_SLACK: f64 = 1e-6;
pub const PSI_THIRD_BOUND: f64 = 1.21;
pub const CLASSICAL_TOL: f64 = 0.05;
pub const W_REFERENCE: f64 = 0.503;
pub const R_REFERENCE: f64 = 0.709;
pub const STAT_TOL: f64 = 0.005;
pub const CHI2_QUANTILE_REFERENCE: f64 = 15.137;
pub const GDI_REFERENCE: f64 = 2.2203;
pub const CONSTANT_TOL: f64 = 1e-3;
pub const ECDF_FROM: f64 = 0.005;
pub const ECDF_TOL: f64 = 0.01;
pub const GDI_FLAGGED_RANGE: (f64, f64) = (0.01, 0.08);
pub const ANALYTIC_A_TOL: f64 = 1e-6;
pub const MARGINAL_TOL: f64 = 1e-6;
pub const NEGATIVE_A_RANGE: (f64, f64) = (0.01, 0.40);
pub const NU_CV_MAX: f64 = 0.08;
pub const VARIANCE_SIGMAS: f64 = 3.0;

/// Null dataset: 2000 genes by 800 cells from a single cluster.
pub const NULL_GENES: usize = 2000;
pub const NULL_CELLS: usize = 800;
pub const NULL_SEED: u64 = 1;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u32,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] criterion {}: {} ({:.2}s of {:.0}s) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs_f64(),
            self.detail
        )
    }
}

fn timed(id: u32, title: &'static str, budget_secs: u64, f: impl FnOnce() -> Result<(bool, String)>) -> Outcome {
    let t0 = Instant::now();
    let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let elapsed = t0.elapsed();
    let budget = Duration::from_secs(budget_secs);
    Outcome {
        id,
        title,
        passed: ok && elapsed <= budget,
        detail,
        elapsed,
        budget,
    }
}

/// Criterion 1: certificates for the square-root Poisson functions.
pub fn special_functions() -> Outcome {
    timed(1, "square-root-Poisson certificates", 5, || {
        let eval = SqrtPoissonEval::default();
        let (arg, max) = eval.tau_max();
        let mut identity: f64 = 0.0;
        let mut gap_lo = f64::INFINITY;
        let mut gap_hi: f64 = 0.0;
        for i in 0..=4000 {
            let x = i as f64 * 0.05;
            let phi = eval.phi(x)?;
            identity = identity.max((phi * phi + eval.tau(x)? - x).abs());
            let gap = eval.psi(x)? - x * x;
            gap_lo = gap_lo.min(gap);
            gap_hi = gap_hi.max(gap);
        }
        let h = 1e-3;
        let mut third: f64 = 0.0;
        let mut y = h;
        while y <= 10.0 - h {
            let d = (eval.psi_second(y + h)? - eval.psi_second(y - h)?) / (2.0 * h);
            third = third.max(d.abs());
            y += 0.01;
        }
        let ok = (max - TAU_MAX).abs() <= TAU_MAX_TOL
            && identity <= IDENTITY_TOL
            && gap_lo >= 0.0
            && gap_hi <= TAU_MAX + PSI_GAP_SLACK
            && third <= PSI_THIRD_BOUND;
        Ok((
            ok,
            format!(
                "max tau {max:.6} at x={arg:.4}; |phi^2+tau-x| <= {identity:.1e}; \
                 psi-y^2 in [{gap_lo:.2e}, {gap_hi:.6}]; max |psi'''| {third:.4}"
            ),
        ))
    })
}

/// Criterion 2: classical table and W / R on the constitutive-gene example.
pub fn reference_fixture() -> Outcome {
    timed(2, "constitutive-gene table statistics", 1, || {
        let classical = classical_expected([709, 670], [1359, 20])?;
        let want = [698.7, 10.3, 660.3, 9.7];
        let class_err = classical
            .iter()
            .zip(want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let t = CoexTable::new([705, 4, 654, 16], [703.6, 5.4, 655.4, 14.6])?;
        let s = coex_stats(&t);
        let ok = class_err <= CLASSICAL_TOL
            && (s.w - W_REFERENCE).abs() <= STAT_TOL
            && (s.r - R_REFERENCE).abs() <= STAT_TOL;
        Ok((
            ok,
            format!(
                "classical {:.2?} (max err {class_err:.3}); W {:.4}; R {:+.4}",
                classical, s.w, s.r
            ),
        ))
    })
}

/// Criterion 3: χ²₁ quantile and GDI threshold constants.
pub fn gdi_constants() -> Outcome {
    timed(3, "GDI threshold constants", 1, || {
        let q = chi2_quantile(1.0 - 1e-4, 1)?;
        let g = gdi_from_s(CHI2_QUANTILE_REFERENCE, DEFAULT_GDI_FLOOR);
        let ok = (q - CHI2_QUANTILE_REFERENCE).abs() <= CONSTANT_TOL && (g - GDI_REFERENCE).abs() <= CONSTANT_TOL;
        Ok((ok, format!("chi2_1 quantile {q:.5}; GDI(15.137) {g:.5}")))
    })
}

/// Summary of the all-pairs run on a null dataset.
#[derive(Debug, Clone)]
pub struct NullRun {
    pub kind: EstimatorKind,
    pub pairs: u64,
    pub ecdf_deviation: f64,
    pub flagged_fraction: f64,
    pub negative_a_fraction: f64,
    pub max_marginal_residual: f64,
    pub n_cells: usize,
    pub elapsed: Duration,
}

pub fn null_dataset() -> Result<CountMatrix> {
    let cfg = SynthFile::desk(1, NULL_GENES, NULL_CELLS, NULL_SEED).resolve()?;
    let (m, _) = generate(&cfg)?;
    Ok(filter_genes(&m, 1)?.matrix)
}

/// All-pairs tests and GDI on `m` with the given estimator.
pub fn null_run(m: &CountMatrix, kind: EstimatorKind) -> Result<NullRun> {
    let t0 = Instant::now();
    let fitted = fit_model(m, kind).map_err(|e| e.source)?;
    let p_values = Mutex::new(Vec::with_capacity(m.n_genes() * (m.n_genes() - 1) / 2));
    let gdi = GdiAccumulator::new(m.n_genes(), DEFAULT_ALPHA)?;
    let sink = |b: &[PairResult]| -> Result<()> {
        p_values
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .extend(b.iter().map(|r| r.stats.p_value));
        crate::engine::PairSink::accept(&gdi, b)
    };
    let pairs = pairwise_coex(m, &fitted.rho, EngineOptions::default(), &sink)?;
    let p = p_values.into_inner().unwrap_or_else(|p| p.into_inner());
    let ecdf = pvalue_ecdf(&p, usize::MAX, 0);
    let scores = gdi.finish(DEFAULT_GDI_FLOOR)?;
    let flagged = gdi_threshold_test(&scores, DEFAULT_GDI_QUANTILE)?;
    let mut residual: f64 = 0.0;
    for g in 0..m.n_genes() {
        if !fitted.fit.fitted[g] {
            continue;
        }
        let zeros = (m.n_cells() - m.row(g).nnz()) as f64;
        let model: f64 = fitted.rho.row(g).iter().map(|r| 1.0 - r).sum();
        residual = residual.max((model - zeros).abs());
    }
    Ok(NullRun {
        kind,
        pairs,
        ecdf_deviation: ecdf_max_deviation(&ecdf, ECDF_FROM),
        flagged_fraction: flagged.iter().filter(|&&f| f).count() as f64 / m.n_genes() as f64,
        negative_a_fraction: fitted.fit.negative_fraction(),
        max_marginal_residual: residual,
        n_cells: m.n_cells(),
        elapsed: t0.elapsed(),
    })
}

fn outcome_from(id: u32, title: &'static str, budget: u64, elapsed: Duration, ok: bool, detail: String) -> Outcome {
    let budget = Duration::from_secs(budget);
    Outcome {
        id,
        title,
        passed: ok && elapsed <= budget,
        detail,
        elapsed,
        budget,
    }
}

/// Criterion 4: p-value calibration of the co-expression test.
pub fn null_calibration(run: &NullRun, gen_time: Duration) -> Outcome {
    let ok = run.ecdf_deviation <= ECDF_TOL;
    outcome_from(
        4,
        "null p-value calibration",
        120,
        run.elapsed + gen_time,
        ok,
        format!(
            "{} estimator, {} pairs, max |ECDF - p| on [{ECDF_FROM}, 1] = {:.4}",
            run.kind, run.pairs, run.ecdf_deviation
        ),
    )
}

/// Criterion 5: GDI false-positive fraction.
pub fn gdi_false_positives(run: &NullRun) -> Outcome {
    let (lo, hi) = GDI_FLAGGED_RANGE;
    let f = run.flagged_fraction;
    outcome_from(
        5,
        "GDI false-positive envelope",
        120,
        run.elapsed,
        (lo..=hi).contains(&f),
        format!("{:.2}% of genes flagged", 100.0 * f),
    )
}

/// Criterion 6: the dispersion solver against closed-form roots and the null fit.
pub fn dispersion_exactness(run: &NullRun) -> Outcome {
    let t0 = Instant::now();
    let mu = [1.0; 10];
    let half = solve_dispersion(&mu, 5).map(|s| s.a);
    let fifth = solve_dispersion(&mu, 2).map(|s| s.a);
    let (a1, a2) = match (half, fifth) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            return outcome_from(
                6,
                "dispersion fit exactness",
                10,
                t0.elapsed(),
                false,
                format!("error: {e}"),
            )
        }
    };
    let exact2 = 1.0 - 5f64.ln();
    let (lo, hi) = NEGATIVE_A_RANGE;
    let ok = (a1 - 1.0).abs() <= ANALYTIC_A_TOL
        && (a2 - exact2).abs() <= ANALYTIC_A_TOL
        && run.max_marginal_residual <= MARGINAL_TOL * run.n_cells as f64
        && (lo..=hi).contains(&run.negative_a_fraction);
    outcome_from(
        6,
        "dispersion fit exactness",
        10,
        t0.elapsed(),
        ok,
        format!(
            "a(5/10) = {a1:.9}; a(2/10) - (1 - ln 5) = {:.1e}; max marginal residual {:.1e}; \
             negative a {:.1}%",
            a2 - exact2,
            run.max_marginal_residual,
            100.0 * run.negative_a_fraction
        ),
    )
}

/// Relative RMSE of λ estimates on genes with λ > 0.
fn lambda_rel_rmse(truth: &[f64], est: &[f64]) -> f64 {
    let (s, n) = truth
        .iter()
        .zip(est)
        .filter(|(t, _)| **t > 0.0)
        .fold((0.0, 0usize), |(s, n), (t, e)| (s + (e / t - 1.0).powi(2), n + 1));
    (s / n as f64).sqrt()
}

fn cv(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean
}

/// Criterion 7: ν̌ precision at 4000 cells and λ error shrinking with m.
pub fn estimator_accuracy() -> Outcome {
    timed(7, "estimator accuracy", 60, || {
        let mut rmse = Vec::new();
        let mut nu_cv = (0.0, 0.0);
        for cells in [800, 4000] {
            let cfg = SynthFile::desk(1, NULL_GENES, cells, NULL_SEED + 1).resolve()?;
            let (m, truth) = generate(&cfg)?;
            for kind in [EstimatorKind::Average, EstimatorKind::SqrtCorrected] {
                let p = estimate(&m, kind)?;
                rmse.push((cells, kind, lambda_rel_rmse(&truth.lambda[0], &p.lambda)));
                if cells == 4000 {
                    let ratio: Vec<f64> = p.nu.iter().zip(&truth.nu).map(|(e, t)| e / t).collect();
                    match kind {
                        EstimatorKind::SqrtCorrected => nu_cv.0 = cv(&ratio),
                        EstimatorKind::Average => nu_cv.1 = cv(&ratio),
                    }
                }
            }
        }
        let shrinks = |k: EstimatorKind| {
            let at = |c: usize| rmse.iter().find(|r| r.0 == c && r.1 == k).map_or(f64::NAN, |r| r.2);
            (at(800), at(4000))
        };
        let (s8, s40) = shrinks(EstimatorKind::SqrtCorrected);
        let (a8, a40) = shrinks(EstimatorKind::Average);
        let ok = nu_cv.0 <= NU_CV_MAX && s40 < s8 && a40 < a8;
        Ok((
            ok,
            format!(
                "CV(nu_sqrt/nu) {:.4} (average {:.4}); lambda rel. RMSE sqrt {s8:.4} -> {s40:.4}, \
                 average {a8:.4} -> {a40:.4}",
                nu_cv.0, nu_cv.1
            ),
        ))
    })
}

fn bits_equal(a: &PairResult, t: &CoexTable) -> bool {
    let s = coex_stats(t);
    a.table == *t
        && a.stats.w.to_bits() == s.w.to_bits()
        && a.stats.r.to_bits() == s.r.to_bits()
        && a.stats.p_value.to_bits() == s.p_value.to_bits()
}

/// Engine output against the pair-by-pair functions; returns mismatches.
pub fn engine_mismatches(m: &CountMatrix, rho: &RhoMatrix, opts: EngineOptions) -> Result<usize> {
    let sink = VecSink::new();
    let emitted = pairwise_coex(m, rho, opts, &sink)?;
    let got = sink.into_sorted();
    let n = m.n_genes();
    let mut bad = (emitted as usize).abs_diff(n * (n - 1) / 2);
    let mut it = got.iter();
    for i in 0..n {
        for j in i + 1..n {
            let t = coex_table(m, rho, i, j)?;
            match it.next() {
                Some(r) if (r.g1 as usize, r.g2 as usize) == (i, j) && bits_equal(r, &t) => {}
                _ => bad += 1,
            }
        }
    }
    Ok(bad)
}

/// Criterion 8: bit-identical engine on 20 random 100 x 200 matrices.
pub fn engine_equivalence() -> Outcome {
    timed(8, "engine equals per-pair loop", 30, || {
        let mut bad = 0;
        for i in 0..20u64 {
            let cfg = SynthFile::desk(1 + (i % 4) as usize, 100, 200, 1000 + i).resolve()?;
            let (m, _) = generate(&cfg)?;
            let kind = if i % 2 == 0 {
                EstimatorKind::Average
            } else {
                EstimatorKind::SqrtCorrected
            };
            let fitted = fit_model(&m, kind).map_err(|e| e.source)?;
            let opts = EngineOptions {
                tile: [7, 32, 64, 256][(i % 4) as usize],
                threads: None,
            };
            bad += engine_mismatches(&m, &fitted.rho, opts)?;
        }
        Ok((
            bad == 0,
            format!("20 matrices, {} pairs each, {bad} mismatches", 100 * 99 / 2),
        ))
    })
}

/// Sample mean and unbiased variance.
fn moments(x: &[u32]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Criterion 9: Var(R) = μ + aμ² across a (λ, a) grid.
pub fn variance_law() -> Outcome {
    timed(9, "negative-binomial variance law", 30, || {
        let draws = 100_000;
        let mut worst: f64 = 0.0;
        let mut failures = 0;
        for (i, &lambda) in [0.5, 2.0, 8.0].iter().enumerate() {
            for (j, &a) in [0.0, 0.25, 1.0].iter().enumerate() {
                let cfg = SynthConfig::homogeneous(
                    1,
                    draws,
                    lambda,
                    a,
                    NuLaw::Explicit {
                        values: vec![1.0; draws],
                    },
                    900 + (3 * i + j) as u64,
                );
                let (m, _) = generate(&cfg)?;
                let x: Vec<u32> = (0..draws).map(|c| m.get(0, c)).collect();
                let (_, var) = moments(&x);
                // Negative-binomial cumulants give Var(S²) ≈ (κ₄ + 2κ₂²)/n.
                let k2 = lambda + a * lambda * lambda;
                let k4 = k2 * (1.0 + 6.0 * a * lambda * (1.0 + a * lambda));
                let sigma = ((k4 + 2.0 * k2 * k2) / draws as f64).sqrt();
                let z = (var - k2) / sigma;
                worst = worst.max(z.abs());
                if z.abs() > VARIANCE_SIGMAS {
                    failures += 1;
                }
            }
        }
        Ok((failures == 0, format!("9 cells, largest deviation {worst:.2} sigma")))
    })
}

/// Every criterion in order. The null-data criteria share one run.
pub fn run_all() -> Vec<Outcome> {
    run_selected(&[])
}

/// Runs the listed criteria (all when empty), in order. Criteria 4 to 6
/// share one null run.
pub fn run_selected(ids: &[u32]) -> Vec<Outcome> {
    let want = |id: u32| ids.is_empty() || ids.contains(&id);
    let mut out = Vec::new();
    for (id, f) in [
        (1, special_functions as fn() -> Outcome),
        (2, reference_fixture),
        (3, gdi_constants),
    ] {
        if want(id) {
            out.push(f());
        }
    }
    if want(4) || want(5) || want(6) {
        let t0 = Instant::now();
        let null = null_dataset().and_then(|m| {
            let gen_time = t0.elapsed();
            null_run(&m, EstimatorKind::Average).map(|run| (run, gen_time))
        });
        match null {
            Ok((run, gen_time)) => {
                let all = [
                    null_calibration(&run, gen_time),
                    gdi_false_positives(&run),
                    dispersion_exactness(&run),
                ];
                out.extend(all.into_iter().filter(|o| want(o.id)));
            }
            Err(e) => {
                for (id, title) in [
                    (4, "null p-value calibration"),
                    (5, "GDI false-positive envelope"),
                    (6, "dispersion fit exactness"),
                ] {
                    if want(id) {
                        out.push(outcome_from(id, title, 120, t0.elapsed(), false, format!("error: {e}")));
                    }
                }
            }
        }
    }
    for (id, f) in [
        (7, estimator_accuracy as fn() -> Outcome),
        (8, engine_equivalence),
        (9, variance_law),
    ] {
        if want(id) {
            out.push(f());
        }
    }
    out
}
