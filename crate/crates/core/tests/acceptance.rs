//! Acceptance suite. Runs criteria 1 to 9 in order, prints one line per
//! criterion and fails if any criterion fails.
//!
//! Built without the libtest harness so the lines always reach the console
//! and the criteria never compete for cores, which keeps the runtime
//! budgets meaningful.

use std::process::ExitCode;
use std::time::Instant;

use scraw::estimate::EstimatorKind;
use scraw::validate::{self, Outcome};

/// The tolerances are part of the contract; loosening one must fail here.
fn pinned_tolerances() -> Vec<String> {
    let mut bad = Vec::new();
    let mut pin = |name: &str, got: f64, want: f64| {
        if got != want {
            bad.push(format!("{name} is {got}, pinned at {want}"));
        }
    };
    pin("TAU_MAX_TOL", validate::TAU_MAX_TOL, 5e-4);
    pin("IDENTITY_TOL", validate::IDENTITY_TOL, 1e-9);
    pin("PSI_GAP_SLACK", validate::PSI_GAP_SLACK, 1e-6);
    pin("PSI_THIRD_BOUND", validate::PSI_THIRD_BOUND, 1.21);
    pin("CLASSICAL_TOL", validate::CLASSICAL_TOL, 0.05);
    pin("W_REFERENCE", validate::W_REFERENCE, 0.503);
    pin("R_REFERENCE", validate::R_REFERENCE, 0.709);
    pin("STAT_TOL", validate::STAT_TOL, 0.005);
    pin("CHI2_QUANTILE_REFERENCE", validate::CHI2_QUANTILE_REFERENCE, 15.137);
    pin("GDI_REFERENCE", validate::GDI_REFERENCE, 2.2203);
    pin("CONSTANT_TOL", validate::CONSTANT_TOL, 1e-3);
    pin("ECDF_FROM", validate::ECDF_FROM, 0.005);
    pin("ECDF_TOL", validate::ECDF_TOL, 0.01);
    pin("GDI_FLAGGED_RANGE.0", validate::GDI_FLAGGED_RANGE.0, 0.01);
    pin("GDI_FLAGGED_RANGE.1", validate::GDI_FLAGGED_RANGE.1, 0.08);
    pin("ANALYTIC_A_TOL", validate::ANALYTIC_A_TOL, 1e-6);
    pin("MARGINAL_TOL", validate::MARGINAL_TOL, 1e-6);
    pin("NEGATIVE_A_RANGE.0", validate::NEGATIVE_A_RANGE.0, 0.01);
    pin("NEGATIVE_A_RANGE.1", validate::NEGATIVE_A_RANGE.1, 0.40);
    pin("NU_CV_MAX", validate::NU_CV_MAX, 0.08);
    pin("VARIANCE_SIGMAS", validate::VARIANCE_SIGMAS, 3.0);
    pin("NULL_GENES", validate::NULL_GENES as f64, 2000.0);
    pin("NULL_CELLS", validate::NULL_CELLS as f64, 800.0);
    bad
}

fn main() -> ExitCode {
    // libtest arguments such as filters or --nocapture are ignored.
    let t0 = Instant::now();
    println!("\nrunning acceptance criteria 1-9");
    let bad = pinned_tolerances();
    for b in &bad {
        println!("[FAIL] tolerance pin: {b}");
    }

    let outcomes: Vec<Outcome> = validate::run_all();
    for o in &outcomes {
        println!("{o}");
    }
    let ids: Vec<u32> = outcomes.iter().map(|o| o.id).collect();
    let complete = ids == (1..=9).collect::<Vec<_>>();
    if !complete {
        println!("[FAIL] expected criteria 1-9, got {ids:?}");
    }

    // The square-root estimators are not the pipeline default; their null
    // calibration is reported for reference only.
    match validate::null_dataset().and_then(|m| validate::null_run(&m, EstimatorKind::SqrtCorrected)) {
        Ok(run) => println!(
            "[INFO] sqrt estimator null run: max |ECDF - p| on [{}, 1] = {:.4}, {:.2}% GDI flagged",
            validate::ECDF_FROM,
            run.ecdf_deviation,
            100.0 * run.flagged_fraction
        ),
        Err(e) => println!("[INFO] sqrt estimator null run failed: {e}"),
    }

    let failed = outcomes.iter().filter(|o| !o.passed).count() + bad.len() + usize::from(!complete);
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        outcomes.iter().filter(|o| o.passed).count(),
        outcomes.len(),
        t0.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
