//! C interface to scraw.
//!
//! Every fallible call returns a `ScrawStatus`. On failure the message is
//! kept per thread and can be read with `scraw_last_error`. Objects are
//! opaque handles owned by the caller and released with their `_free`
//! function; passing NULL to a `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Mutex;

use scraw::coex::{coex_stats, coex_table, CoexTable};
use scraw::engine::{pairwise_coex, EngineOptions, PairResult};
use scraw::estimate::EstimatorKind;
use scraw::pipeline::{fit_model, gdi_only, Fitted};
use scraw::{CountMatrix, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScrawStatus {
    Ok = 0,
    InvalidArgument = 1,
    ParseError = 2,
    IoError = 3,
    InvalidInput = 4,
    Dimension = 5,
    Numeric = 6,
    /// The pair callback asked to stop.
    Aborted = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScrawEstimator {
    Average = 0,
    Sqrt = 1,
}

impl From<ScrawEstimator> for EstimatorKind {
    fn from(e: ScrawEstimator) -> Self {
        match e {
            ScrawEstimator::Average => EstimatorKind::Average,
            ScrawEstimator::Sqrt => EstimatorKind::SqrtCorrected,
        }
    }
}

/// Counts in (11, 10, 01, 00) order: expressed in both, first only,
/// second only, neither.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScrawCoexTable {
    pub observed: [u64; 4],
    pub expected: [f64; 4],
    pub m: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScrawCoexResult {
    pub w: f64,
    pub r: f64,
    pub p_value: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScrawPair {
    pub g1: u32,
    pub g2: u32,
    pub table: ScrawCoexTable,
    pub stats: ScrawCoexResult,
}

/// Receives a batch of pair results. Calls are serialized, never concurrent,
/// but may come from any thread. Return nonzero to stop the run.
pub type ScrawPairCallback =
    Option<unsafe extern "C" fn(pairs: *const ScrawPair, len: usize, user: *mut c_void) -> i32>;

/// Count matrix, genes by cells.
pub struct ScrawMatrix(CountMatrix);

/// Fitted model parameters together with the chance-of-expression table.
pub struct ScrawModel(Fitted);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ScrawStatus {
    match e {
        Error::Parse { .. } => ScrawStatus::ParseError,
        Error::Io { .. } => ScrawStatus::IoError,
        Error::InvalidArgument(_) => ScrawStatus::InvalidArgument,
        Error::InvalidInput(_) => ScrawStatus::InvalidInput,
        Error::Dimension(_) => ScrawStatus::Dimension,
        Error::Numeric(_) => ScrawStatus::Numeric,
        Error::SinkAborted { .. } => ScrawStatus::Aborted,
    }
}

fn fail(status: ScrawStatus, msg: impl Into<String>) -> ScrawStatus {
    set_error(msg.into());
    status
}

/// Runs `f` behind a panic guard and records any error message.
fn guard(f: impl FnOnce() -> Result<(), ScrawStatus>) -> ScrawStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScrawStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(ScrawStatus::Panic, msg)
        }
    }
}

fn check<T>(r: scraw::Result<T>) -> Result<T, ScrawStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), ScrawStatus> {
    if p.is_null() {
        Err(fail(ScrawStatus::InvalidArgument, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn scraw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

fn scalar(out: *mut f64, f: impl FnOnce() -> scraw::Result<f64>) -> ScrawStatus {
    guard(|| {
        non_null(out, "out")?;
        let v = check(f())?;
        unsafe { *out = v };
        Ok(())
    })
}

/// φ(x) = E√X for X ~ Poisson(x), x ≥ 0.
///
/// # Safety
/// `out` must be valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn scraw_phi(x: f64, out: *mut f64) -> ScrawStatus {
    scalar(out, || scraw::special::phi(x))
}

/// τ(x) = Var √X for X ~ Poisson(x).
///
/// # Safety
/// `out` must be valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn scraw_tau(x: f64, out: *mut f64) -> ScrawStatus {
    scalar(out, || scraw::special::tau(x))
}

/// ψ(y) = τ(φ⁻¹(y)) + y², 0 ≤ y.
///
/// # Safety
/// `out` must be valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn scraw_psi(y: f64, out: *mut f64) -> ScrawStatus {
    scalar(out, || scraw::special::psi(y))
}

/// Second derivative of ψ.
///
/// # Safety
/// `out` must be valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn scraw_psi_second(y: f64, out: *mut f64) -> ScrawStatus {
    scalar(out, || scraw::special::psi_second(y))
}

/// Upper tail of the chi-square distribution.
///
/// # Safety
/// `out` must be valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn scraw_chi2_sf(x: f64, dof: u32, out: *mut f64) -> ScrawStatus {
    scalar(out, || scraw::chi2::chi2_sf(x, dof))
}

/// Builds a matrix from row-major counts, `n_genes` rows of `n_cells`.
///
/// # Safety
/// `counts` must hold `n_genes * n_cells` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scraw_matrix_from_dense(
    counts: *const u32,
    n_genes: usize,
    n_cells: usize,
    out: *mut *mut ScrawMatrix,
) -> ScrawStatus {
    guard(|| {
        non_null(out, "out")?;
        let len = n_genes
            .checked_mul(n_cells)
            .ok_or_else(|| fail(ScrawStatus::InvalidArgument, "matrix size overflows"))?;
        if len > 0 {
            non_null(counts, "counts")?;
        }
        let data = if len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(counts, len)
        };
        let rows: Vec<Vec<u32>> = if n_cells == 0 {
            vec![Vec::new(); n_genes]
        } else {
            data.chunks(n_cells).map(<[u32]>::to_vec).collect()
        };
        let m = check(CountMatrix::from_rows(&rows))?;
        *out = Box::into_raw(Box::new(ScrawMatrix(m)));
        Ok(())
    })
}

/// Loads a MatrixMarket (.mtx) or dense TSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scraw_matrix_load(path: *const c_char, out: *mut *mut ScrawMatrix) -> ScrawStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(ScrawStatus::InvalidArgument, "path is not UTF-8"))?;
        let m = check(scraw::io::load_matrix(Path::new(p), None))?;
        *out = Box::into_raw(Box::new(ScrawMatrix(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must be a live matrix handle.
#[no_mangle]
pub unsafe extern "C" fn scraw_matrix_n_genes(m: *const ScrawMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.n_genes())
}

/// # Safety
/// `m` must be a live matrix handle.
#[no_mangle]
pub unsafe extern "C" fn scraw_matrix_n_cells(m: *const ScrawMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.n_cells())
}

/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scraw_matrix_free(m: *mut ScrawMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Estimates ν and λ, fits per-gene dispersion, and tabulates chances of
/// expression. The model is tied to the dimensions of `m`.
///
/// # Safety
/// `m` must be a live matrix handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scraw_model_fit(
    m: *const ScrawMatrix,
    estimator: ScrawEstimator,
    out: *mut *mut ScrawModel,
) -> ScrawStatus {
    guard(|| {
        non_null(m, "matrix")?;
        non_null(out, "out")?;
        let fitted = fit_model(&(*m).0, estimator.into()).map_err(|e| {
            let status = status_of(&e.source);
            fail(status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(ScrawModel(fitted)));
        Ok(())
    })
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), ScrawStatus> {
    non_null(out, "out")?;
    if len != src.len() {
        return Err(fail(
            ScrawStatus::Dimension,
            format!("buffer holds {len} values, model has {}", src.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), out, len);
    Ok(())
}

/// Copies the per-cell efficiencies into `out` (`len` = cells).
///
/// # Safety
/// `model` must be live and `out` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn scraw_model_nu(model: *const ScrawModel, out: *mut f64, len: usize) -> ScrawStatus {
    guard(|| {
        non_null(model, "model")?;
        copy_out(&(*model).0.params.nu, out, len)
    })
}

/// Copies the per-gene expression levels into `out` (`len` = genes).
///
/// # Safety
/// `model` must be live and `out` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn scraw_model_lambda(model: *const ScrawModel, out: *mut f64, len: usize) -> ScrawStatus {
    guard(|| {
        non_null(model, "model")?;
        copy_out(&(*model).0.params.lambda, out, len)
    })
}

/// Copies the per-gene dispersions into `out` (`len` = genes).
///
/// # Safety
/// `model` must be live and `out` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn scraw_model_dispersion(model: *const ScrawModel, out: *mut f64, len: usize) -> ScrawStatus {
    guard(|| {
        non_null(model, "model")?;
        copy_out(&(*model).0.fit.a, out, len)
    })
}

/// Copies the chance of expression of gene `g` in every cell (`len` = cells).
///
/// # Safety
/// `model` must be live and `out` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn scraw_model_rho_row(
    model: *const ScrawModel,
    g: usize,
    out: *mut f64,
    len: usize,
) -> ScrawStatus {
    guard(|| {
        non_null(model, "model")?;
        let rho = &(*model).0.rho;
        if g >= rho.n_genes() {
            return Err(fail(ScrawStatus::InvalidArgument, format!("gene {g} out of range")));
        }
        copy_out(rho.row(g), out, len)
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scraw_model_free(model: *mut ScrawModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn to_c_table(t: &CoexTable) -> ScrawCoexTable {
    ScrawCoexTable {
        observed: t.observed,
        expected: t.expected,
        m: t.m,
    }
}

fn to_c_result(r: &scraw::coex::CoexResult) -> ScrawCoexResult {
    ScrawCoexResult {
        w: r.w,
        r: r.r,
        p_value: r.p_value,
    }
}

/// Test statistics for a filled table. `m` is taken from the observed counts,
/// and the expected entries must be non-negative and sum to it.
///
/// # Safety
/// `table` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn scraw_coex_stats(table: *const ScrawCoexTable, out: *mut ScrawCoexResult) -> ScrawStatus {
    guard(|| {
        non_null(table, "table")?;
        non_null(out, "out")?;
        let t = &*table;
        let t = check(CoexTable::new(t.observed, t.expected))?;
        *out = to_c_result(&coex_stats(&t));
        Ok(())
    })
}

/// Table and statistics for one gene pair.
///
/// # Safety
/// Handles must be live and belong together; `table` and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn scraw_coex_pair(
    m: *const ScrawMatrix,
    model: *const ScrawModel,
    g1: usize,
    g2: usize,
    table: *mut ScrawCoexTable,
    out: *mut ScrawCoexResult,
) -> ScrawStatus {
    guard(|| {
        non_null(m, "matrix")?;
        non_null(model, "model")?;
        non_null(table, "table")?;
        non_null(out, "out")?;
        let t = check(coex_table(&(*m).0, &(*model).0.rho, g1, g2))?;
        *table = to_c_table(&t);
        *out = to_c_result(&coex_stats(&t));
        Ok(())
    })
}

struct Callback {
    f: unsafe extern "C" fn(*const ScrawPair, usize, *mut c_void) -> i32,
    user: *mut c_void,
}

// The caller's pointer is only touched under the mutex below.
unsafe impl Send for Callback {}

/// Every unordered pair g1 < g2, in batches and in no fixed order. `tile`
/// 0 uses the default; `threads` 0 uses all cores. The number of results
/// delivered is written to `emitted` when it is not NULL.
///
/// # Safety
/// Handles must be live and belong together; `callback` must be safe to call
/// from any thread with `user`.
#[no_mangle]
pub unsafe extern "C" fn scraw_coex_all(
    m: *const ScrawMatrix,
    model: *const ScrawModel,
    tile: usize,
    threads: usize,
    callback: ScrawPairCallback,
    user: *mut c_void,
    emitted: *mut u64,
) -> ScrawStatus {
    guard(|| {
        non_null(m, "matrix")?;
        non_null(model, "model")?;
        let f = callback.ok_or_else(|| fail(ScrawStatus::InvalidArgument, "callback is NULL"))?;
        let cb = Mutex::new((Callback { f, user }, 0u64));
        let opts = engine_options(tile, threads);
        let sink = |batch: &[PairResult]| -> scraw::Result<()> {
            let c: Vec<ScrawPair> = batch
                .iter()
                .map(|p| ScrawPair {
                    g1: p.g1,
                    g2: p.g2,
                    table: to_c_table(&p.table),
                    stats: to_c_result(&p.stats),
                })
                .collect();
            let mut guard = cb.lock().unwrap_or_else(|e| e.into_inner());
            let rc = unsafe { (guard.0.f)(c.as_ptr(), c.len(), guard.0.user) };
            if rc != 0 {
                return Err(Error::InvalidArgument(format!("callback returned {rc}")));
            }
            guard.1 += c.len() as u64;
            Ok(())
        };
        let r = pairwise_coex(&(*m).0, &(*model).0.rho, opts, &sink);
        let delivered = cb.lock().unwrap_or_else(|e| e.into_inner()).1;
        if !emitted.is_null() {
            *emitted = delivered;
        }
        check(r).map(|_| ())
    })
}

fn engine_options(tile: usize, threads: usize) -> EngineOptions {
    let d = EngineOptions::default();
    EngineOptions {
        tile: if tile == 0 { d.tile } else { tile },
        threads: (threads > 0).then_some(threads),
    }
}

/// Per-gene S and GDI over all pairs. `s_out` and `gdi_out` each hold one
/// value per gene.
///
/// # Safety
/// Handles must be live and belong together; buffers valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn scraw_gdi(
    m: *const ScrawMatrix,
    model: *const ScrawModel,
    alpha: f64,
    floor: f64,
    threads: usize,
    s_out: *mut f64,
    gdi_out: *mut f64,
    len: usize,
) -> ScrawStatus {
    guard(|| {
        non_null(m, "matrix")?;
        non_null(model, "model")?;
        let scores = check(gdi_only(
            &(*m).0,
            &(*model).0.rho,
            alpha,
            floor,
            engine_options(0, threads),
        ))?;
        copy_out(&scores.s, s_out, len)?;
        copy_out(&scores.gdi, gdi_out, len)
    })
}
