//! Zero-read model: per-gene dispersion `a` and chance of expression ρ.
//!
//! The probability of a zero read is modelled as exp(−f_a(μ̃)) with
//!
//! ```text
//! f_a(x) = ln(1 + a x) / a   for a > 0
//!        = (1 − a) x         for a ≤ 0
//! ```
//!
//! and `a` is chosen per gene so that Σ_c exp(−f_a(μ̃_{g,c})) equals the
//! observed number of zero cells. ρ_{g,c} = 1 − exp(−f_a(μ̃_{g,c})).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimate::{EstimatorKind, ModelParams};
use crate::matrix::{marginals, CountMatrix};

/// Initial bisection bracket for `a`.
pub const INITIAL_BRACKET: (f64, f64) = (-50.0, 50.0);
/// Accepted zero-count residual, relative to the number of cells.
pub const RESIDUAL_TOL: f64 = 1e-8;
const MAX_BISECTIONS: usize = 200;
const MAX_EXPANSIONS: usize = 1000;
/// Residual (relative to cells) at which an unbounded root is accepted.
const LIMIT_TOL: f64 = 1e-14;

pub fn f_a(a: f64, x: f64) -> f64 {
    if a > 0.0 {
        (a * x).ln_1p() / a
    } else {
        (1.0 - a) * x
    }
}

/// ∂f_a(x)/∂a.
pub fn df_da(a: f64, x: f64) -> f64 {
    if a > 0.0 {
        let ax = a * x;
        (ax / (1.0 + ax) - ax.ln_1p()) / (a * a)
    } else if a < 0.0 {
        -x
    } else {
        -0.5 * x * x
    }
}

/// Model-expected number of zero cells, Σ_c exp(−f_a(μ̃_c)).
pub fn expected_zeros(a: f64, mu_row: &[f64]) -> f64 {
    mu_row.iter().map(|&x| (-f_a(a, x)).exp()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionSolution {
    pub a: f64,
    /// |expected − observed| zero count at `a`.
    pub residual: f64,
    pub bisections: usize,
}

/// Solves Σ_c exp(−f_a(μ̃_c)) = observed_zeros for `a` by bracket expansion
/// and bisection. The left side is strictly increasing in `a` whenever some
/// μ̃ > 0, ranging from #{μ̃ = 0} (a → −∞) to the number of cells (a → +∞).
pub fn solve_dispersion(mu_row: &[f64], observed_zeros: usize) -> Result<DispersionSolution> {
    let m = mu_row.len();
    if mu_row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("expected counts must be finite and >= 0".into()));
    }
    let null_cells = mu_row.iter().filter(|&&x| x == 0.0).count();
    if null_cells == m {
        return Err(Error::InvalidArgument("no cell has a positive expected count".into()));
    }
    if observed_zeros >= m {
        return Err(Error::InvalidArgument(format!(
            "{observed_zeros} zeros out of {m} cells: gene has no reads"
        )));
    }
    if observed_zeros < null_cells {
        return Err(Error::InvalidArgument(format!(
            "{observed_zeros} observed zeros but {null_cells} cells have zero expected count"
        )));
    }

    let target = observed_zeros as f64;
    let tol = RESIDUAL_TOL * m as f64;
    let curve = |a: f64| expected_zeros(a, mu_row) - target;

    // When the target equals a limit of the curve (e.g. a gene read in every
    // cell has no zeros), the root is at infinity; accept the first bracket
    // end whose residual is negligible.
    let limit_tol = LIMIT_TOL * m as f64;
    let (mut lo, mut hi) = INITIAL_BRACKET;
    let mut expansions = 0;
    loop {
        let r = curve(lo);
        if r <= 0.0 {
            break;
        }
        if r <= limit_tol || (expansions >= MAX_EXPANSIONS && r <= tol) {
            return Ok(DispersionSolution {
                a: lo,
                residual: r,
                bisections: 0,
            });
        }
        lo *= 2.0;
        expansions += 1;
        if expansions > MAX_EXPANSIONS || !lo.is_finite() {
            return Err(Error::Numeric("dispersion bracket expansion failed (lower)".into()));
        }
    }
    loop {
        let r = curve(hi);
        if r >= 0.0 {
            break;
        }
        if -r <= limit_tol || (expansions >= MAX_EXPANSIONS && -r <= tol) {
            return Ok(DispersionSolution {
                a: hi,
                residual: -r,
                bisections: 0,
            });
        }
        hi *= 2.0;
        expansions += 1;
        if expansions > MAX_EXPANSIONS || !hi.is_finite() {
            return Err(Error::Numeric("dispersion bracket expansion failed (upper)".into()));
        }
    }

    // Bisect until the bracket collapses to adjacent floats, so the
    // marginal match is as tight as the arithmetic allows.
    let mut best = if curve(lo).abs() < curve(hi).abs() { lo } else { hi };
    let mut best_res = curve(best).abs();
    let mut steps = 0;
    while steps < MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        steps += 1;
        let r = curve(mid);
        if r.abs() < best_res {
            best = mid;
            best_res = r.abs();
        }
        if r == 0.0 {
            break;
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best_res > tol {
        return Err(Error::Numeric(format!(
            "dispersion solve did not converge: residual {best_res:e} after {steps} bisections"
        )));
    }
    Ok(DispersionSolution {
        a: best,
        residual: best_res,
        bisections: steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionFit {
    /// Per-gene dispersion; 0 for unfitted genes.
    pub a: Vec<f64>,
    pub residual: Vec<f64>,
    /// False for genes with no reads.
    pub fitted: Vec<bool>,
    pub mu_source: EstimatorKind,
}

impl DispersionFit {
    pub fn n_genes(&self) -> usize {
        self.a.len()
    }

    pub fn negative_fraction(&self) -> f64 {
        let fitted = self.fitted.iter().filter(|&&f| f).count();
        if fitted == 0 {
            return 0.0;
        }
        let neg = self.a.iter().zip(&self.fitted).filter(|&(&a, &f)| f && a < 0.0).count();
        neg as f64 / fitted as f64
    }
}

/// Fits `a` for every gene with at least one read.
pub fn fit_dispersion(m: &CountMatrix, params: &ModelParams) -> Result<DispersionFit> {
    params.check_matrix(m)?;
    let mg = marginals(m);
    let results: Vec<Result<(f64, f64, bool)>> = (0..m.n_genes())
        .into_par_iter()
        .map_init(
            || vec![0.0; m.n_cells()],
            |mu, g| {
                if mg.genes.row_sum[g] == 0 {
                    return Ok((0.0, 0.0, false));
                }
                params.mu_row_into(g, mu);
                let sol = solve_dispersion(mu, mg.genes.zero_cells[g])
                    .map_err(|e| Error::Numeric(format!("gene '{}': {e}", m.gene_ids()[g])))?;
                Ok((sol.a, sol.residual, true))
            },
        )
        .collect();
    let mut fit = DispersionFit {
        a: Vec::with_capacity(m.n_genes()),
        residual: Vec::with_capacity(m.n_genes()),
        fitted: Vec::with_capacity(m.n_genes()),
        mu_source: params.kind,
    };
    for r in results {
        let (a, res, ok) = r?;
        fit.a.push(a);
        fit.residual.push(res);
        fit.fitted.push(ok);
    }
    Ok(fit)
}

/// Dense genes × cells chance-of-expression values.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoMatrix {
    n_genes: usize,
    n_cells: usize,
    data: Vec<f64>,
}

impl RhoMatrix {
    pub fn from_vec(n_genes: usize, n_cells: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_genes * n_cells {
            return Err(Error::Dimension(format!(
                "{} values for a {n_genes}x{n_cells} matrix",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidInput(format!("chance of expression {v} outside [0, 1]")));
        }
        Ok(Self { n_genes, n_cells, data })
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn row(&self, g: usize) -> &[f64] {
        &self.data[g * self.n_cells..(g + 1) * self.n_cells]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// ρ = 1 − exp(−f_a(μ̃)).
pub fn rho_value(a: f64, mu: f64) -> f64 {
    -(-f_a(a, mu)).exp_m1()
}

fn check_fit(params: &ModelParams, fit: &DispersionFit) -> Result<()> {
    if fit.n_genes() != params.n_genes() {
        return Err(Error::Dimension(format!(
            "dispersion fit has {} genes, parameters have {}",
            fit.n_genes(),
            params.n_genes()
        )));
    }
    if fit.mu_source != params.kind {
        return Err(Error::InvalidInput(format!(
            "dispersion fitted on {} estimates, parameters are {}",
            fit.mu_source, params.kind
        )));
    }
    Ok(())
}

pub fn chance_of_expression(params: &ModelParams, fit: &DispersionFit) -> Result<RhoMatrix> {
    check_fit(params, fit)?;
    let m = params.n_cells();
    let mut data = vec![0.0; params.n_genes() * m];
    if m > 0 {
        data.par_chunks_mut(m).enumerate().for_each(|(g, row)| {
            fill_rho_row(params, fit, g, row);
        });
    }
    Ok(RhoMatrix {
        n_genes: params.n_genes(),
        n_cells: m,
        data,
    })
}

fn fill_rho_row(params: &ModelParams, fit: &DispersionFit, g: usize, out: &mut [f64]) {
    let a = fit.a[g];
    let l = params.lambda[g];
    for (o, &nu) in out.iter_mut().zip(&params.nu) {
        *o = rho_value(a, nu * l);
    }
}

/// Computes ρ rows on demand instead of holding the dense matrix.
#[derive(Debug, Clone, Copy)]
pub struct LazyRho<'a> {
    params: &'a ModelParams,
    fit: &'a DispersionFit,
}

impl<'a> LazyRho<'a> {
    pub fn new(params: &'a ModelParams, fit: &'a DispersionFit) -> Result<Self> {
        check_fit(params, fit)?;
        Ok(Self { params, fit })
    }

    pub fn fill_row(&self, g: usize, out: &mut [f64]) {
        fill_rho_row(self.params, self.fit, g, out);
    }
}

const RHO_MAGIC: &[u8; 8] = b"SCRAWRHO";

/// Binary ρ file: 8-byte magic `SCRAWRHO`, genes and cells as little-endian
/// u32, then genes × cells little-endian f64 in row-major order.
pub fn write_rho(rho: &RhoMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(RHO_MAGIC)?;
        w.write_all(&(rho.n_genes as u32).to_le_bytes())?;
        w.write_all(&(rho.n_cells as u32).to_le_bytes())?;
        for v in &rho.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_rho(path: &Path) -> Result<RhoMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[..8] != RHO_MAGIC {
        return Err(Error::parse(path, 1, "not a chance-of-expression file (bad magic)"));
    }
    let n = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != n * m * 8 {
        return Err(Error::parse(
            path,
            1,
            format!(
                "expected {} bytes of data for {n}x{m}, found {}",
                n * m * 8,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    RhoMatrix::from_vec(n, m, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f_a_values() {
        for &x in &[0.0, 0.3, 2.0, 17.0] {
            assert_eq!(f_a(0.0, x), x);
        }
        assert!((f_a(1.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(f_a(-1.0, 3.0), 6.0);
        // continuity at a = 0 from above
        assert!((f_a(1e-12, 2.0) - 2.0).abs() < 1e-10);
    }

    #[test]
    fn f_a_shape() {
        for &a in &[-2.0, -0.5, 0.0, 0.5, 3.0] {
            assert_eq!(f_a(a, 0.0), 0.0);
            let h = 1e-7;
            let slope = f_a(a, h) / h;
            if a >= 0.0 {
                assert!((slope - 1.0).abs() < 1e-5, "a={a}");
            }
        }
        // ∂f/∂a < 0 for x > 0
        for &a in &[-3.0, -0.1, 0.0, 1e-3, 0.7, 5.0] {
            for &x in &[1e-3, 0.5, 2.0, 40.0] {
                assert!(df_da(a, x) < 0.0, "a={a} x={x}");
                let h = 1e-6;
                let fd = (f_a(a + h, x) - f_a(a - h, x)) / (2.0 * h);
                if a.abs() > 1e-3 {
                    assert!((fd - df_da(a, x)).abs() < 1e-5 * (1.0 + fd.abs()), "a={a} x={x}");
                }
            }
        }
    }

    #[test]
    fn expected_zeros_values() {
        assert_eq!(expected_zeros(3.0, &[0.0; 7]), 7.0);
        assert!((expected_zeros(0.0, &[1.0, 1.0]) - 2.0 * (-1f64).exp()).abs() < 1e-15);
        assert!((expected_zeros(1.0, &[1.0; 10]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn solve_analytic_cases() {
        let mu = [1.0; 10];
        let s = solve_dispersion(&mu, 5).unwrap();
        assert!((s.a - 1.0).abs() < 1e-6, "{}", s.a);
        let s = solve_dispersion(&mu, 2).unwrap();
        assert!((s.a - (1.0 - 5f64.ln())).abs() < 1e-6, "{}", s.a);
        assert!(s.residual <= 1e-8 * 10.0);
    }

    #[test]
    fn solve_poisson_case() {
        // Σ e^{-μ} = 4 · 1/4 = 1 observed zero, so f_0 is already exact.
        let mu = [4f64.ln(); 4];
        let s = solve_dispersion(&mu, 1).unwrap();
        assert!(s.a.abs() < 1e-9, "{}", s.a);
    }

    #[test]
    fn solve_bracket_validity() {
        let mu: Vec<f64> = (0..50).map(|i| 0.05 * (i + 1) as f64).collect();
        for zeros in [1usize, 10, 25, 40, 48] {
            let s = solve_dispersion(&mu, zeros).unwrap();
            let d = 1e-6;
            assert!(expected_zeros(s.a - d, &mu) < zeros as f64);
            assert!(expected_zeros(s.a + d, &mu) >= zeros as f64);
        }
    }

    #[test]
    fn solve_limit_cases() {
        // Every cell has a read: the root sits at a → −∞.
        let mu = [0.5, 1.0, 3.0];
        let s = solve_dispersion(&mu, 0).unwrap();
        assert!(s.a < -50.0);
        assert!(s.residual <= 1e-14 * 3.0);
        // Zeros only where the expected count is zero.
        let s = solve_dispersion(&[0.0, 2.0, 2.0], 1).unwrap();
        assert!(s.residual <= 1e-14 * 3.0);
    }

    #[test]
    fn solve_preconditions() {
        assert!(solve_dispersion(&[0.0, 0.0], 1).is_err());
        assert!(solve_dispersion(&[1.0, 1.0], 2).is_err());
        assert!(solve_dispersion(&[0.0, 1.0, 1.0], 0).is_err());
        assert!(solve_dispersion(&[1.0, 1.0], 3).is_err());
        assert!(solve_dispersion(&[-1.0, 1.0], 0).is_err());
    }

    #[test]
    fn rho_values() {
        assert!((rho_value(1.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(rho_value(0.7, 0.0), 0.0);
        assert!((rho_value(0.0, 2.0) - (1.0 - (-2f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn rho_marginals_match_zero_counts() {
        let rows = vec![
            vec![0, 1, 3, 0, 0, 2, 1, 0],
            vec![5, 0, 0, 0, 1, 0, 0, 0],
            vec![0, 0, 0, 0, 0, 0, 0, 0],
            vec![1, 1, 2, 1, 3, 0, 1, 4],
        ];
        let m = CountMatrix::from_rows(&rows).unwrap();
        for kind in [EstimatorKind::Average, EstimatorKind::SqrtCorrected] {
            let p = crate::estimate::estimate(&m, kind).unwrap();
            let fit = fit_dispersion(&m, &p).unwrap();
            assert!(!fit.fitted[2]);
            let rho = chance_of_expression(&p, &fit).unwrap();
            let mg = marginals(&m);
            for g in 0..m.n_genes() {
                let z: f64 = rho.row(g).iter().map(|r| 1.0 - r).sum();
                assert!((z - mg.genes.zero_cells[g] as f64).abs() <= 1e-6 * 8.0, "g={g}");
                assert!(rho.row(g).iter().all(|&r| (0.0..1.0).contains(&r)));
            }
            let lazy = LazyRho::new(&p, &fit).unwrap();
            let mut buf = vec![0.0; 8];
            lazy.fill_row(1, &mut buf);
            assert_eq!(buf.as_slice(), rho.row(1));
        }
    }

    #[test]
    fn rho_file_round_trip() {
        let rho = RhoMatrix::from_vec(2, 3, vec![0.0, 0.5, 0.25, 0.125, 0.9, 1.0 - 1e-12]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rho.bin");
        write_rho(&rho, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 6 * 8);
        assert_eq!(read_rho(&path).unwrap(), rho);
    }

    #[test]
    fn mismatched_fit_rejected() {
        let m = CountMatrix::from_rows(&[vec![1, 0], vec![0, 2]]).unwrap();
        let p = crate::estimate::estimate_average(&m).unwrap();
        let mut fit = fit_dispersion(&m, &p).unwrap();
        fit.a.pop();
        fit.residual.pop();
        fit.fitted.pop();
        assert!(chance_of_expression(&p, &fit).is_err());
    }
}
