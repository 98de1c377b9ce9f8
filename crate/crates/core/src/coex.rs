//! Co-expression tables for gene pairs and the W / R statistics.
//!
//! Entries are ordered (11, 10, 01, 00): the first index is the status of
//! the first gene (1 = at least one read), the second that of the second.
//! Expected counts come from the chance of expression ρ rather than from
//! the product of marginals, so cell efficiency does not masquerade as
//! co-expression.

use crate::chi2::chi2_sf;
use crate::error::{Error, Result};
use crate::kernels;
use crate::matrix::CountMatrix;
use crate::zero::RhoMatrix;

/// Tolerance on Σ expected = m.
const EXPECTED_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoexTable {
    pub observed: [u64; 4],
    pub expected: [f64; 4],
    pub m: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoexResult {
    pub w: f64,
    pub r: f64,
    pub p_value: f64,
}

impl CoexTable {
    pub fn new(observed: [u64; 4], expected: [f64; 4]) -> Result<Self> {
        let m: u64 = observed.iter().sum();
        if expected.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "expected table {expected:?} has a negative entry"
            )));
        }
        let total: f64 = expected.iter().sum();
        if (total - m as f64).abs() > EXPECTED_SUM_TOL * (m as f64).max(1.0) {
            return Err(Error::InvalidInput(format!(
                "expected table sums to {total}, observed to {m}"
            )));
        }
        Ok(Self { observed, expected, m })
    }

    /// Cells where the first (row) and second (column) gene are expressed.
    pub fn observed_margins(&self) -> (u64, u64) {
        let o = &self.observed;
        (o[0] + o[1], o[0] + o[2])
    }

    pub fn expected_margins(&self) -> (f64, f64) {
        let e = &self.expected;
        (e[0] + e[1], e[0] + e[2])
    }
}

fn check_pair(n: usize, g1: usize, g2: usize) -> Result<()> {
    if g1 >= n || g2 >= n {
        return Err(Error::InvalidArgument(format!(
            "gene pair ({g1}, {g2}) out of range for {n} genes"
        )));
    }
    if g1 == g2 {
        return Err(Error::InvalidArgument(format!("gene {g1} paired with itself")));
    }
    Ok(())
}

/// Completes a table from the joint count and the two per-gene counts.
#[inline]
pub fn observed_from_parts(o11: u64, n1: u64, n2: u64, m: u64) -> [u64; 4] {
    [o11, n1 - o11, n2 - o11, m + o11 - n1 - n2]
}

/// Completes an expected table from Σρ₁ρ₂ and the per-gene ρ sums.
#[inline]
pub fn expected_from_parts(e11: f64, s1: f64, s2: f64, m: f64) -> [f64; 4] {
    [
        e11,
        (s1 - e11).max(0.0),
        (s2 - e11).max(0.0),
        ((m - s1 - s2) + e11).max(0.0),
    ]
}

pub fn observed_table(m: &CountMatrix, g1: usize, g2: usize) -> Result<[u64; 4]> {
    check_pair(m.n_genes(), g1, g2)?;
    let (r1, r2) = (m.row(g1), m.row(g2));
    let o11 = kernels::sparse_intersection(r1, r2);
    Ok(observed_from_parts(
        o11,
        r1.nnz() as u64,
        r2.nnz() as u64,
        m.n_cells() as u64,
    ))
}

pub fn expected_table(rho: &RhoMatrix, g1: usize, g2: usize) -> Result<[f64; 4]> {
    check_pair(rho.n_genes(), g1, g2)?;
    let (r1, r2) = (rho.row(g1), rho.row(g2));
    Ok(expected_from_parts(
        kernels::dot(r1, r2),
        kernels::sum(r1),
        kernels::sum(r2),
        rho.n_cells() as f64,
    ))
}

/// Observed and model-expected table for one pair.
pub fn coex_table(m: &CountMatrix, rho: &RhoMatrix, g1: usize, g2: usize) -> Result<CoexTable> {
    check_aligned(m, rho)?;
    CoexTable::new(observed_table(m, g1, g2)?, expected_table(rho, g1, g2)?)
}

pub(crate) fn check_aligned(m: &CountMatrix, rho: &RhoMatrix) -> Result<()> {
    if m.n_genes() != rho.n_genes() || m.n_cells() != rho.n_cells() {
        return Err(Error::Dimension(format!(
            "matrix is {}x{}, chance of expression is {}x{}",
            m.n_genes(),
            m.n_cells(),
            rho.n_genes(),
            rho.n_cells()
        )));
    }
    Ok(())
}

/// Product-of-marginals table from row margins (gene 1 on, off) and column
/// margins (gene 2 on, off). For comparison only.
pub fn classical_expected(rows: [u64; 2], cols: [u64; 2]) -> Result<[f64; 4]> {
    let m = rows[0] + rows[1];
    if cols[0] + cols[1] != m {
        return Err(Error::InvalidInput(format!(
            "row margins sum to {m}, column margins to {}",
            cols[0] + cols[1]
        )));
    }
    if m == 0 {
        return Ok([0.0; 4]);
    }
    let mf = m as f64;
    let (r1, r0, c1, c0) = (rows[0] as f64, rows[1] as f64, cols[0] as f64, cols[1] as f64);
    Ok([r1 * c1 / mf, r1 * c0 / mf, r0 * c1 / mf, r0 * c0 / mf])
}

const SIGNS: [f64; 4] = [1.0, -1.0, -1.0, 1.0];

pub fn coex_stats(table: &CoexTable) -> CoexResult {
    let mut w = 0.0;
    let mut weight = 0.0;
    let mut signed = 0.0;
    for ((&o, &e), sign) in table.observed.iter().zip(&table.expected).zip(SIGNS) {
        let d = e.max(1.0);
        let dev = o as f64 - e;
        w += dev * dev / d;
        weight += 1.0 / d;
        signed += sign * dev / d;
    }
    let r = signed / weight.sqrt();
    // w >= 0 by construction, so the survival call cannot fail.
    let p_value = chi2_sf(w, 1).unwrap_or(f64::NAN);
    CoexResult { w, r, p_value }
}
