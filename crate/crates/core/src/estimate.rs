//! Per-cell efficiency (ν) and per-gene expression (λ) estimators.
//!
//! Two estimators are provided:
//! - `Average`: λ̂_g = row mean, ν̂_c = column mean / grand mean.
//! - `SqrtCorrected`: works on √R and inverts E[√Poisson] with a
//!   second-order correction,
//!   λ̌_g = ψ(X̄) + ½ψ''(X̄)·[V − ψ(X̄) + X̄²], where X̄ and V are the mean and
//!   population variance of √R over the row. ν̌ applies the same formula
//!   over the genes of each cell and is rescaled to mean 1.
//!
//! In both cases mean(ν) = 1 and μ_{g,c} = ν_c λ_g.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{marginals, CountMatrix, SparseRow};
use crate::special::SqrtPoissonEval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Average,
    #[serde(rename = "sqrt")]
    SqrtCorrected,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Average => "average",
            EstimatorKind::SqrtCorrected => "sqrt",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" | "hat" => Ok(EstimatorKind::Average),
            "sqrt" | "check" | "sqrt-corrected" => Ok(EstimatorKind::SqrtCorrected),
            other => Err(Error::InvalidArgument(format!("unknown estimator '{other}'"))),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: EstimatorKind,
    /// Per-cell efficiency, mean 1.
    pub nu: Vec<f64>,
    /// Per-gene expression, ≥ 0.
    pub lambda: Vec<f64>,
    /// Genes whose raw sqrt estimate was negative and clamped to 0.
    pub lambda_clamped: Vec<bool>,
    /// Cells whose raw sqrt estimate was negative and clamped to 0.
    pub nu_clamped: Vec<bool>,
}

impl ModelParams {
    pub fn n_genes(&self) -> usize {
        self.lambda.len()
    }

    pub fn n_cells(&self) -> usize {
        self.nu.len()
    }

    /// Expected read count μ_{g,c} = ν_c λ_g.
    pub fn mu(&self, g: usize, c: usize) -> f64 {
        self.nu[c] * self.lambda[g]
    }

    pub fn mu_row_into(&self, g: usize, out: &mut [f64]) {
        let l = self.lambda[g];
        for (o, &n) in out.iter_mut().zip(&self.nu) {
            *o = n * l;
        }
    }

    pub fn mu_row(&self, g: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells()];
        self.mu_row_into(g, &mut out);
        out
    }

    pub fn check_matrix(&self, m: &CountMatrix) -> Result<()> {
        if self.n_genes() != m.n_genes() || self.n_cells() != m.n_cells() {
            return Err(Error::Dimension(format!(
                "parameters are {}x{} but matrix is {}x{}",
                self.n_genes(),
                self.n_cells(),
                m.n_genes(),
                m.n_cells()
            )));
        }
        Ok(())
    }
}

pub fn estimate(m: &CountMatrix, kind: EstimatorKind) -> Result<ModelParams> {
    match kind {
        EstimatorKind::Average => estimate_average(m),
        EstimatorKind::SqrtCorrected => estimate_sqrt(m, &SqrtPoissonEval::default()),
    }
}

pub fn estimate_average(m: &CountMatrix) -> Result<ModelParams> {
    let mg = marginals(m);
    if mg.grand_total == 0 {
        return Err(Error::InvalidInput("matrix has no reads".into()));
    }
    let n_cells = m.n_cells() as f64;
    let total = mg.grand_total as f64;
    let lambda = mg.genes.row_sum.iter().map(|&s| s as f64 / n_cells).collect();
    // R_{*,c} / R_{*,*} = (col_sum / n) / (total / (n m)) = col_sum · m / total
    let nu = mg.cell_totals.iter().map(|&s| s as f64 * n_cells / total).collect();
    Ok(ModelParams {
        kind: EstimatorKind::Average,
        nu,
        lambda,
        lambda_clamped: vec![false; m.n_genes()],
        nu_clamped: vec![false; m.n_cells()],
    })
}

/// Mean and population variance of √R over a sparse row of length `len`.
///
/// Two passes over the stored entries; the implicit zeros contribute
/// (len − nnz)·mean² to the sum of squared deviations.
pub fn sqrt_row_moments(row: SparseRow<'_>, len: usize) -> (f64, f64) {
    if len == 0 {
        return (0.0, 0.0);
    }
    let n = len as f64;
    let sum: f64 = row.counts.iter().map(|&v| (v as f64).sqrt()).sum();
    let mean = sum / n;
    let dev: f64 = row
        .counts
        .iter()
        .map(|&v| {
            let d = (v as f64).sqrt() - mean;
            d * d
        })
        .sum();
    let zeros = (len - row.nnz()) as f64;
    let var = (dev + zeros * mean * mean) / n;
    (mean, var)
}

/// Second-order square-root estimate of the mean count of one row.
pub fn sqrt_row_estimate(eval: &SqrtPoissonEval, mean: f64, pop_var: f64) -> f64 {
    if mean == 0.0 {
        return 0.0;
    }
    let (psi, jet) = eval.invert(mean);
    let psi2 = -jet.d2 / (jet.d1 * jet.d1 * jet.d1);
    psi + 0.5 * psi2 * (pop_var - psi + mean * mean)
}

fn sqrt_estimates(eval: &SqrtPoissonEval, m: &CountMatrix) -> Vec<(f64, bool)> {
    let len = m.n_cells();
    (0..m.n_genes())
        .into_par_iter()
        .map(|g| {
            let (mean, var) = sqrt_row_moments(m.row(g), len);
            let est = sqrt_row_estimate(eval, mean, var);
            if est < 0.0 {
                (0.0, true)
            } else {
                (est, false)
            }
        })
        .collect()
}

pub fn estimate_sqrt(m: &CountMatrix, eval: &SqrtPoissonEval) -> Result<ModelParams> {
    if m.n_genes() < 2 || m.n_cells() < 2 {
        return Err(Error::InvalidInput(format!(
            "square-root estimator needs at least 2 genes and 2 cells, got {}x{}",
            m.n_genes(),
            m.n_cells()
        )));
    }
    if m.nnz() == 0 {
        return Err(Error::InvalidInput("matrix has no reads".into()));
    }
    let genes = sqrt_estimates(eval, m);
    let cells = sqrt_estimates(eval, &m.transpose());

    let nu_raw: Vec<f64> = cells.iter().map(|&(v, _)| v).collect();
    let nu_mean = nu_raw.iter().sum::<f64>() / nu_raw.len() as f64;
    if !(nu_mean > 0.0) {
        return Err(Error::Numeric("square-root efficiency estimates sum to zero".into()));
    }
    for &(g, clamped) in &genes {
        if clamped {
            log::debug!("negative lambda estimate clamped (value {g})");
        }
    }
    Ok(ModelParams {
        kind: EstimatorKind::SqrtCorrected,
        nu: nu_raw.iter().map(|v| v / nu_mean).collect(),
        lambda: genes.iter().map(|&(v, _)| v).collect(),
        lambda_clamped: genes.iter().map(|&(_, c)| c).collect(),
        nu_clamped: cells.iter().map(|&(_, c)| c).collect(),
    })
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn small_matrix() -> impl Strategy<Value = Vec<Vec<u32>>> {
        (2usize..8, 2usize..12)
            .prop_flat_map(|(n, m)| proptest::collection::vec(proptest::collection::vec(0u32..20, m), n))
    }

    proptest! {
        #[test]
        fn normalization_and_jensen(rows in small_matrix()) {
            let m = CountMatrix::from_rows(&rows).unwrap();
            prop_assume!(m.nnz() > 0);
            let avg = estimate_average(&m).unwrap();
            let sq = estimate_sqrt(&m, &SqrtPoissonEval::default()).unwrap();
            for p in [&avg, &sq] {
                let mean = p.nu.iter().sum::<f64>() / p.nu.len() as f64;
                prop_assert!((mean - 1.0).abs() < 1e-9);
                prop_assert!(p.lambda.iter().all(|&l| l >= 0.0));
            }
            // Jensen: (mean √R)² ≤ mean R = λ̂.
            for g in 0..m.n_genes() {
                let (xbar, _) = sqrt_row_moments(m.row(g), m.n_cells());
                prop_assert!(xbar * xbar <= avg.lambda[g] * (1.0 + 1e-12));
            }
        }
    }
}
