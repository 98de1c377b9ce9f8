//! Tidy `x,y,series` data for the diagnostic figures.

use std::path::Path;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::estimate::ModelParams;
use crate::synth::{keyed_rng, GroundTruth};

/// Default cap on plotted p-values.
pub const ECDF_MAX_POINTS: usize = 1_000_000;
const DOMAIN_PLOT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    PvalueEcdf,
    GdiHist,
    EstimatorScatter,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pvalue-ecdf" => Ok(Self::PvalueEcdf),
            "gdi-hist" => Ok(Self::GdiHist),
            "estimator-scatter" => Ok(Self::EstimatorScatter),
            _ => Err(Error::InvalidArgument(format!(
                "unknown plot kind '{s}' (pvalue-ecdf, gdi-hist, estimator-scatter)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub x: f64,
    pub y: f64,
    pub series: String,
}

/// Empirical CDF of p-values. Above `max_points` values a seeded uniform
/// subsample is plotted instead.
pub fn pvalue_ecdf(p: &[f64], max_points: usize, seed: u64) -> Vec<PlotRow> {
    let mut xs: Vec<f64> = if p.len() > max_points {
        let mut rng = keyed_rng(seed, DOMAIN_PLOT, 0, 0);
        sample(&mut rng, p.len(), max_points)
            .into_iter()
            .map(|i| p[i])
            .collect()
    } else {
        p.to_vec()
    };
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.into_iter()
        .enumerate()
        .map(|(i, x)| PlotRow {
            x,
            y: (i + 1) as f64 / n,
            series: "empirical".into(),
        })
        .collect()
}

/// Largest distance between an ECDF and the uniform diagonal over x ≥ `from`.
pub fn ecdf_max_deviation(rows: &[PlotRow], from: f64) -> f64 {
    let n = rows.len() as f64;
    rows.iter()
        .enumerate()
        .filter(|(_, r)| r.x >= from)
        .map(|(i, r)| {
            // Both sides of each step.
            let below = i as f64 / n;
            (r.y - r.x).abs().max((below - r.x).abs())
        })
        .fold(0.0, f64::max)
}

/// Histogram of finite GDI values; empty input gives no rows.
pub fn gdi_hist(gdi: &[f64], bins: usize) -> Vec<PlotRow> {
    let v: Vec<f64> = gdi.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0u64; bins];
    for x in v {
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| PlotRow {
            x: lo + (k as f64 + 0.5) * width,
            y: c as f64,
            series: "gdi".into(),
        })
        .collect()
}

/// True against estimated ν (per cell) and λ (per gene, single cluster).
pub fn estimator_scatter(truth: &GroundTruth, params: &ModelParams) -> Result<Vec<PlotRow>> {
    if truth.nu.len() != params.n_cells() || truth.lambda.len() != 1 || truth.lambda[0].len() != params.n_genes() {
        return Err(Error::Dimension(
            "estimator scatter needs single-cluster ground truth matching the estimates".into(),
        ));
    }
    let kind = params.kind.as_str();
    let nu = truth.nu.iter().zip(&params.nu).map(|(&t, &e)| PlotRow {
        x: t,
        y: e,
        series: format!("nu-{kind}"),
    });
    let lambda = truth.lambda[0].iter().zip(&params.lambda).map(|(&t, &e)| PlotRow {
        x: t,
        y: e,
        series: format!("lambda-{kind}"),
    });
    Ok(nu.chain(lambda).collect())
}

pub fn write_plot_csv(path: &Path, rows: &[PlotRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    w.write_record(["x", "y", "series"]).map_err(err)?;
    for r in rows {
        w.write_record([r.x.to_string(), r.y.to_string(), r.series.clone()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn uniform_ecdf_hugs_diagonal() {
        let mut rng = keyed_rng(1, 99, 0, 0);
        let p: Vec<f64> = (0..200_000).map(|_| rng.random()).collect();
        let rows = pvalue_ecdf(&p, 50_000, 4);
        assert_eq!(rows.len(), 50_000);
        assert!(ecdf_max_deviation(&rows, 0.0) < 0.01);
        assert_eq!(rows.last().unwrap().y, 1.0);
    }

    #[test]
    fn ecdf_deviation_detects_skew() {
        let p: Vec<f64> = (1..=1000).map(|i| (i as f64 / 1000.0).powi(2)).collect();
        let rows = pvalue_ecdf(&p, ECDF_MAX_POINTS, 0);
        assert!(ecdf_max_deviation(&rows, 0.0) > 0.2);
    }

    #[test]
    fn empty_gdi_histogram() {
        assert!(gdi_hist(&[], 20).is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        write_plot_csv(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "x,y,series\n");
        let h = gdi_hist(&[0.0, 1.0, 1.0, 2.0], 2);
        assert_eq!(h.iter().map(|r| r.y).collect::<Vec<_>>(), vec![1.0, 3.0]);
    }

    #[test]
    fn parse_kind() {
        assert_eq!("gdi-hist".parse::<PlotKind>().unwrap(), PlotKind::GdiHist);
        assert!("bars".parse::<PlotKind>().is_err());
    }
}
