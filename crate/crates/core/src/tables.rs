//! CSV tables written and read by the command-line tools.

use std::path::Path;

use crate::downstream::{DiffExpResult, GdiScores};
use crate::error::{Error, Result};
use crate::estimate::ModelParams;
use crate::matrix::{marginals, CountMatrix};
use crate::zero::DispersionFit;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const GENES_HEADER: [&str; 5] = ["gene", "total", "nonzero_cells", "lambda", "lambda_clamped"];
pub const CELLS_HEADER: [&str; 4] = ["cell", "total", "nu", "nu_clamped"];

/// `genes.csv` and `cells.csv`: marginals next to the parameter estimates.
pub fn write_params(dir: &Path, m: &CountMatrix, params: &ModelParams) -> Result<()> {
    params.check_matrix(m)?;
    let mg = marginals(m);
    write_rows(
        &dir.join("genes.csv"),
        &GENES_HEADER,
        (0..m.n_genes()).map(|g| {
            [
                m.gene_ids()[g].clone(),
                mg.genes.row_sum[g].to_string(),
                mg.genes.nonzero_cells[g].to_string(),
                params.lambda[g].to_string(),
                params.lambda_clamped[g].to_string(),
            ]
        }),
    )?;
    write_rows(
        &dir.join("cells.csv"),
        &CELLS_HEADER,
        (0..m.n_cells()).map(|c| {
            [
                m.cell_ids()[c].clone(),
                mg.cell_totals[c].to_string(),
                params.nu[c].to_string(),
                params.nu_clamped[c].to_string(),
            ]
        }),
    )
}

pub fn write_dispersion(path: &Path, m: &CountMatrix, fit: &DispersionFit) -> Result<()> {
    write_rows(
        path,
        &["gene", "a", "residual", "negative_a", "fitted"],
        (0..fit.n_genes()).map(|g| {
            [
                m.gene_ids()[g].clone(),
                fit.a[g].to_string(),
                fit.residual[g].to_string(),
                (fit.a[g] < 0.0).to_string(),
                fit.fitted[g].to_string(),
            ]
        }),
    )
}

pub fn write_gdi(path: &Path, m: &CountMatrix, scores: &GdiScores, flagged: &[bool]) -> Result<()> {
    write_rows(
        path,
        &["gene", "S", "GDI", "flagged"],
        (0..scores.s.len()).map(|g| {
            [
                m.gene_ids()[g].clone(),
                scores.s[g].to_string(),
                scores.gdi[g].to_string(),
                flagged[g].to_string(),
            ]
        }),
    )
}

pub fn write_diffexp(path: &Path, m: &CountMatrix, results: &[DiffExpResult]) -> Result<()> {
    write_rows(
        path,
        &["gene", "W", "dof", "p"],
        results.iter().enumerate().map(|(g, r)| {
            [
                m.gene_ids()[g].clone(),
                r.w.to_string(),
                r.dof.to_string(),
                r.p_value.to_string(),
            ]
        }),
    )
}

/// Reads the named columns of a CSV file as strings, row by row.
pub fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == *n)
                .ok_or_else(|| Error::InvalidInput(format!("{}: no column '{n}'", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        out.push(idx.iter().map(|&i| rec.get(i).unwrap_or("").to_string()).collect());
    }
    Ok(out)
}

/// Reads one numeric column.
pub fn read_f64_column(path: &Path, name: &str) -> Result<Vec<f64>> {
    read_columns(path, &[name])?
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            row[0]
                .parse()
                .map_err(|_| Error::parse(path, i + 2, format!("'{}' is not a number", row[0])))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::estimate_average;

    #[test]
    fn params_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let m = CountMatrix::from_rows(&[vec![1, 0, 3], vec![2, 2, 0]]).unwrap();
        let p = estimate_average(&m).unwrap();
        write_params(dir.path(), &m, &p).unwrap();
        let nu = read_f64_column(&dir.path().join("cells.csv"), "nu").unwrap();
        assert_eq!(nu, p.nu);
        let ids = read_columns(&dir.path().join("genes.csv"), &["gene", "total"]).unwrap();
        assert_eq!(ids[1], vec!["g2".to_string(), "4".to_string()]);
        assert!(read_f64_column(&dir.path().join("cells.csv"), "missing").is_err());
    }
}
