//! Count-matrix file formats: MatrixMarket coordinate integer and dense TSV.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{default_cell_ids, default_gene_ids, CountMatrix};

const MM_BANNER: &str = "%%MatrixMarket matrix coordinate integer general";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    MatrixMarket,
    DenseTsv,
}

impl MatrixFormat {
    /// `.mtx` selects MatrixMarket; `.tsv`, `.txt` and `.tab` select dense TSV.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "mtx" | "mm" => Some(MatrixFormat::MatrixMarket),
            "tsv" | "txt" | "tab" => Some(MatrixFormat::DenseTsv),
            _ => None,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path, format: Option<MatrixFormat>) -> Result<CountMatrix> {
    let format = format.or_else(|| MatrixFormat::from_path(path)).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "cannot infer matrix format of {}; pass an explicit format",
            path.display()
        ))
    })?;
    match format {
        MatrixFormat::MatrixMarket => load_matrix_market(path),
        MatrixFormat::DenseTsv => load_dense_tsv(path),
    }
}

pub fn load_matrix_market(path: &Path) -> Result<CountMatrix> {
    read_matrix_market(open(path)?, path)
}

/// Parses a coordinate-format integer MatrixMarket stream.
///
/// Rows are genes and columns are cells. Ids are generated as `g1..gn`, `c1..cm`.
pub fn read_matrix_market<R: BufRead>(reader: R, path: &Path) -> Result<CountMatrix> {
    let mut lines = reader.lines().enumerate();
    let (_, banner) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "malformed header: empty file"))?;
    let banner = banner.map_err(|e| Error::io(path, e))?;
    let fields: Vec<String> = banner.split_whitespace().map(str::to_ascii_lowercase).collect();
    if fields.len() != 5
        || fields[0] != "%%matrixmarket"
        || fields[1] != "matrix"
        || fields[2] != "coordinate"
        || fields[3] != "integer"
        || fields[4] != "general"
    {
        return Err(Error::parse(
            path,
            1,
            format!("malformed header: expected '{MM_BANNER}'"),
        ));
    }

    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets: Vec<(u32, u32, u32)> = Vec::new();
    let mut entry_lines: Vec<usize> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let tok: Vec<&str> = t.split_whitespace().collect();
        match size {
            None => {
                let parsed: Option<Vec<usize>> = (tok.len() == 3)
                    .then(|| tok.iter().map(|s| s.parse().ok()).collect())
                    .flatten();
                let dims = parsed.ok_or_else(|| Error::parse(path, lineno, "malformed header: bad size line"))?;
                if dims[0] > u32::MAX as usize || dims[1] > u32::MAX as usize {
                    return Err(Error::parse(path, lineno, "matrix dimensions too large"));
                }
                size = Some((dims[0], dims[1], dims[2]));
                triplets.reserve(dims[2]);
                entry_lines.reserve(dims[2]);
            }
            Some((n, m, _)) => {
                if tok.len() != 3 {
                    return Err(Error::parse(path, lineno, "expected 'row col value'"));
                }
                let row: i64 = tok[0]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, "non-integer row index"))?;
                let col: i64 = tok[1]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, "non-integer column index"))?;
                let val: i64 = tok[2]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, "non-integer count"))?;
                if val < 0 {
                    return Err(Error::parse(path, lineno, "negative count"));
                }
                if val > u32::MAX as i64 {
                    return Err(Error::parse(path, lineno, "count too large"));
                }
                if row < 1 || row as usize > n || col < 1 || col as usize > m {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("index ({row}, {col}) out of range for {n}x{m} matrix"),
                    ));
                }
                triplets.push(((row - 1) as u32, (col - 1) as u32, val as u32));
                entry_lines.push(lineno);
            }
        }
    }
    let (n, m, nnz) = size.ok_or_else(|| Error::parse(path, 1, "malformed header: missing size line"))?;
    if triplets.len() != nnz {
        return Err(Error::parse(
            path,
            entry_lines.last().copied().unwrap_or(1),
            format!("header declares {nnz} entries but {} were found", triplets.len()),
        ));
    }

    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.sort_unstable_by_key(|&i| (triplets[i].0, triplets[i].1));
    for w in order.windows(2) {
        let (a, b) = (triplets[w[0]], triplets[w[1]]);
        if (a.0, a.1) == (b.0, b.1) {
            let line = entry_lines[w[0]].max(entry_lines[w[1]]);
            return Err(Error::parse(
                path,
                line,
                format!("duplicate entry ({}, {})", a.0 + 1, a.1 + 1),
            ));
        }
    }
    CountMatrix::from_triplets(default_gene_ids(n), default_cell_ids(m), triplets)
}

pub fn write_matrix_market(m: &CountMatrix, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_matrix_market_to(m, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_matrix_market_to<W: Write>(m: &CountMatrix, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{MM_BANNER}")?;
    writeln!(w, "{} {} {}", m.n_genes(), m.n_cells(), m.nnz())?;
    for g in 0..m.n_genes() {
        for (c, v) in m.row(g).iter() {
            writeln!(w, "{} {} {}", g + 1, c + 1, v)?;
        }
    }
    Ok(())
}

pub fn load_dense_tsv(path: &Path) -> Result<CountMatrix> {
    read_dense_tsv(open(path)?, path)
}

/// Parses a dense table: first row holds cell ids (optionally preceded by a
/// corner label), each following row is a gene id then one count per cell.
/// Fields are separated by tabs or spaces.
pub fn read_dense_tsv<R: BufRead>(reader: R, path: &Path) -> Result<CountMatrix> {
    let mut header: Option<(usize, Vec<String>)> = None;
    let mut gene_ids = Vec::new();
    let mut triplets = Vec::new();
    let mut n_cells: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        let Some((header_line, header_tok)) = &header else {
            header = Some((lineno, tok.iter().map(|s| s.to_string()).collect()));
            continue;
        };
        let values = tok.len() - 1;
        match n_cells {
            None => {
                if header_tok.len() != values && header_tok.len() != values + 1 {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!(
                            "ragged row: {values} counts but header on line {header_line} has {} fields",
                            header_tok.len()
                        ),
                    ));
                }
                n_cells = Some(values);
            }
            Some(expected) if expected != values => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("ragged row: {values} counts, expected {expected}"),
                ));
            }
            Some(_) => {}
        }
        let g = gene_ids.len() as u32;
        gene_ids.push(tok[0].to_string());
        for (c, s) in tok[1..].iter().enumerate() {
            let v: u64 = s.parse().map_err(|_| {
                if s.starts_with('-') && s[1..].parse::<u64>().is_ok() {
                    Error::parse(path, lineno, "negative count")
                } else {
                    Error::parse(path, lineno, format!("non-integer token '{s}'"))
                }
            })?;
            if v > u32::MAX as u64 {
                return Err(Error::parse(path, lineno, "count too large"));
            }
            if v > 0 {
                triplets.push((g, c as u32, v as u32));
            }
        }
    }
    let (_, header_tok) = header.ok_or_else(|| Error::parse(path, 1, "empty table"))?;
    let cell_ids = match n_cells {
        Some(nc) if header_tok.len() == nc + 1 => header_tok[1..].to_vec(),
        Some(_) => header_tok,
        None => header_tok[1..].to_vec(),
    };
    CountMatrix::from_triplets(gene_ids, cell_ids, triplets)
}

pub fn write_dense_tsv(m: &CountMatrix, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_dense_tsv_to(m, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dense_tsv_to<W: Write>(m: &CountMatrix, w: &mut W) -> std::io::Result<()> {
    write!(w, "gene")?;
    for c in m.cell_ids() {
        write!(w, "\t{c}")?;
    }
    writeln!(w)?;
    let mut row = vec![0u32; m.n_cells()];
    for g in 0..m.n_genes() {
        row.iter_mut().for_each(|v| *v = 0);
        for (c, v) in m.row(g).iter() {
            row[c] = v;
        }
        write!(w, "{}", m.gene_ids()[g])?;
        for v in &row {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads one identifier per non-empty line (first whitespace-separated field).
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for line in open(path)?.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Some(id) = line.split_whitespace().next() {
            ids.push(id.to_string());
        }
    }
    Ok(ids)
}

pub fn write_id_list(ids: &[String], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for id in ids {
        writeln!(w, "{id}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm(text: &str) -> Result<CountMatrix> {
        read_matrix_market(text.as_bytes(), Path::new("test.mtx"))
    }

    fn tsv(text: &str) -> Result<CountMatrix> {
        read_dense_tsv(text.as_bytes(), Path::new("test.tsv"))
    }

    #[test]
    fn mm_two_by_two() {
        let m = mm("%%MatrixMarket matrix coordinate integer general\n% comment\n2 2 2\n1 1 2\n2 2 2\n").unwrap();
        assert_eq!(m.to_dense(), vec![vec![2, 0], vec![0, 2]]);
    }

    #[test]
    fn mm_negative_value() {
        let err = mm("%%MatrixMarket matrix coordinate integer general\n2 2 1\n1 1 -1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("negative count"), "{msg}");
        assert!(msg.contains(":3:"), "{msg}");
    }

    #[test]
    fn mm_empty_coordinates() {
        let m = mm("%%MatrixMarket matrix coordinate integer general\n3 4 0\n").unwrap();
        assert_eq!(m.n_genes(), 3);
        assert_eq!(m.n_cells(), 4);
        assert_eq!(m.nnz(), 0);
    }

    #[test]
    fn mm_errors_carry_line_numbers() {
        let err = mm("%%MatrixMarket matrix coordinate real general\n1 1 1\n1 1 1\n").unwrap_err();
        assert!(err.to_string().contains("malformed header"));

        let err = mm("%%MatrixMarket matrix coordinate integer general\n2 2 1\n3 1 1\n").unwrap_err();
        assert!(err.to_string().contains(":3:") && err.to_string().contains("out of range"));

        let err = mm("%%MatrixMarket matrix coordinate integer general\n2 2 2\n1 1 1\n\n1 1 4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate") && msg.contains(":5:"), "{msg}");

        let err = mm("%%MatrixMarket matrix coordinate integer general\n2 2 3\n1 1 1\n").unwrap_err();
        assert!(err.to_string().contains("declares 3"));
    }

    #[test]
    fn tsv_single_gene() {
        let m = tsv("gene c1 c2 c3\ng1 0 5 1\n").unwrap();
        let row = m.row(0);
        assert_eq!(row.cells, &[1, 2]);
        assert_eq!(row.counts, &[5, 1]);
        assert_eq!(m.cell_ids(), &["c1", "c2", "c3"]);

        let m = tsv("c1\tc2\tc3\ng1\t0\t5\t1\n").unwrap();
        assert_eq!(m.cell_ids(), &["c1", "c2", "c3"]);
    }

    #[test]
    fn tsv_errors() {
        let err = tsv("gene c1 c2 c3 c4 c5\ng1 0 5 1\n").unwrap_err();
        assert!(err.to_string().contains("ragged"));
        let err = tsv("gene c1 c2\ng1 0 5\ng2 1\n").unwrap_err();
        assert!(err.to_string().contains("ragged") && err.to_string().contains(":3:"));
        let err = tsv("gene c1 c2\ng1 2.5 1\n").unwrap_err();
        assert!(err.to_string().contains("non-integer"));
        let err = tsv("gene c1 c2\ng1 -2 1\n").unwrap_err();
        assert!(err.to_string().contains("negative count"));
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(
            MatrixFormat::from_path(Path::new("a.mtx")),
            Some(MatrixFormat::MatrixMarket)
        );
        assert_eq!(
            MatrixFormat::from_path(Path::new("a.TSV")),
            Some(MatrixFormat::DenseTsv)
        );
        assert_eq!(MatrixFormat::from_path(Path::new("a.h5")), None);
    }
}
