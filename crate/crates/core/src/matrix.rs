//! Sparse genes × cells read-count matrix.
//!
//! Rows are genes, stored in compressed sparse row form. Only counts ≥ 1 are
//! stored; every absent entry is exactly zero.

use std::collections::HashSet;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    gene_ids: Vec<String>,
    cell_ids: Vec<String>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<u32>,
}

/// Borrowed view of one gene row: strictly increasing cell indices and their counts.
#[derive(Debug, Clone, Copy)]
pub struct SparseRow<'a> {
    pub cells: &'a [u32],
    pub counts: &'a [u32],
}

impl SparseRow<'_> {
    pub fn nnz(&self) -> usize {
        self.cells.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.cells.iter().map(|&c| c as usize).zip(self.counts.iter().copied())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&v| v as u64).sum()
    }
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate {what} id '{id}'")));
        }
    }
    Ok(())
}

pub fn default_gene_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("g{i}")).collect()
}

pub fn default_cell_ids(m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("c{i}")).collect()
}

impl CountMatrix {
    /// Builds a matrix from `(gene, cell, count)` triplets in any order.
    ///
    /// Zero counts are dropped. A repeated coordinate is an error.
    pub fn from_triplets(
        gene_ids: Vec<String>,
        cell_ids: Vec<String>,
        mut triplets: Vec<(u32, u32, u32)>,
    ) -> Result<Self> {
        check_unique(&gene_ids, "gene")?;
        check_unique(&cell_ids, "cell")?;
        let n = gene_ids.len();
        let m = cell_ids.len();
        if m > u32::MAX as usize {
            return Err(Error::InvalidInput("too many cells".into()));
        }
        for &(g, c, _) in &triplets {
            if g as usize >= n || c as usize >= m {
                return Err(Error::InvalidInput(format!(
                    "entry ({g}, {c}) out of range for {n}x{m} matrix"
                )));
            }
        }
        triplets.sort_unstable_by_key(|&(g, c, _)| (g, c));
        if let Some(w) = triplets.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::InvalidInput(format!("duplicate entry ({}, {})", w[0].0, w[0].1)));
        }
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals = Vec::with_capacity(triplets.len());
        for &(g, c, v) in &triplets {
            if v == 0 {
                continue;
            }
            row_ptr[g as usize + 1] += 1;
            cols.push(c);
            vals.push(v);
        }
        for g in 0..n {
            row_ptr[g + 1] += row_ptr[g];
        }
        Ok(Self {
            gene_ids,
            cell_ids,
            row_ptr,
            cols,
            vals,
        })
    }

    /// Builds a matrix from dense rows (one per gene).
    pub fn from_dense(gene_ids: Vec<String>, cell_ids: Vec<String>, rows: &[Vec<u32>]) -> Result<Self> {
        if rows.len() != gene_ids.len() {
            return Err(Error::Dimension(format!(
                "{} rows for {} gene ids",
                rows.len(),
                gene_ids.len()
            )));
        }
        let m = cell_ids.len();
        let mut triplets = Vec::new();
        for (g, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Dimension(format!(
                    "row {g} has {} values for {m} cells",
                    row.len()
                )));
            }
            for (c, &v) in row.iter().enumerate() {
                if v > 0 {
                    triplets.push((g as u32, c as u32, v));
                }
            }
        }
        Self::from_triplets(gene_ids, cell_ids, triplets)
    }

    /// Dense constructor with generated ids `g1..`, `c1..`.
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        Self::from_dense(default_gene_ids(rows.len()), default_cell_ids(m), rows)
    }

    pub(crate) fn from_csr_parts(
        gene_ids: Vec<String>,
        cell_ids: Vec<String>,
        row_ptr: Vec<usize>,
        cols: Vec<u32>,
        vals: Vec<u32>,
    ) -> Self {
        debug_assert_eq!(row_ptr.len(), gene_ids.len() + 1);
        debug_assert!(vals.iter().all(|&v| v > 0));
        Self {
            gene_ids,
            cell_ids,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn set_ids(&mut self, gene_ids: Vec<String>, cell_ids: Vec<String>) -> Result<()> {
        if gene_ids.len() != self.n_genes() || cell_ids.len() != self.n_cells() {
            return Err(Error::Dimension(format!(
                "{}x{} ids for a {}x{} matrix",
                gene_ids.len(),
                cell_ids.len(),
                self.n_genes(),
                self.n_cells()
            )));
        }
        check_unique(&gene_ids, "gene")?;
        check_unique(&cell_ids, "cell")?;
        self.gene_ids = gene_ids;
        self.cell_ids = cell_ids;
        Ok(())
    }

    pub fn row(&self, g: usize) -> SparseRow<'_> {
        let (lo, hi) = (self.row_ptr[g], self.row_ptr[g + 1]);
        SparseRow {
            cells: &self.cols[lo..hi],
            counts: &self.vals[lo..hi],
        }
    }

    pub fn get(&self, g: usize, c: usize) -> u32 {
        let row = self.row(g);
        match row.cells.binary_search(&(c as u32)) {
            Ok(i) => row.counts[i],
            Err(_) => 0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<u32>> {
        (0..self.n_genes())
            .map(|g| {
                let mut row = vec![0; self.n_cells()];
                for (c, v) in self.row(g).iter() {
                    row[c] = v;
                }
                row
            })
            .collect()
    }

    /// Cells × genes matrix with the same entries.
    pub fn transpose(&self) -> CountMatrix {
        let m = self.n_cells();
        let mut row_ptr = vec![0usize; m + 1];
        for &c in &self.cols {
            row_ptr[c as usize + 1] += 1;
        }
        for c in 0..m {
            row_ptr[c + 1] += row_ptr[c];
        }
        let mut next = row_ptr.clone();
        let mut cols = vec![0u32; self.nnz()];
        let mut vals = vec![0u32; self.nnz()];
        // Genes are visited in increasing order, so every transposed row stays sorted.
        for g in 0..self.n_genes() {
            for (c, v) in self.row(g).iter() {
                let slot = next[c];
                cols[slot] = g as u32;
                vals[slot] = v;
                next[c] += 1;
            }
        }
        CountMatrix {
            gene_ids: self.cell_ids.clone(),
            cell_ids: self.gene_ids.clone(),
            row_ptr,
            cols,
            vals,
        }
    }

    /// Keeps the listed genes, in the given order.
    pub fn select_genes(&self, keep: &[usize]) -> CountMatrix {
        let mut row_ptr = Vec::with_capacity(keep.len() + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for &g in keep {
            let row = self.row(g);
            cols.extend_from_slice(row.cells);
            vals.extend_from_slice(row.counts);
            row_ptr.push(cols.len());
        }
        CountMatrix {
            gene_ids: keep.iter().map(|&g| self.gene_ids[g].clone()).collect(),
            cell_ids: self.cell_ids.clone(),
            row_ptr,
            cols,
            vals,
        }
    }

    /// Keeps the listed cells (strictly increasing indices).
    pub fn select_cells(&self, keep: &[usize]) -> CountMatrix {
        debug_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        let mut remap = vec![u32::MAX; self.n_cells()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new as u32;
        }
        let mut row_ptr = Vec::with_capacity(self.n_genes() + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for g in 0..self.n_genes() {
            for (c, v) in self.row(g).iter() {
                let nc = remap[c];
                if nc != u32::MAX {
                    cols.push(nc);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        CountMatrix {
            gene_ids: self.gene_ids.clone(),
            cell_ids: keep.iter().map(|&c| self.cell_ids[c].clone()).collect(),
            row_ptr,
            cols,
            vals,
        }
    }
}

/// Per-gene totals and zero/nonzero cell counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneMarginals {
    pub row_sum: Vec<u64>,
    pub nonzero_cells: Vec<usize>,
    pub zero_cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Marginals {
    pub genes: GeneMarginals,
    pub cell_totals: Vec<u64>,
    pub grand_total: u64,
}

impl Marginals {
    pub fn gene_mean(&self, g: usize) -> f64 {
        self.genes.row_sum[g] as f64 / self.cell_totals.len() as f64
    }

    pub fn cell_mean(&self, c: usize) -> f64 {
        self.cell_totals[c] as f64 / self.genes.row_sum.len() as f64
    }

    pub fn grand_mean(&self) -> f64 {
        self.grand_total as f64 / (self.cell_totals.len() as f64 * self.genes.row_sum.len() as f64)
    }
}

pub fn marginals(m: &CountMatrix) -> Marginals {
    let n_cells = m.n_cells();
    let mut row_sum = Vec::with_capacity(m.n_genes());
    let mut nonzero_cells = Vec::with_capacity(m.n_genes());
    let mut zero_cells = Vec::with_capacity(m.n_genes());
    let mut cell_totals = vec![0u64; n_cells];
    for g in 0..m.n_genes() {
        let row = m.row(g);
        let mut total = 0u64;
        for (c, v) in row.iter() {
            total += v as u64;
            cell_totals[c] += v as u64;
        }
        row_sum.push(total);
        nonzero_cells.push(row.nnz());
        zero_cells.push(n_cells - row.nnz());
    }
    let grand_total = row_sum.iter().sum();
    Marginals {
        genes: GeneMarginals {
            row_sum,
            nonzero_cells,
            zero_cells,
        },
        cell_totals,
        grand_total,
    }
}

#[derive(Debug, Clone)]
pub struct FilteredMatrix {
    pub matrix: CountMatrix,
    /// Original index of every kept gene.
    pub kept: Vec<usize>,
    pub warning: Option<String>,
}

/// Drops genes whose total count is below `min_total`.
pub fn filter_genes(m: &CountMatrix, min_total: u64) -> Result<FilteredMatrix> {
    if min_total < 1 {
        return Err(Error::InvalidArgument("min_total must be at least 1".into()));
    }
    let kept: Vec<usize> = (0..m.n_genes()).filter(|&g| m.row(g).total() >= min_total).collect();
    let warning = kept
        .is_empty()
        .then(|| format!("no gene has total count >= {min_total}; result is empty"));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(FilteredMatrix {
        matrix: m.select_genes(&kept),
        kept,
        warning,
    })
}
