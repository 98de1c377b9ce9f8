//! Differential expression across conditions and the Global
//! Differentiation Index (GDI).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::BufRead;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::chi2::{chi2_isf, chi2_ln_sf, chi2_sf};
use crate::engine::{PairResult, PairSink};
use crate::error::{Error, Result};
use crate::matrix::CountMatrix;
use crate::zero::RhoMatrix;

pub const DEFAULT_ALPHA: f64 = 1e-3;
pub const DEFAULT_GDI_QUANTILE: f64 = 1e-4;
pub const DEFAULT_GDI_FLOOR: f64 = -10.0;

/// Cells split into k ≥ 2 non-empty conditions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionPartition {
    assignment: Vec<u32>,
    labels: Vec<String>,
    sizes: Vec<usize>,
}

impl ConditionPartition {
    /// `assignment[c]` is the 0-based condition of cell c.
    pub fn new(assignment: Vec<u32>, labels: Vec<String>) -> Result<Self> {
        let k = labels.len();
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 conditions, got {k}")));
        }
        let mut sizes = vec![0usize; k];
        for &a in &assignment {
            let slot = sizes
                .get_mut(a as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("condition index {a} >= {k}")))?;
            *slot += 1;
        }
        if let Some(j) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidInput(format!("condition '{}' has no cells", labels[j])));
        }
        Ok(Self {
            assignment,
            labels,
            sizes,
        })
    }

    /// Conditions are numbered in sorted label order.
    pub fn from_labels<S: AsRef<str>>(per_cell: &[S]) -> Result<Self> {
        let mut index: BTreeMap<&str, u32> = per_cell.iter().map(|s| (s.as_ref(), 0)).collect();
        for (i, v) in index.values_mut().enumerate() {
            *v = i as u32;
        }
        let assignment = per_cell.iter().map(|s| index[s.as_ref()]).collect();
        let labels = index.keys().map(|s| s.to_string()).collect();
        Self::new(assignment, labels)
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cells(&self) -> usize {
        self.assignment.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn condition_of(&self, c: usize) -> usize {
        self.assignment[c] as usize
    }
}

/// Reads `cell<TAB>condition` lines and orders them by `cell_ids`. Blank
/// lines and `#` comments are skipped; a first line naming an unknown cell
/// is taken as a header.
pub fn read_conditions(path: &Path, cell_ids: &[String]) -> Result<ConditionPartition> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let pos: HashMap<&str, usize> = cell_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut per_cell: Vec<Option<String>> = vec![None; cell_ids.len()];
    let mut first = true;
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split('\t').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::parse(path, i + 1, "expected two tab-separated columns"));
        }
        let was_first = std::mem::replace(&mut first, false);
        let Some(&c) = pos.get(fields[0]) else {
            if was_first {
                continue;
            }
            return Err(Error::parse(path, i + 1, format!("unknown cell '{}'", fields[0])));
        };
        if per_cell[c].replace(fields[1].to_string()).is_some() {
            return Err(Error::parse(path, i + 1, format!("cell '{}' listed twice", fields[0])));
        }
    }
    let labels: Vec<String> = per_cell
        .into_iter()
        .enumerate()
        .map(|(c, l)| l.ok_or_else(|| Error::InvalidInput(format!("cell '{}' has no condition", cell_ids[c]))))
        .collect::<Result<_>>()?;
    ConditionPartition::from_labels(&labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffExpResult {
    pub w: f64,
    pub dof: u32,
    pub p_value: f64,
    /// Per condition: (expressed, not expressed).
    pub observed: Vec<[u64; 2]>,
    pub expected: Vec<[f64; 2]>,
}

/// Expression/condition test for one gene: W against χ²(k − 1).
pub fn diff_expression(m: &CountMatrix, rho: &RhoMatrix, part: &ConditionPartition, g: usize) -> Result<DiffExpResult> {
    crate::coex::check_aligned(m, rho)?;
    if part.n_cells() != m.n_cells() {
        return Err(Error::Dimension(format!(
            "partition covers {} cells, matrix has {}",
            part.n_cells(),
            m.n_cells()
        )));
    }
    if g >= m.n_genes() {
        return Err(Error::InvalidArgument(format!("gene {g} out of range")));
    }
    let k = part.k();
    let mut expressed = vec![0u64; k];
    for &c in m.row(g).cells {
        expressed[part.condition_of(c as usize)] += 1;
    }
    let mut rho_sum = vec![0.0f64; k];
    for (c, &r) in rho.row(g).iter().enumerate() {
        rho_sum[part.condition_of(c)] += r;
    }
    let mut w = 0.0;
    let mut observed = Vec::with_capacity(k);
    let mut expected = Vec::with_capacity(k);
    for j in 0..k {
        let size = part.sizes()[j];
        let o = [expressed[j], size as u64 - expressed[j]];
        let e = [rho_sum[j], (size as f64 - rho_sum[j]).max(0.0)];
        for i in 0..2 {
            let dev = o[i] as f64 - e[i];
            w += dev * dev / e[i].max(1.0);
        }
        observed.push(o);
        expected.push(e);
    }
    let dof = (k - 1) as u32;
    Ok(DiffExpResult {
        w,
        dof,
        p_value: chi2_sf(w, dof)?,
        observed,
        expected,
    })
}

pub fn diff_expression_all(m: &CountMatrix, rho: &RhoMatrix, part: &ConditionPartition) -> Result<Vec<DiffExpResult>> {
    (0..m.n_genes())
        .into_par_iter()
        .map(|g| diff_expression(m, rho, part, g))
        .collect()
}

/// Per-gene high percentile S of the R² values and its GDI.
#[derive(Debug, Clone, PartialEq)]
pub struct GdiScores {
    pub s: Vec<f64>,
    pub gdi: Vec<f64>,
}

/// ln(−ln P(χ²₁ > s)), evaluated through the log survival function so it
/// stays finite far into the tail. Non-finite values (s = 0) become `floor`.
pub fn gdi_from_s(s: f64, floor: f64) -> f64 {
    if !(s > 0.0) {
        return floor;
    }
    match chi2_ln_sf(s, 1) {
        Ok(l) if l < 0.0 => {
            let g = (-l).ln();
            if g.is_finite() {
                g
            } else {
                floor
            }
        }
        _ => floor,
    }
}

/// 1-based nearest rank of the (1 − α) percentile among `n` values.
pub fn percentile_rank(n: usize, alpha: f64) -> usize {
    // The guard absorbs rounding in α·n when it should be an integer.
    let above = (alpha * n as f64 + 1e-9).floor() as usize;
    n.saturating_sub(above).clamp(1, n.max(1))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} not in (0, 1)")));
    }
    Ok(())
}

/// Streaming per-gene top-K of R², sharded by gene index.
pub struct GdiAccumulator {
    n: usize,
    keep: usize,
    shards: Vec<Mutex<Shard>>,
}

struct Shard {
    // R² is non-negative, so its bit pattern orders like the value.
    heaps: Vec<BinaryHeap<Reverse<u64>>>,
    seen: Vec<u64>,
}

const SHARDS: usize = 64;

impl GdiAccumulator {
    pub fn new(n_genes: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if n_genes < 2 {
            return Err(Error::InvalidArgument("GDI needs at least 2 genes".into()));
        }
        let per_gene = n_genes - 1;
        let keep = per_gene - percentile_rank(per_gene, alpha) + 1;
        let shards = (0..SHARDS.min(n_genes))
            .map(|s| {
                let owned = (n_genes - s).div_ceil(SHARDS);
                Mutex::new(Shard {
                    heaps: (0..owned).map(|_| BinaryHeap::with_capacity(keep + 1)).collect(),
                    seen: vec![0; owned],
                })
            })
            .collect();
        Ok(Self {
            n: n_genes,
            keep,
            shards,
        })
    }

    /// Number of largest values retained per gene.
    pub fn keep(&self) -> usize {
        self.keep
    }

    fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn push_values(&self, items: &[(u32, u32, f64)]) -> Result<()> {
        let ns = self.shard_count();
        let mut buckets: Vec<Vec<(u32, f64)>> = vec![Vec::new(); ns];
        for &(a, b, r2) in items {
            if a as usize >= self.n || b as usize >= self.n || a == b {
                return Err(Error::InvalidInput(format!("invalid pair ({a}, {b}) in GDI stream")));
            }
            if !(r2 >= 0.0) {
                return Err(Error::InvalidInput(format!("R² value {r2} for pair ({a}, {b})")));
            }
            buckets[a as usize % ns].push((a, r2));
            buckets[b as usize % ns].push((b, r2));
        }
        for (s, bucket) in buckets.into_iter().enumerate() {
            if bucket.is_empty() {
                continue;
            }
            let mut shard = self.shards[s].lock().unwrap_or_else(|p| p.into_inner());
            for (g, r2) in bucket {
                let slot = g as usize / ns;
                shard.seen[slot] += 1;
                let heap = &mut shard.heaps[slot];
                let bits = r2.to_bits();
                if heap.len() < self.keep {
                    heap.push(Reverse(bits));
                } else if heap.peek().is_some_and(|top| bits > top.0) {
                    heap.pop();
                    heap.push(Reverse(bits));
                }
            }
        }
        Ok(())
    }

    /// Fails unless every gene saw exactly n − 1 values.
    pub fn finish(self, floor: f64) -> Result<GdiScores> {
        let ns = self.shard_count();
        let mut s = vec![0.0; self.n];
        let expect = (self.n - 1) as u64;
        for (k, shard) in self.shards.into_iter().enumerate() {
            let shard = shard.into_inner().unwrap_or_else(|p| p.into_inner());
            for (slot, (heap, seen)) in shard.heaps.into_iter().zip(shard.seen).enumerate() {
                let g = slot * ns + k;
                if seen != expect {
                    return Err(Error::InvalidInput(format!(
                        "gene {g} received {seen} pair values, expected {expect}"
                    )));
                }
                s[g] = heap.peek().map_or(0.0, |top| f64::from_bits(top.0));
            }
        }
        let gdi = s.iter().map(|&v| gdi_from_s(v, floor)).collect();
        Ok(GdiScores { s, gdi })
    }
}

impl PairSink for GdiAccumulator {
    fn accept(&self, batch: &[PairResult]) -> Result<()> {
        let items: Vec<(u32, u32, f64)> = batch.iter().map(|r| (r.g1, r.g2, r.stats.r * r.stats.r)).collect();
        self.push_values(&items)
    }
}

/// GDI from an in-memory stream of (g1, g2, R) covering each pair once.
pub fn gdi_scores<I>(results: I, n_genes: usize, alpha: f64, floor: f64) -> Result<GdiScores>
where
    I: IntoIterator<Item = (u32, u32, f64)>,
{
    let acc = GdiAccumulator::new(n_genes, alpha)?;
    let mut buf = Vec::with_capacity(4096);
    for (a, b, r) in results {
        buf.push((a, b, r * r));
        if buf.len() == buf.capacity() {
            acc.push_values(&buf)?;
            buf.clear();
        }
    }
    acc.push_values(&buf)?;
    acc.finish(floor)
}

/// Flags genes whose S exceeds the χ²₁ upper `quantile` point.
pub fn gdi_threshold_test(scores: &GdiScores, quantile: f64) -> Result<Vec<bool>> {
    let cut = chi2_isf(quantile, 1)?;
    Ok(scores.s.iter().map(|&s| s > cut).collect())
}
