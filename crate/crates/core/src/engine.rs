//! All-pairs co-expression engine.
//!
//! Genes are grouped into tiles; each pair of tiles is an independent work
//! unit. Joint nonzero counts come from AND/popcount over per-gene bitsets
//! and Σρ₁ρ₂ from the shared dot kernel, so every emitted result equals the
//! per-pair functions in [`crate::coex`] exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::coex::{check_aligned, coex_stats, expected_from_parts, observed_from_parts, CoexResult, CoexTable};
use crate::error::{Error, Result};
use crate::kernels::{self, BitRows};
use crate::matrix::CountMatrix;
use crate::zero::RhoMatrix;

pub const DEFAULT_TILE: usize = 256;
/// Above this many buffered pairs the sorted writers log a memory warning.
const LARGE_EXPORT: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairResult {
    pub g1: u32,
    pub g2: u32,
    pub table: CoexTable,
    pub stats: CoexResult,
}

/// Consumer of result batches. Called concurrently from worker threads in
/// no particular order.
pub trait PairSink: Sync {
    fn accept(&self, batch: &[PairResult]) -> Result<()>;
}

impl<F> PairSink for F
where
    F: Fn(&[PairResult]) -> Result<()> + Sync,
{
    fn accept(&self, batch: &[PairResult]) -> Result<()> {
        self(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    pub tile: usize,
    /// Worker count; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            tile: DEFAULT_TILE,
            threads: None,
        }
    }
}

impl EngineOptions {
    fn validate(&self) -> Result<()> {
        if self.tile == 0 {
            return Err(Error::InvalidArgument("tile size must be >= 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidArgument("thread count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Runs `f` on a dedicated pool when a thread count is given.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Read-only per-gene data shared by all workers.
struct Prepared<'a> {
    bits: BitRows,
    nnz: Vec<u64>,
    rho: &'a RhoMatrix,
    rho_sum: Vec<f64>,
    m: u64,
}

impl<'a> Prepared<'a> {
    fn new(mat: &CountMatrix, rho: &'a RhoMatrix) -> Result<Self> {
        check_aligned(mat, rho)?;
        let n = mat.n_genes();
        Ok(Self {
            bits: BitRows::from_matrix(mat),
            nnz: (0..n).map(|g| mat.row(g).nnz() as u64).collect(),
            rho,
            rho_sum: (0..n).into_par_iter().map(|g| kernels::sum(rho.row(g))).collect(),
            m: mat.n_cells() as u64,
        })
    }

    #[inline]
    fn pair(&self, i: usize, j: usize) -> PairResult {
        let o11 = kernels::and_popcount(self.bits.row(i), self.bits.row(j));
        let e11 = kernels::dot(self.rho.row(i), self.rho.row(j));
        let table = CoexTable {
            observed: observed_from_parts(o11, self.nnz[i], self.nnz[j], self.m),
            expected: expected_from_parts(e11, self.rho_sum[i], self.rho_sum[j], self.m as f64),
            m: self.m,
        };
        PairResult {
            g1: i as u32,
            g2: j as u32,
            table,
            stats: coex_stats(&table),
        }
    }
}

fn deliver(sink: &dyn PairSink, batch: &[PairResult], emitted: &AtomicU64) -> Result<()> {
    match sink.accept(batch) {
        Ok(()) => {
            emitted.fetch_add(batch.len() as u64, Ordering::Relaxed);
            Ok(())
        }
        Err(e) => Err(Error::SinkAborted {
            emitted: emitted.load(Ordering::Relaxed),
            msg: e.to_string(),
        }),
    }
}

/// Emits every unordered pair g1 < g2 exactly once. Returns the pair count.
pub fn pairwise_coex(mat: &CountMatrix, rho: &RhoMatrix, opts: EngineOptions, sink: &dyn PairSink) -> Result<u64> {
    opts.validate()?;
    let n = mat.n_genes();
    if n > u32::MAX as usize {
        return Err(Error::InvalidInput(format!(
            "{n} genes exceed the engine's index range"
        )));
    }
    let prep = Prepared::new(mat, rho)?;
    let tiles = n.div_ceil(opts.tile);
    let tile_pairs: Vec<(usize, usize)> = (0..tiles).flat_map(|a| (a..tiles).map(move |b| (a, b))).collect();
    let emitted = AtomicU64::new(0);
    let run = || {
        tile_pairs.par_iter().try_for_each(|&(ta, tb)| {
            let ra = ta * opts.tile..((ta + 1) * opts.tile).min(n);
            let rb = tb * opts.tile..((tb + 1) * opts.tile).min(n);
            let mut batch = Vec::with_capacity(ra.len() * rb.len());
            for i in ra {
                for j in rb.clone() {
                    if j > i {
                        batch.push(prep.pair(i, j));
                    }
                }
            }
            if batch.is_empty() {
                return Ok(());
            }
            deliver(sink, &batch, &emitted)
        })
    };
    with_threads(opts.threads, run)??;
    Ok(emitted.into_inner())
}

/// Emits results for an explicit pair list, in batches of `opts.tile²` pairs.
pub fn listed_coex(
    mat: &CountMatrix,
    rho: &RhoMatrix,
    pairs: &[(usize, usize)],
    opts: EngineOptions,
    sink: &dyn PairSink,
) -> Result<u64> {
    opts.validate()?;
    let n = mat.n_genes();
    for &(a, b) in pairs {
        if a >= n || b >= n || a == b {
            return Err(Error::InvalidArgument(format!("invalid gene pair ({a}, {b})")));
        }
    }
    let prep = Prepared::new(mat, rho)?;
    let emitted = AtomicU64::new(0);
    let run = || {
        pairs.par_chunks(opts.tile * opts.tile).try_for_each(|chunk| {
            let batch: Vec<PairResult> = chunk.iter().map(|&(a, b)| prep.pair(a, b)).collect();
            deliver(sink, &batch, &emitted)
        })
    };
    with_threads(opts.threads, run)??;
    Ok(emitted.into_inner())
}

/// Collects every result; [`VecSink::into_sorted`] restores a stable order.
#[derive(Debug, Default)]
pub struct VecSink {
    results: Mutex<Vec<PairResult>>,
}

impl VecSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_sorted(self) -> Vec<PairResult> {
        let mut v = self.results.into_inner().unwrap_or_else(|p| p.into_inner());
        v.sort_unstable_by_key(|r| (r.g1, r.g2));
        v
    }
}

impl PairSink for VecSink {
    fn accept(&self, batch: &[PairResult]) -> Result<()> {
        let mut v = self.results.lock().unwrap_or_else(|p| p.into_inner());
        if v.len() as u64 + batch.len() as u64 > LARGE_EXPORT && (v.len() as u64) <= LARGE_EXPORT {
            log::warn!("buffering more than {LARGE_EXPORT} pair results in memory");
        }
        v.extend_from_slice(batch);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairFormat {
    Csv,
    Binary,
}

impl std::str::FromStr for PairFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "binary" => Ok(Self::Binary),
            _ => Err(Error::InvalidArgument(format!(
                "unknown output format '{s}' (csv, binary)"
            ))),
        }
    }
}

pub const PAIR_CSV_HEADER: &str = "g1,g2,O11,O10,O01,O00,e11,e10,e01,e00,W,R,p";
pub const PAIR_MAGIC: &[u8; 8] = b"SCRAWCOX";

/// Writes sorted results as CSV, naming genes by id.
pub fn write_pairs_csv<W: Write>(out: W, results: &[PairResult], gene_ids: &[String]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PAIR_CSV_HEADER.split(','))?;
    for r in results {
        let (o, e, s) = (&r.table.observed, &r.table.expected, &r.stats);
        w.write_record([
            gene_ids[r.g1 as usize].as_str(),
            gene_ids[r.g2 as usize].as_str(),
            &o[0].to_string(),
            &o[1].to_string(),
            &o[2].to_string(),
            &o[3].to_string(),
            &e[0].to_string(),
            &e[1].to_string(),
            &e[2].to_string(),
            &e[3].to_string(),
            &s.w.to_string(),
            &s.r.to_string(),
            &s.p_value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Little-endian records after an 8-byte magic and a u64 record count:
/// g1, g2 as u32; four observed u64; four expected, W, R, p as f64.
pub fn write_pairs_binary<W: Write>(out: W, results: &[PairResult]) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    w.write_all(PAIR_MAGIC)?;
    w.write_all(&(results.len() as u64).to_le_bytes())?;
    for r in results {
        w.write_all(&r.g1.to_le_bytes())?;
        w.write_all(&r.g2.to_le_bytes())?;
        for o in r.table.observed {
            w.write_all(&o.to_le_bytes())?;
        }
        for e in r.table.expected {
            w.write_all(&e.to_le_bytes())?;
        }
        for v in [r.stats.w, r.stats.r, r.stats.p_value] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

/// Reads a file written by [`write_pairs_binary`].
pub fn read_pairs_binary(path: &Path) -> Result<Vec<PairResult>> {
    let mut r = std::io::BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != PAIR_MAGIC {
        return Err(Error::InvalidInput(format!(
            "{}: not a pair result file",
            path.display()
        )));
    }
    let mut b8 = [0u8; 8];
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b8).map_err(io)?;
    let count = u64::from_le_bytes(b8);
    let mut out = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        r.read_exact(&mut b4).map_err(io)?;
        let g1 = u32::from_le_bytes(b4);
        r.read_exact(&mut b4).map_err(io)?;
        let g2 = u32::from_le_bytes(b4);
        let mut observed = [0u64; 4];
        for o in &mut observed {
            r.read_exact(&mut b8).map_err(io)?;
            *o = u64::from_le_bytes(b8);
        }
        let mut f = [0f64; 7];
        for v in &mut f {
            r.read_exact(&mut b8).map_err(io)?;
            *v = f64::from_le_bytes(b8);
        }
        out.push(PairResult {
            g1,
            g2,
            table: CoexTable {
                observed,
                expected: [f[0], f[1], f[2], f[3]],
                m: observed.iter().sum(),
            },
            stats: CoexResult {
                w: f[4],
                r: f[5],
                p_value: f[6],
            },
        });
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, format: PairFormat, results: &[PairResult], gene_ids: &[String]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    match format {
        PairFormat::Csv => write_pairs_csv(f, results, gene_ids).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
        }),
        PairFormat::Binary => write_pairs_binary(f, results).map_err(|e| Error::io(path, e)),
    }
}
