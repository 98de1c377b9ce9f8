//! Inner loops shared by the per-pair and all-pairs code paths.
//!
//! Both paths must call these functions on the same inputs so that their
//! floating-point results agree bit for bit; the lane layout and the order
//! of the final reduction are part of the contract.

use crate::matrix::{CountMatrix, SparseRow};

const LANES: usize = 8;

/// Dot product with eight independent accumulators, reduced pairwise.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot of unequal lengths");
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    let (ah, at) = a.split_at(chunks * LANES);
    let (bh, bt) = b.split_at(chunks * LANES);
    for (x, y) in ah.chunks_exact(LANES).zip(bh.chunks_exact(LANES)) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    for (k, (x, y)) in at.iter().zip(bt).enumerate() {
        acc[k] += x * y;
    }
    reduce(acc)
}

/// Sum with the same lane layout as [`dot`].
#[inline]
pub fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    let (ah, at) = a.split_at(chunks * LANES);
    for x in ah.chunks_exact(LANES) {
        for k in 0..LANES {
            acc[k] += x[k];
        }
    }
    for (k, x) in at.iter().enumerate() {
        acc[k] += x;
    }
    reduce(acc)
}

#[inline]
fn reduce(acc: [f64; LANES]) -> f64 {
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    s0 + s1
}

/// Number of cells where both sparse rows are nonzero (merge intersection).
pub fn sparse_intersection(a: SparseRow<'_>, b: SparseRow<'_>) -> u64 {
    let (mut i, mut j, mut n) = (0, 0, 0u64);
    let (x, y) = (a.cells, b.cells);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// One bit per cell marking a nonzero read, 64 cells per word.
#[derive(Debug, Clone)]
pub struct BitRows {
    words: usize,
    data: Vec<u64>,
}

impl BitRows {
    pub fn from_matrix(m: &CountMatrix) -> Self {
        let words = m.n_cells().div_ceil(64);
        let mut data = vec![0u64; words * m.n_genes()];
        for g in 0..m.n_genes() {
            let row = &mut data[g * words..(g + 1) * words];
            for &c in m.row(g).cells {
                row[c as usize / 64] |= 1u64 << (c % 64);
            }
        }
        Self { words, data }
    }

    pub fn row(&self, g: usize) -> &[u64] {
        &self.data[g * self.words..(g + 1) * self.words]
    }
}

#[inline]
pub fn and_popcount(a: &[u64], b: &[u64]) -> u64 {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones() as u64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_and_sum_match_exact_integers() {
        for n in [0usize, 1, 7, 8, 9, 31, 100] {
            let a: Vec<f64> = (0..n).map(|i| (i % 5) as f64).collect();
            let b: Vec<f64> = (0..n).map(|i| (i % 3) as f64 + 1.0).collect();
            let expect: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert_eq!(dot(&a, &b), expect);
            assert_eq!(sum(&a), a.iter().sum::<f64>());
        }
    }

    #[test]
    fn bitset_intersection_matches_merge() {
        let m = CountMatrix::from_rows(&[
            (0..130).map(|c| (c % 3 == 0) as u32).collect(),
            (0..130).map(|c| (c % 5 == 0) as u32 * 2).collect(),
        ])
        .unwrap();
        let bits = BitRows::from_matrix(&m);
        let merged = sparse_intersection(m.row(0), m.row(1));
        assert_eq!(and_popcount(bits.row(0), bits.row(1)), merged);
        // Multiples of 15 in 0..130.
        assert_eq!(merged, 9);
    }
}
