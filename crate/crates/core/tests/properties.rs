//! Property tests for the invariants that span modules.

use std::io::Cursor;
use std::path::Path;

use proptest::prelude::*;

use scraw::chi2::{chi2_cdf, chi2_sf};
use scraw::coex::{coex_stats, coex_table};
use scraw::downstream::gdi_from_s;
use scraw::engine::{pairwise_coex, EngineOptions, VecSink};
use scraw::estimate::EstimatorKind;
use scraw::io::{read_dense_tsv, read_matrix_market, write_dense_tsv_to, write_matrix_market_to};
use scraw::matrix::{filter_genes, marginals};
use scraw::pipeline::{fit_model, in_pool};
use scraw::special::{phi, psi, tau};
use scraw::synth::{generate, SynthFile};
use scraw::zero::{df_da, expected_zeros, solve_dispersion};
use scraw::CountMatrix;

fn counts(max_genes: usize, max_cells: usize) -> impl Strategy<Value = Vec<Vec<u32>>> {
    (1..=max_genes, 1..=max_cells).prop_flat_map(|(n, m)| {
        prop::collection::vec(
            prop::collection::vec(prop_oneof![3 => Just(0u32), 2 => 1u32..6, 1 => 6u32..200], m),
            n,
        )
    })
}

/// Matrices where every gene has reads, so every gene is fitted.
fn expressed(max_genes: usize, max_cells: usize) -> impl Strategy<Value = CountMatrix> {
    counts(max_genes, max_cells)
        .prop_filter("at least 2x2", |rows| rows.len() >= 2 && rows[0].len() >= 2)
        .prop_map(|mut rows| {
            for (g, r) in rows.iter_mut().enumerate() {
                let c = g % r.len();
                r[c] = r[c].max(1);
            }
            CountMatrix::from_rows(&rows).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matrix_round_trips(rows in counts(12, 12)) {
        let m = CountMatrix::from_rows(&rows).unwrap();
        let mut mtx = Vec::new();
        write_matrix_market_to(&m, &mut mtx).unwrap();
        let back = read_matrix_market(Cursor::new(mtx), Path::new("m.mtx")).unwrap();
        prop_assert_eq!(back.to_dense(), rows.clone());
        let mut tsv = Vec::new();
        write_dense_tsv_to(&m, &mut tsv).unwrap();
        let back = read_dense_tsv(Cursor::new(tsv), Path::new("m.tsv")).unwrap();
        prop_assert_eq!(back.to_dense(), rows);
    }

    #[test]
    fn marginal_totals_agree(rows in counts(12, 12)) {
        let mg = marginals(&CountMatrix::from_rows(&rows).unwrap());
        prop_assert_eq!(mg.grand_total, mg.genes.row_sum.iter().sum::<u64>());
        prop_assert_eq!(mg.grand_total, mg.cell_totals.iter().sum::<u64>());
        for g in 0..rows.len() {
            prop_assert_eq!(mg.genes.nonzero_cells[g] + mg.genes.zero_cells[g], rows[0].len());
            prop_assert!(mg.genes.row_sum[g] >= mg.genes.nonzero_cells[g] as u64);
        }
    }

    #[test]
    fn filter_is_idempotent(rows in counts(12, 8), min_total in 1u64..50) {
        let once = filter_genes(&CountMatrix::from_rows(&rows).unwrap(), min_total).unwrap();
        let twice = filter_genes(&once.matrix, min_total).unwrap();
        prop_assert_eq!(twice.matrix.to_dense(), once.matrix.to_dense());
        prop_assert_eq!(twice.kept, (0..once.matrix.n_genes()).collect::<Vec<_>>());
    }

    #[test]
    fn chi2_tails_sum_to_one(x in 0.0f64..30.0, dof in 1u32..8) {
        prop_assert!((chi2_sf(x, dof).unwrap() + chi2_cdf(x, dof).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn special_identities(x in 0.0f64..100.0) {
        let y = phi(x).unwrap();
        prop_assert!((psi(y).unwrap() - x).abs() <= 1e-8 * x.max(1.0));
        let t = tau(x).unwrap();
        prop_assert!((0.0..=0.4125 + 1e-6).contains(&t));
        prop_assert!((y * y + t - x).abs() <= 1e-9 * x.max(1.0));
    }

    #[test]
    fn zero_curve_decreases_in_a(a in -5.0f64..5.0, x in 1e-3f64..100.0) {
        prop_assert!(df_da(a, x) < 0.0);
    }

    #[test]
    fn dispersion_bracket_is_valid(mu in prop::collection::vec(0.01f64..20.0, 5..40), frac in 0.0f64..1.0) {
        let m = mu.len();
        let zeros = ((frac * m as f64) as usize).min(m - 1);
        let sol = solve_dispersion(&mu, zeros).unwrap();
        prop_assert!(sol.residual <= 1e-8 * m as f64);
        if sol.a.is_finite() {
            let d = 1e-6;
            let lo = expected_zeros(sol.a - d, &mu) - zeros as f64;
            let hi = expected_zeros(sol.a + d, &mu) - zeros as f64;
            prop_assert!(lo <= 1e-8 * m as f64 && hi >= -1e-8 * m as f64, "{lo} {hi}");
        }
    }

    #[test]
    fn pair_statistics(m in expressed(8, 30), sqrt in any::<bool>()) {
        let kind = if sqrt { EstimatorKind::SqrtCorrected } else { EstimatorKind::Average };
        let fitted = fit_model(&m, kind).unwrap();
        let cells = m.n_cells() as f64;
        for g in 0..m.n_genes() {
            let rho = fitted.rho.row(g);
            // A gene with no zero cells needs ρ = 1 to match its zero count.
            prop_assert!(rho.iter().all(|&p| (0.0..=1.0).contains(&p)));
            let zeros = (m.n_cells() - m.row(g).nnz()) as f64;
            let model: f64 = rho.iter().map(|p| 1.0 - p).sum();
            prop_assert!((model - zeros).abs() <= 1e-6 * cells);
        }
        for g1 in 0..m.n_genes() {
            for g2 in g1 + 1..m.n_genes() {
                let t = coex_table(&m, &fitted.rho, g1, g2).unwrap();
                let s = coex_stats(&t);
                prop_assert!((s.r * s.r - s.w).abs() <= 1e-9 * s.w.max(1.0));
                prop_assert_eq!(s.p_value, chi2_sf(s.w, 1).unwrap());
                let o11 = t.observed[0] as f64;
                if o11 > t.expected[0] + 1e-9 {
                    prop_assert!(s.r > 0.0, "{:?} {:?}", t, s);
                } else if o11 < t.expected[0] - 1e-9 {
                    prop_assert!(s.r < 0.0, "{:?} {:?}", t, s);
                }
                let (om, em) = (t.observed_margins(), t.expected_margins());
                prop_assert!((om.0 as f64 - em.0).abs() <= 2e-6 * cells, "{:?} {:?}", om, em);
                prop_assert!((om.1 as f64 - em.1).abs() <= 2e-6 * cells, "{:?} {:?}", om, em);
            }
        }
    }

    #[test]
    fn engine_equals_per_pair_loop(m in expressed(40, 70), tile in 1usize..20) {
        let fitted = fit_model(&m, EstimatorKind::Average).unwrap();
        let sink = VecSink::new();
        let n = pairwise_coex(&m, &fitted.rho, EngineOptions { tile, threads: Some(2) }, &sink).unwrap();
        let got = sink.into_sorted();
        prop_assert_eq!(n as usize, got.len());
        let mut k = 0;
        for g1 in 0..m.n_genes() {
            for g2 in g1 + 1..m.n_genes() {
                let t = coex_table(&m, &fitted.rho, g1, g2).unwrap();
                let s = coex_stats(&t);
                let r = &got[k];
                prop_assert_eq!((r.g1 as usize, r.g2 as usize), (g1, g2));
                prop_assert_eq!(r.table.observed, t.observed);
                prop_assert_eq!(r.table.expected.map(f64::to_bits), t.expected.map(f64::to_bits));
                prop_assert_eq!([r.stats.w, r.stats.r, r.stats.p_value].map(f64::to_bits),
                                [s.w, s.r, s.p_value].map(f64::to_bits));
                k += 1;
            }
        }
    }

    #[test]
    fn gdi_preserves_order(mut s in prop::collection::vec(1e-6f64..200.0, 2..50)) {
        s.sort_by(f64::total_cmp);
        s.dedup();
        let g: Vec<f64> = s.iter().map(|&x| gdi_from_s(x, -10.0)).collect();
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]), "{:?}", g);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulation_ignores_worker_count(seed in any::<u64>(), clusters in 1usize..4) {
        let cfg = SynthFile::desk(clusters, 60, 90, seed).resolve().unwrap();
        let (a, ta) = in_pool(1, || generate(&cfg)).unwrap().unwrap();
        let (b, tb) = in_pool(4, || generate(&cfg)).unwrap().unwrap();
        prop_assert_eq!(a.to_dense(), b.to_dense());
        prop_assert_eq!(ta.nu.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        tb.nu.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let mean = ta.nu.iter().sum::<f64>() / ta.nu.len() as f64;
        prop_assert!((mean - 1.0).abs() <= 1e-12);
    }
}
