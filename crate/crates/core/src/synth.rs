//! Synthetic count matrices from the gamma-Poisson model with known truth.
//!
//! Every random draw comes from a ChaCha8 stream keyed by (seed, purpose,
//! cell) with the gene index as stream id, so results do not depend on the
//! number of workers or the order in which cells are visited.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{estimate, EstimatorKind};
use crate::matrix::{default_cell_ids, default_gene_ids, CountMatrix};
use crate::zero::{f_a, fit_dispersion};

pub const DEFAULT_NU_LOG_SD: f64 = 0.4;

const DOMAIN_NU: u64 = 1;
const DOMAIN_COUNTS: u64 = 2;
const DOMAIN_GENES: u64 = 3;
const DOMAIN_MARKERS: u64 = 4;

/// Deterministic generator for one (purpose, index, stream) triple.
pub fn keyed_rng(seed: u64, domain: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase", deny_unknown_fields)]
pub enum NuLaw {
    LogNormal {
        log_sd: f64,
    },
    /// One value per cell, in cluster order.
    Explicit {
        values: Vec<f64>,
    },
}

impl Default for NuLaw {
    fn default() -> Self {
        NuLaw::LogNormal {
            log_sd: DEFAULT_NU_LOG_SD,
        }
    }
}

/// Cells of one type and their per-gene (λ, a).
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub cells: usize,
    pub lambda: Vec<f64>,
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub clusters: Vec<Cluster>,
    pub nu_law: NuLaw,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Realized efficiencies, mean 1.
    pub nu: Vec<f64>,
    /// Per cluster, per gene.
    pub lambda: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub cluster_of: Vec<u32>,
}

impl GroundTruth {
    /// Expected read count of gene g in cell c.
    pub fn mu(&self, g: usize, c: usize) -> f64 {
        self.nu[c] * self.lambda[self.cluster_of[c] as usize][g]
    }
}

impl SynthConfig {
    pub fn n_genes(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.lambda.len())
    }

    pub fn n_cells(&self) -> usize {
        self.clusters.iter().map(|c| c.cells).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::InvalidArgument("configuration has no clusters".into()));
        }
        let n = self.n_genes();
        for (j, c) in self.clusters.iter().enumerate() {
            if c.cells == 0 {
                return Err(Error::InvalidArgument(format!("cluster {j} has no cells")));
            }
            if c.lambda.len() != n || c.a.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "cluster {j} has {} lambda and {} a values, expected {n}",
                    c.lambda.len(),
                    c.a.len()
                )));
            }
            if let Some(l) = c.lambda.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
                return Err(Error::InvalidArgument(format!(
                    "cluster {j}: lambda {l} is not finite and >= 0"
                )));
            }
            if let Some(a) = c.a.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
                return Err(Error::InvalidArgument(format!(
                    "cluster {j}: dispersion {a} is not finite and >= 0"
                )));
            }
        }
        match &self.nu_law {
            NuLaw::LogNormal { log_sd } if !(*log_sd >= 0.0 && log_sd.is_finite()) => Err(Error::InvalidArgument(
                format!("log_sd {log_sd} is not finite and >= 0"),
            )),
            NuLaw::Explicit { values } if values.len() != self.n_cells() => Err(Error::InvalidArgument(format!(
                "{} efficiency values for {} cells",
                values.len(),
                self.n_cells()
            ))),
            NuLaw::Explicit { values } if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) => Err(
                Error::InvalidArgument("efficiency values must be finite and > 0".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Single-cluster configuration with the same law for every gene.
    pub fn homogeneous(n_genes: usize, cells: usize, lambda: f64, a: f64, nu_law: NuLaw, seed: u64) -> Self {
        Self {
            clusters: vec![Cluster {
                cells,
                lambda: vec![lambda; n_genes],
                a: vec![a; n_genes],
            }],
            nu_law,
            seed,
        }
    }
}

fn realize_nu(config: &SynthConfig) -> Result<Vec<f64>> {
    let m = config.n_cells();
    let raw: Vec<f64> = match &config.nu_law {
        NuLaw::Explicit { values } => values.clone(),
        NuLaw::LogNormal { log_sd } => {
            let law = LogNormal::new(0.0, *log_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            (0..m)
                .map(|c| law.sample(&mut keyed_rng(config.seed, DOMAIN_NU, c as u64, 0)))
                .collect()
        }
    };
    let mean = raw.iter().sum::<f64>() / m as f64;
    Ok(raw.into_iter().map(|v| v / mean).collect())
}

/// One negative-binomial draw: Λ ~ gamma(1/a, aλ) (Λ = λ when a = 0), then
/// Poisson(νΛ).
pub fn draw_count<R: Rng + ?Sized>(rng: &mut R, nu: f64, lambda: f64, a: f64) -> Result<u32> {
    let big_lambda = if a > 0.0 && lambda > 0.0 {
        Gamma::new(1.0 / a, a * lambda)
            .map_err(|e| Error::InvalidArgument(format!("gamma({}, {}): {e}", 1.0 / a, a * lambda)))?
            .sample(rng)
    } else {
        lambda
    };
    let mean = nu * big_lambda;
    if !(mean > 0.0) {
        return Ok(0);
    }
    let r: f64 = Poisson::new(mean)
        .map_err(|e| Error::InvalidArgument(format!("poisson({mean}): {e}")))?
        .sample(rng);
    if r > u32::MAX as f64 {
        return Err(Error::Numeric(format!("simulated count {r} exceeds 32 bits")));
    }
    Ok(r as u32)
}

pub fn generate(config: &SynthConfig) -> Result<(CountMatrix, GroundTruth)> {
    config.validate()?;
    let n = config.n_genes();
    let nu = realize_nu(config)?;
    let cluster_of: Vec<u32> = config
        .clusters
        .iter()
        .enumerate()
        .flat_map(|(j, c)| std::iter::repeat_n(j as u32, c.cells))
        .collect();
    let columns: Vec<Vec<(u32, u32)>> = (0..nu.len())
        .into_par_iter()
        .map(|c| {
            let cl = &config.clusters[cluster_of[c] as usize];
            let mut col = Vec::new();
            for g in 0..n {
                let mut rng = keyed_rng(config.seed, DOMAIN_COUNTS, c as u64, g as u64);
                let r = draw_count(&mut rng, nu[c], cl.lambda[g], cl.a[g])?;
                if r > 0 {
                    col.push((g as u32, r));
                }
            }
            Ok(col)
        })
        .collect::<Result<_>>()?;

    // Scatter columns into gene rows; cells arrive in order, so each row's
    // cell indices are increasing.
    let mut row_ptr = vec![0usize; n + 1];
    for col in &columns {
        for &(g, _) in col {
            row_ptr[g as usize + 1] += 1;
        }
    }
    for g in 0..n {
        row_ptr[g + 1] += row_ptr[g];
    }
    let nnz = row_ptr[n];
    let mut cols = vec![0u32; nnz];
    let mut vals = vec![0u32; nnz];
    let mut next = row_ptr.clone();
    for (c, col) in columns.iter().enumerate() {
        for &(g, r) in col {
            let k = &mut next[g as usize];
            cols[*k] = c as u32;
            vals[*k] = r;
            *k += 1;
        }
    }
    let matrix = CountMatrix::from_csr_parts(default_gene_ids(n), default_cell_ids(nu.len()), row_ptr, cols, vals);
    let truth = GroundTruth {
        nu,
        lambda: config.clusters.iter().map(|c| c.lambda.clone()).collect(),
        a: config.clusters.iter().map(|c| c.a.clone()).collect(),
        cluster_of,
    };
    Ok((matrix, truth))
}

/// Negative-binomial P(R = 0) = (1 + aμ)^(−1/a), with the Poisson limit at a = 0.
pub fn nb_zero_probability(a: f64, mu: f64) -> f64 {
    (-f_a(a.max(0.0), mu)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroRate {
    pub expected: f64,
    pub observed: f64,
}

/// Per gene, the model and realized fraction of zero cells.
pub fn zero_rate_check(truth: &GroundTruth, m: &CountMatrix) -> Result<Vec<ZeroRate>> {
    let n = truth.lambda.first().map_or(0, Vec::len);
    if n != m.n_genes() || truth.nu.len() != m.n_cells() {
        return Err(Error::Dimension("ground truth does not match the matrix".into()));
    }
    let cells = m.n_cells() as f64;
    Ok((0..n)
        .into_par_iter()
        .map(|g| {
            let expected: f64 = (0..m.n_cells())
                .map(|c| nb_zero_probability(truth.a[truth.cluster_of[c] as usize][g], truth.mu(g, c)))
                .sum();
            ZeroRate {
                expected: expected / cells,
                observed: (m.n_cells() - m.row(g).nnz()) as f64 / cells,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedConfig {
    /// Clusters in label order; `nu_law` lists within-cluster efficiencies
    /// for the cells of each cluster in turn.
    pub config: SynthConfig,
    pub labels: Vec<String>,
    /// Per cluster, genes whose fitted dispersion was negative and floored.
    pub floored: Vec<Vec<bool>>,
}

/// Moment-style parameters per cluster: λ and ν from `kind` estimates on
/// the cluster's cells, a from the zero model on the same cells.
pub fn fit_cluster_params<S: AsRef<str>>(
    m: &CountMatrix,
    cluster_labels: &[S],
    kind: EstimatorKind,
    seed: u64,
) -> Result<FittedConfig> {
    if cluster_labels.len() != m.n_cells() {
        return Err(Error::Dimension(format!(
            "{} cluster labels for {} cells",
            cluster_labels.len(),
            m.n_cells()
        )));
    }
    let mut labels: Vec<&str> = cluster_labels.iter().map(AsRef::as_ref).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut clusters = Vec::with_capacity(labels.len());
    let mut floored = Vec::with_capacity(labels.len());
    let mut nu = Vec::with_capacity(m.n_cells());
    for label in &labels {
        let cells: Vec<usize> = (0..m.n_cells())
            .filter(|&c| cluster_labels[c].as_ref() == *label)
            .collect();
        let sub = m.select_cells(&cells);
        if sub.nnz() == 0 {
            return Err(Error::InvalidInput(format!("cluster '{label}' has no reads")));
        }
        let params = estimate(&sub, kind).map_err(|e| Error::InvalidInput(format!("cluster '{label}': {e}")))?;
        let fit = fit_dispersion(&sub, &params)?;
        let neg: Vec<bool> = fit.a.iter().zip(&fit.fitted).map(|(&a, &f)| f && a < 0.0).collect();
        clusters.push(Cluster {
            cells: cells.len(),
            lambda: params.lambda.clone(),
            a: fit.a.iter().map(|&a| a.max(0.0)).collect(),
        });
        floored.push(neg);
        // Clamped (zero) efficiencies cannot be simulated; keep them tiny.
        nu.extend(params.nu.iter().map(|&v| v.max(1e-6)));
    }
    Ok(FittedConfig {
        config: SynthConfig {
            clusters,
            nu_law: NuLaw::Explicit { values: nu },
            seed,
        },
        labels: labels.into_iter().map(String::from).collect(),
        floored,
    })
}

/// Random per-gene law used to populate configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneLaw {
    pub n: usize,
    /// λ is log-uniform on [10^min, 10^max].
    pub lambda_log10_min: f64,
    pub lambda_log10_max: f64,
    /// a is uniform on [a_min, a_max].
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for GeneLaw {
    fn default() -> Self {
        Self {
            n: 2000,
            lambda_log10_min: -0.7,
            lambda_log10_max: 0.7,
            a_min: 0.0,
            a_max: 0.5,
        }
    }
}

/// One cluster as written in a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub cells: usize,
    /// Explicit per-gene values; drawn from `[genes]` when absent.
    pub lambda: Option<Vec<f64>>,
    pub a: Option<Vec<f64>>,
    /// Fraction of genes whose λ is scaled up or down by `marker_fold`.
    #[serde(default)]
    pub marker_fraction: f64,
    #[serde(default = "default_fold")]
    pub marker_fold: f64,
}

fn default_fold() -> f64 {
    8.0
}

/// On-disk simulation configuration (TOML).
///
/// ```toml
/// seed = 42
///
/// [nu]
/// law = "lognormal"      # or "explicit" with `values = [...]`
/// log_sd = 0.4
///
/// [genes]                # needed unless every cluster lists lambda and a
/// n = 2000
/// lambda_log10_min = -0.7
/// lambda_log10_max = 0.7
/// a_min = 0.0
/// a_max = 0.5
///
/// [[cluster]]
/// cells = 800
/// marker_fraction = 0.0  # optional
/// marker_fold = 8.0      # optional
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    pub seed: u64,
    #[serde(default)]
    pub nu: NuLaw,
    pub genes: Option<GeneLaw>,
    #[serde(rename = "cluster")]
    pub clusters: Vec<ClusterSpec>,
}

impl SynthFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("simulation config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Desk-scale design: `genes` genes, `cells` cells split evenly over
    /// `n_clusters` clusters; clusters after the first get 10% marker genes.
    pub fn desk(n_clusters: usize, genes: usize, cells: usize, seed: u64) -> Self {
        let per = cells / n_clusters.max(1);
        let clusters = (0..n_clusters)
            .map(|j| ClusterSpec {
                cells: if j + 1 == n_clusters { cells - per * j } else { per },
                lambda: None,
                a: None,
                marker_fraction: if j == 0 { 0.0 } else { 0.1 },
                marker_fold: default_fold(),
            })
            .collect();
        Self {
            seed,
            nu: NuLaw::default(),
            genes: Some(GeneLaw {
                n: genes,
                ..GeneLaw::default()
            }),
            clusters,
        }
    }

    pub fn resolve(&self) -> Result<SynthConfig> {
        let base = self.genes.as_ref().map(|law| draw_genes(law, self.seed)).transpose()?;
        let mut clusters = Vec::with_capacity(self.clusters.len());
        for (j, spec) in self.clusters.iter().enumerate() {
            let need = || {
                base.clone()
                    .ok_or_else(|| Error::InvalidInput(format!("cluster {j} lists no genes and [genes] is missing")))
            };
            let mut lambda = match &spec.lambda {
                Some(v) => v.clone(),
                None => need()?.0,
            };
            let a = match &spec.a {
                Some(v) => v.clone(),
                None => need()?.1,
            };
            if !(0.0..=1.0).contains(&spec.marker_fraction) || !(spec.marker_fold >= 1.0) {
                return Err(Error::InvalidInput(format!("cluster {j}: invalid marker settings")));
            }
            if spec.marker_fraction > 0.0 {
                for (g, l) in lambda.iter_mut().enumerate() {
                    let mut rng = keyed_rng(self.seed, DOMAIN_MARKERS, j as u64, g as u64);
                    if rng.random::<f64>() < spec.marker_fraction {
                        if rng.random::<bool>() {
                            *l *= spec.marker_fold;
                        } else {
                            *l /= spec.marker_fold;
                        }
                    }
                }
            }
            clusters.push(Cluster {
                cells: spec.cells,
                lambda,
                a,
            });
        }
        let config = SynthConfig {
            clusters,
            nu_law: self.nu.clone(),
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

fn draw_genes(law: &GeneLaw, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if law.n == 0 || !(law.lambda_log10_min <= law.lambda_log10_max) || !(law.a_min >= 0.0 && law.a_min <= law.a_max) {
        return Err(Error::InvalidInput(format!("invalid gene law {law:?}")));
    }
    let mut lambda = Vec::with_capacity(law.n);
    let mut a = Vec::with_capacity(law.n);
    for g in 0..law.n {
        let mut rng = keyed_rng(seed, DOMAIN_GENES, g as u64, 0);
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        lambda.push(10f64.powf(law.lambda_log10_min + u * (law.lambda_log10_max - law.lambda_log10_min)));
        a.push(law.a_min + v * (law.a_max - law.a_min));
    }
    Ok((lambda, a))
}

/// `cell,cluster,nu` and `gene,cluster,lambda,a` tables.
pub fn write_truth(dir: &Path, m: &CountMatrix, truth: &GroundTruth) -> Result<()> {
    let cells = dir.join("truth_cells.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&cells).map_err(|e| Error::io(&cells, e))?);
    let io = |e| Error::io(&cells, e);
    writeln!(w, "cell,cluster,nu").map_err(io)?;
    for (c, id) in m.cell_ids().iter().enumerate() {
        writeln!(w, "{id},{},{}", truth.cluster_of[c], truth.nu[c]).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let genes = dir.join("truth_genes.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&genes).map_err(|e| Error::io(&genes, e))?);
    let io = |e| Error::io(&genes, e);
    writeln!(w, "gene,cluster,lambda,a").map_err(io)?;
    for (j, (l, a)) in truth.lambda.iter().zip(&truth.a).enumerate() {
        for (g, id) in m.gene_ids().iter().enumerate() {
            writeln!(w, "{id},{j},{},{}", l[g], a[g]).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
