//! End-to-end batch run with a hashed artifact manifest.
//!
//! Stages form a chain; each stage's key hashes the previous key and the
//! stage's own settings. A stage whose key and artifact hashes match the
//! manifest on disk is skipped.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::downstream::{
    gdi_threshold_test, GdiAccumulator, GdiScores, DEFAULT_ALPHA, DEFAULT_GDI_FLOOR, DEFAULT_GDI_QUANTILE,
};
use crate::engine::{
    pairwise_coex, with_threads, write_pairs, EngineOptions, PairFormat, PairResult, PairSink, VecSink, DEFAULT_TILE,
};
use crate::error::{Error, Result};
use crate::estimate::{estimate, EstimatorKind, ModelParams};
use crate::io::{load_matrix, read_id_list, MatrixFormat};
use crate::matrix::{filter_genes, CountMatrix};
use crate::tables;
use crate::zero::{chance_of_expression, fit_dispersion, write_rho, DispersionFit, RhoMatrix};

pub const MANIFEST: &str = "manifest.toml";

/// Settings for a full run. Every key may be given in a TOML file and
/// overridden on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    /// `mtx` or `tsv`; inferred from the extension when absent.
    pub format: Option<String>,
    /// Optional one-id-per-line files naming the matrix rows and columns.
    pub gene_ids: Option<PathBuf>,
    pub cell_ids: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub estimator: EstimatorKind,
    pub min_total: u64,
    pub alpha: f64,
    pub gdi_quantile: f64,
    pub gdi_floor: f64,
    /// `csv` or `binary`.
    pub pairs_format: String,
    pub tile: usize,
    /// 0 uses every available core.
    pub threads: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            format: None,
            gene_ids: None,
            cell_ids: None,
            out_dir: PathBuf::from("scraw-out"),
            estimator: EstimatorKind::Average,
            min_total: 1,
            alpha: DEFAULT_ALPHA,
            gdi_quantile: DEFAULT_GDI_QUANTILE,
            gdi_floor: DEFAULT_GDI_FLOOR,
            pairs_format: "csv".into(),
            tile: DEFAULT_TILE,
            threads: 0,
            seed: 0,
        }
    }
}

pub fn parse_format(s: &str) -> Result<MatrixFormat> {
    match s {
        "mtx" | "mm" | "matrixmarket" => Ok(MatrixFormat::MatrixMarket),
        "tsv" | "dense" => Ok(MatrixFormat::DenseTsv),
        _ => Err(Error::InvalidArgument(format!(
            "unknown matrix format '{s}' (mtx, tsv)"
        ))),
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_none() {
            return Err(Error::InvalidArgument("no input matrix given".into()));
        }
        if let Some(f) = &self.format {
            parse_format(f)?;
        }
        self.pairs_format.parse::<PairFormat>()?;
        if self.min_total < 1 {
            return Err(Error::InvalidArgument("min_total must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        if !(self.gdi_quantile > 0.0 && self.gdi_quantile < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gdi_quantile {} not in (0, 1)",
                self.gdi_quantile
            )));
        }
        if !self.gdi_floor.is_finite() {
            return Err(Error::InvalidArgument("gdi_floor must be finite".into()));
        }
        if self.tile == 0 {
            return Err(Error::InvalidArgument("tile must be >= 1".into()));
        }
        Ok(())
    }

    pub fn engine(&self) -> EngineOptions {
        EngineOptions {
            tile: self.tile,
            threads: (self.threads > 0).then_some(self.threads),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Estimate,
    FitZero,
    Coex,
    Gdi,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Estimate => "estimate",
            Stage::FitZero => "fit-zero",
            Stage::Coex => "coex",
            Stage::Gdi => "gdi",
        }
    }
}

/// A stage failure; displays as `<stage>-error: <cause>`.
#[derive(Debug, thiserror::Error)]
#[error("{}-error: {source}", stage.name())]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        self.source.exit_code()
    }
}

fn tag(stage: Stage) -> impl Fn(Error) -> PipelineError {
    move |source| PipelineError { stage, source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    #[serde(default)]
    pub artifact: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub input_sha256: String,
    pub stage: Vec<StageRecord>,
}

impl Manifest {
    pub fn artifacts(&self) -> impl Iterator<Item = &Artifact> {
        self.stage.iter().flat_map(|s| s.artifact.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub stages: Vec<(Stage, StageStatus)>,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn chain_key(prev: &str, stage: Stage, settings: &str) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update([0u8]);
    h.update(stage.name().as_bytes());
    h.update([0u8]);
    h.update(settings.as_bytes());
    hex::encode(h.finalize())
}

fn artifact(dir: &Path, name: &str) -> Result<Artifact> {
    let path = dir.join(name);
    let bytes = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
    Ok(Artifact {
        path: name.to_string(),
        sha256: sha256_file(&path)?,
        bytes,
    })
}

fn still_valid(dir: &Path, rec: &StageRecord) -> bool {
    rec.artifact
        .iter()
        .all(|a| sha256_file(&dir.join(&a.path)).is_ok_and(|h| h == a.sha256))
}

/// Loads the matrix named by the configuration and applies the gene filter.
pub fn ingest(cfg: &PipelineConfig) -> Result<CountMatrix> {
    let input = cfg
        .input
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("no input matrix given".into()))?;
    let format = cfg.format.as_deref().map(parse_format).transpose()?;
    let mut m = load_matrix(input, format)?;
    if cfg.gene_ids.is_some() || cfg.cell_ids.is_some() {
        let genes = match &cfg.gene_ids {
            Some(p) => read_id_list(p)?,
            None => m.gene_ids().to_vec(),
        };
        let cells = match &cfg.cell_ids {
            Some(p) => read_id_list(p)?,
            None => m.cell_ids().to_vec(),
        };
        m.set_ids(genes, cells)?;
    }
    let filtered = filter_genes(&m, cfg.min_total)?;
    if let Some(w) = &filtered.warning {
        log::warn!("{w}");
    }
    if filtered.matrix.n_genes() < 2 || filtered.matrix.n_cells() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 expressed genes and 2 cells, have {}x{}",
            filtered.matrix.n_genes(),
            filtered.matrix.n_cells()
        )));
    }
    Ok(filtered.matrix)
}

/// Fitted model for a filtered matrix.
pub struct Fitted {
    pub params: ModelParams,
    pub fit: DispersionFit,
    pub rho: RhoMatrix,
}

pub fn fit_model(m: &CountMatrix, kind: EstimatorKind) -> std::result::Result<Fitted, PipelineError> {
    let params = estimate(m, kind).map_err(tag(Stage::Estimate))?;
    let fit = fit_dispersion(m, &params).map_err(tag(Stage::FitZero))?;
    let rho = chance_of_expression(&params, &fit).map_err(tag(Stage::FitZero))?;
    Ok(Fitted { params, fit, rho })
}

/// Runs every stage, reusing artifacts whose inputs are unchanged.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<RunReport, PipelineError> {
    cfg.validate().map_err(tag(Stage::Config))?;
    let dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e))
        .map_err(tag(Stage::Config))?;
    let input = cfg.input.as_deref().expect("validated");
    let input_sha = sha256_file(input).map_err(tag(Stage::Ingest))?;
    let ids_sha = [&cfg.gene_ids, &cfg.cell_ids]
        .iter()
        .map(|p| p.as_deref().map_or(Ok(String::new()), sha256_file))
        .collect::<Result<Vec<_>>>()
        .map_err(tag(Stage::Ingest))?;
    let pairs_format: PairFormat = cfg.pairs_format.parse().map_err(tag(Stage::Config))?;
    let pairs_name = match pairs_format {
        PairFormat::Csv => "coex.csv",
        PairFormat::Binary => "coex.bin",
    };

    let version = env!("CARGO_PKG_VERSION");
    let k_ingest = chain_key(
        version,
        Stage::Ingest,
        &format!(
            "{input_sha}|{}|{}|{:?}|{}",
            ids_sha[0], ids_sha[1], cfg.format, cfg.min_total
        ),
    );
    let k_est = chain_key(&k_ingest, Stage::Estimate, cfg.estimator.as_str());
    let k_fit = chain_key(&k_est, Stage::FitZero, "");
    let k_coex = chain_key(&k_fit, Stage::Coex, pairs_name);
    let k_gdi = chain_key(
        &k_fit,
        Stage::Gdi,
        &format!("{}|{}|{}", cfg.alpha, cfg.gdi_quantile, cfg.gdi_floor),
    );

    let previous = Manifest::load(&dir.join(MANIFEST)).ok();
    let cached = |stage: Stage, key: &str| {
        previous.as_ref().is_some_and(|p| {
            p.stage
                .iter()
                .any(|r| r.name == stage.name() && r.key == key && still_valid(dir, r))
        })
    };
    let keys = [
        (Stage::Estimate, k_est.clone()),
        (Stage::FitZero, k_fit.clone()),
        (Stage::Coex, k_coex.clone()),
        (Stage::Gdi, k_gdi.clone()),
    ];
    let status: Vec<(Stage, StageStatus)> = keys
        .iter()
        .map(|(s, k)| {
            (
                *s,
                if cached(*s, k) {
                    StageStatus::Cached
                } else {
                    StageStatus::Ran
                },
            )
        })
        .collect();
    let runs = |s: Stage| status.iter().any(|&(t, st)| t == s && st == StageStatus::Ran);

    if status.iter().any(|&(_, st)| st == StageStatus::Ran) {
        let m = ingest(cfg).map_err(tag(Stage::Ingest))?;
        let fitted = fit_model(&m, cfg.estimator)?;
        if runs(Stage::Estimate) {
            tables::write_params(dir, &m, &fitted.params).map_err(tag(Stage::Estimate))?;
        }
        if runs(Stage::FitZero) {
            tables::write_dispersion(&dir.join("dispersion.csv"), &m, &fitted.fit)
                .and_then(|_| write_rho(&fitted.rho, &dir.join("rho.bin")))
                .map_err(tag(Stage::FitZero))?;
        }
        if runs(Stage::Coex) || runs(Stage::Gdi) {
            let pairs = runs(Stage::Coex).then(VecSink::new);
            let gdi = if runs(Stage::Gdi) {
                Some(GdiAccumulator::new(m.n_genes(), cfg.alpha).map_err(tag(Stage::Gdi))?)
            } else {
                None
            };
            let sink = |batch: &[PairResult]| -> Result<()> {
                if let Some(p) = &pairs {
                    p.accept(batch)?;
                }
                if let Some(g) = &gdi {
                    g.accept(batch)?;
                }
                Ok(())
            };
            pairwise_coex(&m, &fitted.rho, cfg.engine(), &sink).map_err(tag(Stage::Coex))?;
            if let Some(p) = pairs {
                let sorted = p.into_sorted();
                write_pairs(&dir.join(pairs_name), pairs_format, &sorted, m.gene_ids()).map_err(tag(Stage::Coex))?;
            }
            if let Some(g) = gdi {
                let scores = g.finish(cfg.gdi_floor).map_err(tag(Stage::Gdi))?;
                write_gdi_artifact(dir, &m, &scores, cfg.gdi_quantile).map_err(tag(Stage::Gdi))?;
            }
        }
    }

    let files: [(Stage, &str, &[&str]); 4] = [
        (Stage::Estimate, &k_est, &["genes.csv", "cells.csv"]),
        (Stage::FitZero, &k_fit, &["dispersion.csv", "rho.bin"]),
        (Stage::Coex, &k_coex, &[pairs_name]),
        (Stage::Gdi, &k_gdi, &["gdi.csv"]),
    ];
    let mut records = Vec::new();
    for (stage, key, names) in files {
        let artifact = names
            .iter()
            .map(|n| artifact(dir, n))
            .collect::<Result<Vec<_>>>()
            .map_err(tag(stage))?;
        records.push(StageRecord {
            name: stage.name().into(),
            key: key.to_string(),
            artifact,
        });
    }
    let manifest = Manifest {
        tool_version: version.into(),
        input_sha256: input_sha,
        stage: records,
    };
    let manifest_path = dir.join(MANIFEST);
    let text = toml::to_string(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text)
        .map_err(|e| Error::io(&manifest_path, e))
        .map_err(tag(Stage::Gdi))?;
    Ok(RunReport {
        stages: status,
        manifest,
        manifest_path,
    })
}

pub fn write_gdi_artifact(dir: &Path, m: &CountMatrix, scores: &GdiScores, quantile: f64) -> Result<()> {
    let flagged = gdi_threshold_test(scores, quantile)?;
    tables::write_gdi(&dir.join("gdi.csv"), m, scores, &flagged)
}

/// GDI scores for a filtered matrix without keeping the pair results.
pub fn gdi_only(m: &CountMatrix, rho: &RhoMatrix, alpha: f64, floor: f64, opts: EngineOptions) -> Result<GdiScores> {
    let acc = GdiAccumulator::new(m.n_genes(), alpha)?;
    pairwise_coex(m, rho, opts, &acc)?;
    acc.finish(floor)
}

/// Runs `f` on the configured number of workers.
pub fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    with_threads((threads > 0).then_some(threads), f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_matrix_market;
    use crate::synth::{generate, SynthFile};

    fn fixture(dir: &Path) -> PipelineConfig {
        let cfg = SynthFile::desk(1, 50, 100, 21).resolve().unwrap();
        let (m, _) = generate(&cfg).unwrap();
        let input = dir.join("fixture.mtx");
        write_matrix_market(&m, &input).unwrap();
        PipelineConfig {
            input: Some(input),
            out_dir: dir.join("run"),
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn full_run_then_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path());
        let first = run_pipeline(&cfg).unwrap();
        assert_eq!(first.manifest.artifacts().count(), 6);
        assert!(first.stages.iter().all(|&(_, s)| s == StageStatus::Ran));
        let bytes = std::fs::read(&first.manifest_path).unwrap();
        let second = run_pipeline(&cfg).unwrap();
        assert!(second.stages.iter().all(|&(_, s)| s == StageStatus::Cached));
        assert_eq!(std::fs::read(&second.manifest_path).unwrap(), bytes);

        // A new GDI setting reruns only the GDI stage.
        let third = run_pipeline(&PipelineConfig {
            alpha: 0.01,
            ..cfg.clone()
        })
        .unwrap();
        let ran: Vec<Stage> = third
            .stages
            .iter()
            .filter(|(_, s)| *s == StageStatus::Ran)
            .map(|(t, _)| *t)
            .collect();
        assert_eq!(ran, vec![Stage::Gdi]);

        // A damaged artifact is detected and rebuilt.
        std::fs::write(dir.path().join("run/genes.csv"), "junk").unwrap();
        let fourth = run_pipeline(&cfg).unwrap();
        assert_eq!(fourth.stages[0], (Stage::Estimate, StageStatus::Ran));
        assert_eq!(std::fs::read(&fourth.manifest_path).unwrap(), bytes);
    }

    #[test]
    fn corrupted_input_is_an_ingest_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path());
        std::fs::write(
            cfg.input.as_ref().unwrap(),
            "%%MatrixMarket matrix coordinate integer general\n2 2 1\n9 9 1\n",
        )
        .unwrap();
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage, Stage::Ingest);
        assert!(err.to_string().starts_with("ingest-error"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_err());
        let ok = PipelineConfig {
            input: Some("x.mtx".into()),
            ..PipelineConfig::default()
        };
        assert!(ok.validate().is_ok());
        assert!(PipelineConfig {
            alpha: 1.5,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(PipelineConfig {
            pairs_format: "xml".into(),
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(toml::from_str::<PipelineConfig>("alpha = 0.1\nunknown = 1\n").is_err());
        let parsed: PipelineConfig = toml::from_str("estimator = \"sqrt\"\ntile = 64\n").unwrap();
        assert_eq!(parsed.estimator, EstimatorKind::SqrtCorrected);
        assert_eq!(parsed.tile, 64);
    }
}
