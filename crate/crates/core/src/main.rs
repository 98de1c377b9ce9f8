use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scraw::downstream::{diff_expression_all, read_conditions};
use scraw::engine::{listed_coex, pairwise_coex, read_pairs_binary, write_pairs, PairFormat, VecSink};
use scraw::estimate::EstimatorKind;
use scraw::io::write_matrix_market;
use scraw::pipeline::{self, fit_model, gdi_only, in_pool, ingest, run_pipeline, PipelineConfig, StageStatus};
use scraw::plot::{self, PlotKind, PlotRow};
use scraw::synth::{generate, write_truth, SynthFile};
use scraw::zero::write_rho;
use scraw::{tables, validate, Error, Result};

#[derive(Parser)]
#[command(
    name = "scraw",
    version,
    about = "Statistics for raw single-cell RNA-seq read counts"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every analysis command. Flags override `--config`.
#[derive(Args, Clone, Default)]
struct Common {
    /// Count matrix (.mtx or dense .tsv).
    matrix: Option<PathBuf>,
    /// TOML file with pipeline settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Matrix format: mtx or tsv (default: from the extension).
    #[arg(long)]
    format: Option<String>,
    /// One gene id per line, in matrix row order.
    #[arg(long)]
    gene_ids: Option<PathBuf>,
    /// One cell id per line, in matrix column order.
    #[arg(long)]
    cell_ids: Option<PathBuf>,
    /// Drop genes with fewer total reads.
    #[arg(long)]
    min_total: Option<u64>,
    /// average or sqrt.
    #[arg(long)]
    estimator: Option<EstimatorKind>,
    /// Genes per engine tile.
    #[arg(long)]
    tile: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// GDI percentile level.
    #[arg(long)]
    alpha: Option<f64>,
    /// GDI flag level: S is compared with the chi-square(1) point of this upper tail.
    #[arg(long)]
    quantile: Option<f64>,
    /// GDI reported for S = 0.
    #[arg(long, allow_hyphen_values = true)]
    floor: Option<f64>,
    /// Seed for any random choice.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! over {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$target = v.clone().into(); })*
            };
        }
        over!(min_total => min_total, estimator => estimator, tile => tile, threads => threads,
              alpha => alpha, quantile => gdi_quantile, floor => gdi_floor, seed => seed);
        if self.matrix.is_some() {
            cfg.input = self.matrix.clone();
        }
        if self.format.is_some() {
            cfg.format = self.format.clone();
        }
        if self.gene_ids.is_some() {
            cfg.gene_ids = self.gene_ids.clone();
        }
        if self.cell_ids.is_some() {
            cfg.cell_ids = self.cell_ids.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load and check a matrix; optionally save the filtered copy.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Write the filtered matrix here (MatrixMarket).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate cell efficiencies and gene expression (genes.csv, cells.csv).
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fit per-gene dispersion and chance of expression (adds dispersion.csv, rho.bin).
    FitZero {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Co-expression tables and tests for gene pairs.
    Coex {
        #[command(flatten)]
        common: Common,
        /// `all`, or a file with one pair of gene ids per line.
        #[arg(long, default_value = "all")]
        pairs: String,
        /// Output format: csv or binary.
        #[arg(long, default_value = "csv")]
        out: PairFormat,
        /// Output file (default coex.csv or coex.bin).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Expression/condition test for every gene.
    Diffexp {
        #[command(flatten)]
        common: Common,
        /// Two-column TSV: cell id, condition.
        #[arg(long)]
        conditions: PathBuf,
        #[arg(long, default_value = "diffexp.csv")]
        output: PathBuf,
    },
    /// Global Differentiation Index per gene.
    Gdi {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "gdi.csv")]
        output: PathBuf,
    },
    /// Generate a synthetic matrix with ground truth.
    Simulate {
        /// Simulation TOML; without it a desk-scale design is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        clusters: usize,
        #[arg(long, default_value_t = 2000)]
        genes: usize,
        #[arg(long, default_value_t = 800)]
        cells: usize,
        /// Overrides the seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Tidy x,y,series data for a diagnostic plot.
    PlotData {
        /// Plot kind (pvalue-ecdf | gdi-hist | estimator-scatter).
        kind: PlotKind,
        /// Directory holding the run artifacts.
        #[arg(long, default_value = ".")]
        run_dir: PathBuf,
        /// Directory with truth_cells.csv and truth_genes.csv (estimator-scatter).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Estimator that produced the run (series label for estimator-scatter).
        #[arg(long, default_value = "average")]
        estimator: EstimatorKind,
        #[arg(long, default_value_t = plot::ECDF_MAX_POINTS)]
        max_points: usize,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "plot.csv")]
        output: PathBuf,
    },
    /// Run the acceptance suites.
    Validate {
        /// Only these criteria (1-9).
        #[arg(long)]
        criterion: Vec<u32>,
    },
    /// Full pipeline with cached, hashed artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pair results format: csv or binary.
        #[arg(long)]
        pairs_format: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Plain(e)) => {
            eprintln!("scraw: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("scraw: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

enum Failure {
    Plain(Error),
    Stage(pipeline::PipelineError),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Plain(e)
    }
}

impl From<pipeline::PipelineError> for Failure {
    fn from(e: pipeline::PipelineError) -> Self {
        Failure::Stage(e)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn dispatch(cmd: Command) -> std::result::Result<ExitCode, Failure> {
    match cmd {
        Command::Ingest { common, out } => {
            let cfg = common.resolve()?;
            let m = ingest(&cfg)?;
            println!("genes\t{}\ncells\t{}\nnonzero\t{}", m.n_genes(), m.n_cells(), m.nnz());
            if let Some(out) = out {
                write_matrix_market(&m, &out)?;
            }
        }
        Command::Estimate { common, out } => {
            let cfg = common.resolve()?;
            let m = ingest(&cfg)?;
            let params = in_pool(cfg.threads, || scraw::estimate::estimate(&m, cfg.estimator))??;
            create_dir(&out)?;
            tables::write_params(&out, &m, &params)?;
        }
        Command::FitZero { common, out } => {
            let cfg = common.resolve()?;
            let m = ingest(&cfg)?;
            let fitted = in_pool(cfg.threads, || fit_model(&m, cfg.estimator))??;
            create_dir(&out)?;
            tables::write_params(&out, &m, &fitted.params)?;
            tables::write_dispersion(&out.join("dispersion.csv"), &m, &fitted.fit)?;
            write_rho(&fitted.rho, &out.join("rho.bin"))?;
            println!("negative dispersion\t{:.4}", fitted.fit.negative_fraction());
        }
        Command::Coex {
            common,
            pairs,
            out,
            output,
        } => {
            let cfg = common.resolve()?;
            let m = ingest(&cfg)?;
            let fitted = in_pool(cfg.threads, || fit_model(&m, cfg.estimator))??;
            let sink = VecSink::new();
            if pairs == "all" {
                pairwise_coex(&m, &fitted.rho, cfg.engine(), &sink)?;
            } else {
                let list = read_pair_list(Path::new(&pairs), m.gene_ids())?;
                listed_coex(&m, &fitted.rho, &list, cfg.engine(), &sink)?;
            }
            let output = output.unwrap_or_else(|| {
                PathBuf::from(match out {
                    PairFormat::Csv => "coex.csv",
                    PairFormat::Binary => "coex.bin",
                })
            });
            write_pairs(&output, out, &sink.into_sorted(), m.gene_ids())?;
        }
        Command::Diffexp {
            common,
            conditions,
            output,
        } => {
            let cfg = common.resolve()?;
            let m = ingest(&cfg)?;
            let part = read_conditions(&conditions, m.cell_ids())?;
            let fitted = in_pool(cfg.threads, || fit_model(&m, cfg.estimator))??;
            let res = in_pool(cfg.threads, || diff_expression_all(&m, &fitted.rho, &part))??;
            tables::write_diffexp(&output, &m, &res)?;
        }
        Command::Gdi { common, output } => {
            let cfg = common.resolve()?;
            let m = ingest(&cfg)?;
            let fitted = in_pool(cfg.threads, || fit_model(&m, cfg.estimator))??;
            let scores = gdi_only(&m, &fitted.rho, cfg.alpha, cfg.gdi_floor, cfg.engine())?;
            let flagged = scraw::downstream::gdi_threshold_test(&scores, cfg.gdi_quantile)?;
            tables::write_gdi(&output, &m, &scores, &flagged)?;
            println!("flagged\t{}", flagged.iter().filter(|&&f| f).count());
        }
        Command::Simulate {
            config,
            clusters,
            genes,
            cells,
            seed,
            out,
        } => {
            let mut file = match config {
                Some(p) => SynthFile::load(&p)?,
                None => {
                    if clusters == 0 || cells < clusters {
                        return Err(Error::InvalidArgument("need 1 <= clusters <= cells".into()).into());
                    }
                    SynthFile::desk(clusters, genes, cells, 0)
                }
            };
            if let Some(s) = seed {
                file.seed = s;
            }
            let cfg = file.resolve()?;
            let (m, truth) = generate(&cfg)?;
            create_dir(&out)?;
            write_matrix_market(&m, &out.join("matrix.mtx"))?;
            write_truth(&out, &m, &truth)?;
            std::fs::write(out.join("simulation.toml"), file.to_toml()).map_err(|e| Error::io(&out, e))?;
        }
        Command::PlotData {
            kind,
            run_dir,
            truth,
            estimator,
            max_points,
            bins,
            seed,
            output,
        } => {
            let rows = match kind {
                PlotKind::PvalueEcdf => plot::pvalue_ecdf(&load_p_values(&run_dir)?, max_points, seed),
                PlotKind::GdiHist => plot::gdi_hist(&tables::read_f64_column(&run_dir.join("gdi.csv"), "GDI")?, bins),
                PlotKind::EstimatorScatter => {
                    let truth =
                        truth.ok_or_else(|| Error::InvalidArgument("estimator-scatter needs --truth <dir>".into()))?;
                    scatter_rows(&run_dir, &truth, estimator)?
                }
            };
            plot::write_plot_csv(&output, &rows)?;
        }
        Command::Validate { criterion } => {
            if let Some(bad) = criterion.iter().find(|&&c| !(1..=9).contains(&c)) {
                return Err(Error::InvalidArgument(format!("no criterion {bad}")).into());
            }
            let outcomes = validate::run_selected(&criterion);
            let mut failed = false;
            for o in &outcomes {
                println!("{o}");
                failed |= !o.passed;
            }
            if failed {
                return Ok(ExitCode::from(4));
            }
        }
        Command::Run {
            common,
            out,
            pairs_format,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(f) = pairs_format {
                cfg.pairs_format = f;
            }
            let report = in_pool(cfg.threads, || run_pipeline(&cfg))??;
            for (stage, status) in &report.stages {
                let s = match status {
                    StageStatus::Ran => "ran",
                    StageStatus::Cached => "cached",
                };
                println!("{}\t{s}", stage.name());
            }
            println!("manifest\t{}", report.manifest_path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Pairs of gene ids separated by whitespace or a comma.
fn read_pair_list(path: &Path, gene_ids: &[String]) -> Result<Vec<(usize, usize)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let index: HashMap<&str, usize> = gene_ids.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let ids: Vec<&str> = t
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if ids.len() != 2 {
            return Err(Error::parse(path, i + 1, "expected two gene ids"));
        }
        let look = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::parse(path, i + 1, format!("unknown or filtered gene '{id}'")))
        };
        out.push((look(ids[0])?, look(ids[1])?));
    }
    Ok(out)
}

fn load_p_values(run_dir: &Path) -> Result<Vec<f64>> {
    let csv = run_dir.join("coex.csv");
    if csv.exists() {
        return tables::read_f64_column(&csv, "p");
    }
    let bin = run_dir.join("coex.bin");
    if bin.exists() {
        return Ok(read_pairs_binary(&bin)?.iter().map(|r| r.stats.p_value).collect());
    }
    Err(Error::InvalidInput(format!(
        "{}: no coex.csv or coex.bin",
        run_dir.display()
    )))
}

fn scatter_rows(run_dir: &Path, truth_dir: &Path, kind: EstimatorKind) -> Result<Vec<PlotRow>> {
    let truth_nu: HashMap<String, f64> = pairs_of(&truth_dir.join("truth_cells.csv"), "cell", "nu")?;
    let genes = tables::read_columns(&truth_dir.join("truth_genes.csv"), &["gene", "cluster", "lambda"])?;
    if genes.iter().any(|r| r[1] != "0") {
        return Err(Error::InvalidInput(
            "estimator-scatter needs single-cluster ground truth".into(),
        ));
    }
    let truth_lambda: HashMap<String, f64> = pairs_of(&truth_dir.join("truth_genes.csv"), "gene", "lambda")?;
    let mut rows = Vec::new();
    for (file, id, col, truth, series) in [
        ("cells.csv", "cell", "nu", &truth_nu, "nu"),
        ("genes.csv", "gene", "lambda", &truth_lambda, "lambda"),
    ] {
        for (name, est) in pairs_of_ordered(&run_dir.join(file), id, col)? {
            let t = truth
                .get(&name)
                .ok_or_else(|| Error::InvalidInput(format!("no ground truth for '{name}'")))?;
            rows.push(PlotRow {
                x: *t,
                y: est,
                series: format!("{series}-{}", kind.as_str()),
            });
        }
    }
    Ok(rows)
}

fn pairs_of_ordered(path: &Path, key: &str, value: &str) -> Result<Vec<(String, f64)>> {
    tables::read_columns(path, &[key, value])?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let v = r[1]
                .parse()
                .map_err(|_| Error::parse(path, i + 2, format!("'{}' is not a number", r[1])))?;
            Ok((r[0].clone(), v))
        })
        .collect()
}

fn pairs_of(path: &Path, key: &str, value: &str) -> Result<HashMap<String, f64>> {
    Ok(pairs_of_ordered(path, key, value)?.into_iter().collect())
}
