//! Batch front end: CSV ingestion, configuration merging and the
//! `estimate`, `test` and `simulate` subcommands.
//!
//! Every run writes one JSON document. Matrices are nested row-major arrays
//! and floats use the shortest representation that parses back to the same
//! `f64`. Exit codes: 0 success, 2 data or configuration error, 3 numerical
//! failure.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{DesignMatrix, FactorDims};
use crate::error::Error;
use crate::infer::{overid_test, TestResult};
use crate::matfun::{spd_exp, SpdMatrix, SymMatrix};
use crate::mc::{run_study, DgpSpec, Estimator, Innovation, McSummary, Perturbation, StudyConfig};
use crate::mdest::{md_estimate, WeightSpec};
use crate::moments::{compute_moments_with, MomentOptions, Panel, Regime};
use crate::qmle::{one_step_with_moments, LikelihoodContext};
use crate::shrink::{diag_deviation, renormalize, shrink_model};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("input file is empty")]
    EmptyFile,
    #[error("row {row} has {found} columns, expected {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },
    #[error("non-numeric cell at row {row}, column {col}: '{value}'")]
    NonNumericCell { row: usize, col: usize, value: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: io::Error },
    #[error("{}: {}", .0.kind(), .0)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Reads a rectangular numeric CSV. A first row in which no cell parses as a
/// number is taken as the header. Rows and columns in errors are 1-based.
pub fn ingest_csv(path: impl AsRef<Path>) -> std::result::Result<Panel, IngestError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(file)
}

pub fn parse_csv(reader: impl Read) -> std::result::Result<Panel, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut names = None;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let expected = *width.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(IngestError::RaggedRows {
                row,
                expected,
                found: rec.len(),
            });
        }
        if k == 0 && rec.iter().all(|c| c.parse::<f64>().is_err()) {
            names = Some(rec.iter().map(str::to_string).collect::<Vec<_>>());
            continue;
        }
        for (j, cell) in rec.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(IngestError::NonNumericCell {
                        row,
                        col: j + 1,
                        value: cell.to_string(),
                    })
                }
            }
        }
        rows += 1;
    }
    let n = match width {
        Some(n) if rows > 0 => n,
        _ => return Err(IngestError::EmptyFile),
    };
    let panel = Panel::new(DMatrix::from_row_slice(rows, n, &values)).map_err(|_| IngestError::EmptyFile)?;
    Ok(match names {
        Some(names) => panel.with_names(names).expect("header width matches the data"),
        None => panel,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum WeightChoice {
    Identity,
    Optimal,
    File(PathBuf),
}

impl FromStr for WeightChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" => Ok(Self::Identity),
            "optimal" => Ok(Self::Optimal),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Self::File(PathBuf::from(p))),
                _ => Err(format!("unknown weight '{s}' (expected identity, optimal or file:PATH)")),
            },
        }
    }
}

impl fmt::Display for WeightChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::Optimal => f.write_str("optimal"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShrinkMode {
    None,
    Renorm,
    #[serde(rename = "2x2")]
    TwoByTwo,
}

impl FromStr for ShrinkMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "renorm" => Ok(Self::Renorm),
            "2x2" => Ok(Self::TwoByTwo),
            _ => Err(format!("unknown shrink mode '{s}' (expected none, renorm or 2x2)")),
        }
    }
}

fn parse_innovation(s: &str) -> std::result::Result<Innovation, String> {
    if s == "gaussian" {
        return Ok(Innovation::Gaussian);
    }
    s.strip_prefix("t:")
        .and_then(|df| df.parse().ok())
        .map(Innovation::StudentT)
        .ok_or_else(|| format!("unknown innovation '{s}' (expected gaussian or t:DF)"))
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("cannot parse '{x}' as a number")))
        .collect()
}

fn parse_perturbation(s: &str) -> std::result::Result<Perturbation, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let err = || format!("perturbation '{s}' must look like ROW,COL,DELTA (0-based indices)");
    match parts.as_slice() {
        [r, c, d] => Ok(Perturbation {
            row: r.parse().map_err(|_| err())?,
            col: c.parse().map_err(|_| err())?,
            delta: d.parse().map_err(|_| err())?,
        }),
        _ => Err(err()),
    }
}

#[derive(Parser, Debug)]
#[command(name = "kronfit", version, about = "Kronecker-product correlation estimation and testing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the Kronecker model to a CSV panel.
    Estimate(RunArgs),
    /// Fit and run the over-identification test.
    Test(RunArgs),
    /// Monte Carlo study on a simulated Kronecker DGP.
    Simulate(RunArgs),
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// CSV panel, rows are time and columns are series.
    pub input: Option<PathBuf>,
    /// TOML file with defaults for any flag; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Factor dimensions, e.g. 2x2x3.
    #[arg(long)]
    pub dims: Option<String>,
    /// identity, optimal or file:PATH (a CSV weight matrix).
    #[arg(long)]
    pub weight: Option<String>,
    /// known-d or estimated-d.
    #[arg(long)]
    pub regime: Option<String>,
    /// Comma-separated subset of md,onestep.
    #[arg(long)]
    pub estimators: Option<String>,
    /// none, renorm or 2x2.
    #[arg(long)]
    pub shrink: Option<String>,
    /// True variances for the known-d regime (comma-separated).
    #[arg(long)]
    pub known_d: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replications for simulate.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Worker threads for simulate (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Sample size for simulate.
    #[arg(long = "t")]
    pub t: Option<usize>,
    /// gaussian or t:DF for simulate.
    #[arg(long)]
    pub innovation: Option<String>,
    /// True parameter vector for simulate (comma-separated).
    #[arg(long)]
    pub theta0: Option<String>,
    /// True variances for simulate (comma-separated).
    #[arg(long)]
    pub d0: Option<String>,
    /// Non-Kronecker alternative for simulate: ROW,COL,DELTA.
    #[arg(long)]
    pub perturb: Option<String>,
    /// Output path (stdout if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the estimates with standard errors as CSV.
    #[arg(long)]
    pub theta_csv: Option<PathBuf>,
}

/// Values read from `--config`; same names as the flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    input: Option<PathBuf>,
    dims: Option<String>,
    weight: Option<String>,
    regime: Option<String>,
    estimators: Option<Vec<String>>,
    shrink: Option<String>,
    known_d: Option<Vec<f64>>,
    seed: Option<u64>,
    reps: Option<usize>,
    workers: Option<usize>,
    t: Option<usize>,
    innovation: Option<String>,
    theta0: Option<Vec<f64>>,
    d0: Option<Vec<f64>>,
    perturb: Option<String>,
    out: Option<PathBuf>,
    theta_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorChoice {
    Md,
    Onestep,
}

/// Fully resolved configuration; echoed verbatim in every report.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<PathBuf>,
    pub dims: Option<String>,
    #[serde(serialize_with = "display")]
    pub weight: WeightChoice,
    pub regime: Regime,
    pub estimators: Vec<EstimatorChoice>,
    pub shrink: ShrinkMode,
    pub known_d: Option<Vec<f64>>,
    pub seed: u64,
    pub reps: usize,
    pub workers: usize,
    pub t: usize,
    pub innovation: Innovation,
    pub theta0: Option<Vec<f64>>,
    pub d0: Option<Vec<f64>>,
    pub perturb: Option<Perturbation>,
    pub out: Option<PathBuf>,
    pub theta_csv: Option<PathBuf>,
    /// Where each field came from: flag, config or default.
    pub sources: BTreeMap<String, String>,
}

fn display<T: fmt::Display, S: serde::Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_REPS: usize = 1000;
pub const DEFAULT_T: usize = 500;

struct Merger {
    sources: BTreeMap<String, String>,
}

impl Merger {
    fn pick<T>(&mut self, name: &str, flag: Option<T>, file: Option<T>) -> Option<T> {
        let (v, src) = match (flag, file) {
            (Some(v), _) => (Some(v), "flag"),
            (None, Some(v)) => (Some(v), "config"),
            (None, None) => (None, "default"),
        };
        self.sources.insert(name.to_string(), src.to_string());
        v
    }
}

fn parse_flag<T>(v: Option<String>, f: impl Fn(&str) -> std::result::Result<T, String>) -> CliResult<Option<T>> {
    v.map(|s| f(&s)).transpose().map_err(CliError::Config)
}

fn parse_estimators(items: &[String]) -> std::result::Result<Vec<EstimatorChoice>, String> {
    let mut out = items
        .iter()
        .map(|s| match s.trim() {
            "md" => Ok(EstimatorChoice::Md),
            "onestep" => Ok(EstimatorChoice::Onestep),
            other => Err(format!("unknown estimator '{other}' (expected md or onestep)")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    out.sort();
    out.dedup();
    if !out.contains(&EstimatorChoice::Md) {
        // the one-step estimator starts from the MD estimate
        out.insert(0, EstimatorChoice::Md);
    }
    Ok(out)
}

impl RunConfig {
    /// Merges flags over the optional config file over defaults.
    pub fn resolve(command: &str, args: RunArgs) -> CliResult<Self> {
        let file: FileConfig = match &args.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        let mut m = Merger {
            sources: BTreeMap::new(),
        };
        let list = |s: &str| parse_list(s);
        let weight = m
            .pick(
                "weight",
                parse_flag(args.weight, WeightChoice::from_str)?,
                parse_flag(file.weight, WeightChoice::from_str)?,
            )
            .unwrap_or(WeightChoice::Identity);
        let regime_parse = |s: &str| Regime::from_str(s).map_err(|e| e.to_string());
        let regime = m
            .pick(
                "regime",
                parse_flag(args.regime, regime_parse)?,
                parse_flag(file.regime, regime_parse)?,
            )
            .unwrap_or_default();
        let estimators = m
            .pick(
                "estimators",
                args.estimators.map(|s| s.split(',').map(str::to_string).collect::<Vec<_>>()),
                file.estimators,
            )
            .unwrap_or_else(|| vec!["md".into(), "onestep".into()]);
        let estimators = parse_estimators(&estimators).map_err(CliError::Config)?;
        let shrink = m
            .pick(
                "shrink",
                parse_flag(args.shrink, ShrinkMode::from_str)?,
                parse_flag(file.shrink, ShrinkMode::from_str)?,
            )
            .unwrap_or(ShrinkMode::None);
        let innovation = m
            .pick(
                "innovation",
                parse_flag(args.innovation, parse_innovation)?,
                parse_flag(file.innovation, parse_innovation)?,
            )
            .unwrap_or(Innovation::Gaussian);
        let perturb = m.pick(
            "perturb",
            parse_flag(args.perturb, parse_perturbation)?,
            parse_flag(file.perturb, parse_perturbation)?,
        );
        let cfg = RunConfig {
            command: command.to_string(),
            input: m.pick("input", args.input, file.input),
            dims: m.pick("dims", args.dims, file.dims),
            weight,
            regime,
            estimators,
            shrink,
            known_d: m.pick("known_d", parse_flag(args.known_d, list)?, file.known_d),
            seed: m.pick("seed", args.seed, file.seed).unwrap_or(DEFAULT_SEED),
            reps: m.pick("reps", args.reps, file.reps).unwrap_or(DEFAULT_REPS),
            workers: m.pick("workers", args.workers, file.workers).unwrap_or(0),
            t: m.pick("t", args.t, file.t).unwrap_or(DEFAULT_T),
            innovation,
            theta0: m.pick("theta0", parse_flag(args.theta0, list)?, file.theta0),
            d0: m.pick("d0", parse_flag(args.d0, list)?, file.d0),
            perturb,
            out: m.pick("out", args.out, file.out),
            theta_csv: m.pick("theta_csv", args.theta_csv, file.theta_csv),
            sources: m.sources,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        let dims = self.factor_dims()?;
        if self.shrink == ShrinkMode::TwoByTwo && !dims.all_two() {
            return Err(CliError::Config(format!("--shrink 2x2 needs every factor to be 2x2, got {dims}")));
        }
        if self.regime == Regime::KnownD && self.command != "simulate" && self.known_d.is_none() {
            return Err(CliError::Config("the known-d regime needs --known-d".into()));
        }
        if self.command != "simulate" && self.input.is_none() {
            return Err(CliError::Config(format!("{} needs an input CSV", self.command)));
        }
        Ok(())
    }

    pub fn factor_dims(&self) -> CliResult<FactorDims> {
        match &self.dims {
            Some(d) => Ok(d.parse()?),
            None => Err(CliError::Config("--dims is required".into())),
        }
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

#[derive(Serialize)]
pub struct DataSummary {
    pub t: usize,
    pub n: usize,
    pub names: Option<Vec<String>>,
}

#[derive(Serialize)]
pub struct EstimateBlock {
    pub method: String,
    pub theta: Vec<f64>,
    pub std_errors: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust_std_errors: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clipped_eigenvalues: Option<usize>,
}

#[derive(Serialize)]
pub struct FactorBlock {
    pub raw: Vec<Vec<Vec<f64>>>,
    pub shrunk: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Serialize)]
pub struct CorrelationBlock {
    pub model: Vec<Vec<f64>>,
    pub max_diag_deviation: f64,
    pub shrunk: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
pub struct EstimationReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub data: DataSummary,
    pub labels: Vec<String>,
    pub md: EstimateBlock,
    pub one_step: Option<EstimateBlock>,
    pub factors: FactorBlock,
    pub correlation: CorrelationBlock,
    pub overid: Option<TestResult>,
}

#[derive(Serialize)]
pub struct SimulationReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub labels: Vec<String>,
    pub summary: McSummary,
}

fn read_weight(path: &Path, m: usize) -> CliResult<DMatrix<f64>> {
    let panel = ingest_csv(path)?;
    let w = panel.data().clone();
    if w.nrows() != m || w.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: format!("{m}x{m} weight"),
            found: format!("{}x{}", w.nrows(), w.ncols()),
        }
        .into());
    }
    Ok(w)
}

fn factor_matrices(design: &DesignMatrix, theta: &DVector<f64>) -> CliResult<Vec<DMatrix<f64>>> {
    design
        .theta_to_factor_logs(theta)?
        .into_iter()
        .map(|l| Ok(spd_exp(&SymMatrix::new(l)?)?.into_inner()))
        .collect()
}

pub fn estimate(cfg: &RunConfig) -> CliResult<EstimationReport> {
    let input = cfg.input.as_ref().ok_or_else(|| CliError::Config("missing input".into()))?;
    let panel = ingest_csv(input)?;
    let dims = cfg.factor_dims()?;
    if dims.n() != panel.n() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} series for dims {dims}", dims.n()),
            found: format!("{} columns", panel.n()),
        }
        .into());
    }
    if cfg.command == "test" && dims.overid_df() == 0 {
        return Err(Error::NotOveridentified.into());
    }
    let design = DesignMatrix::build(&dims);
    let opts = MomentOptions {
        known_d: cfg.known_d.as_ref().map(|d| DVector::from_column_slice(d)),
        ..MomentOptions::default()
    };
    let moments = compute_moments_with(&panel, &opts)?;
    let weight = match &cfg.weight {
        WeightChoice::Identity => WeightSpec::Identity,
        WeightChoice::Optimal => WeightSpec::FeasibleOptimal,
        WeightChoice::File(p) => WeightSpec::Supplied(read_weight(p, design.num_moments())?),
    };
    let md = md_estimate(&moments, &design, &weight, cfg.regime)?;
    let one_step = if cfg.estimators.contains(&EstimatorChoice::Onestep) {
        let ctx = LikelihoodContext::from_moments(&moments, &design, cfg.regime)?;
        let os = one_step_with_moments(&md, &ctx, &moments, cfg.regime)?;
        let t = os.t as f64;
        Some(EstimateBlock {
            method: "one-step".into(),
            theta: to_vec(&os.theta_tilde),
            std_errors: to_vec(&os.std_errors()),
            robust_std_errors: os
                .robust_avar
                .as_ref()
                .map(|a| a.diagonal().iter().map(|x| (x.max(0.0) / t).sqrt()).collect()),
            clipped_eigenvalues: None,
        })
    } else {
        None
    };
    let overid = if dims.overid_df() > 0 {
        Some(overid_test(&moments, &design, cfg.regime)?.0)
    } else {
        None
    };

    let raw = factor_matrices(&design, &md.theta)?;
    let (model, max_diag_deviation) = design.theta_to_correlation(&md.theta)?;
    let (shrunk_factors, shrunk_corr) = match cfg.shrink {
        ShrinkMode::None => (None, None),
        ShrinkMode::Renorm => {
            let f = raw
                .iter()
                .map(|m| Ok(renormalize(&SpdMatrix::new(m.clone())?)?.into_inner()))
                .collect::<CliResult<Vec<_>>>()?;
            (Some(f), Some(renormalize(&model)?.into_inner()))
        }
        ShrinkMode::TwoByTwo => {
            let s = shrink_model(&design, &md.theta)?;
            debug_assert!(diag_deviation(&s.correlation).map(|d| d < 1e-12).unwrap_or(false));
            (Some(s.factors), Some(s.correlation))
        }
    };

    Ok(EstimationReport {
        tool: "kronfit",
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg.clone(),
        data: DataSummary {
            t: panel.t(),
            n: panel.n(),
            names: panel.names().map(<[String]>::to_vec),
        },
        labels: design.labels(),
        md: EstimateBlock {
            method: format!("md-{}", md.weight),
            theta: to_vec(&md.theta),
            std_errors: to_vec(&md.std_errors()),
            robust_std_errors: None,
            clipped_eigenvalues: Some(md.clipped),
        },
        one_step,
        factors: FactorBlock {
            raw: raw.iter().map(rows).collect(),
            shrunk: shrunk_factors.map(|f| f.iter().map(rows).collect()),
        },
        correlation: CorrelationBlock {
            model: rows(model.as_matrix()),
            max_diag_deviation,
            shrunk: shrunk_corr.as_ref().map(rows),
        },
        overid,
    })
}

pub fn simulate(cfg: &RunConfig) -> CliResult<SimulationReport> {
    let dims = cfg.factor_dims()?;
    let design = DesignMatrix::build(&dims);
    let theta0 = match &cfg.theta0 {
        Some(v) => DVector::from_column_slice(v),
        None => DVector::zeros(design.num_params()),
    };
    if theta0.len() != design.num_params() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} parameters", design.num_params()),
            found: theta0.len().to_string(),
        }
        .into());
    }
    let d0 = match &cfg.d0 {
        Some(v) => DVector::from_column_slice(v),
        None => DVector::from_element(dims.n(), 1.0),
    };
    let mut spec = DgpSpec::new(dims.clone(), theta0, d0, cfg.innovation, cfg.t, cfg.seed)?;
    if let Some(p) = cfg.perturb {
        spec = spec.with_perturbation(p)?;
    }
    let mut study = StudyConfig::new(cfg.reps, design.num_params());
    study.regime = cfg.regime;
    study.overid = dims.overid_df() > 0;
    study.estimators = Vec::new();
    for e in &cfg.estimators {
        study.estimators.push(match (e, &cfg.weight) {
            (EstimatorChoice::Md, WeightChoice::Optimal) => Estimator::MdOptimal,
            (EstimatorChoice::Md, WeightChoice::Identity) => Estimator::MdIdentity,
            (EstimatorChoice::Md, WeightChoice::File(_)) => {
                return Err(CliError::Config("simulate supports identity or optimal weights only".into()))
            }
            (EstimatorChoice::Onestep, _) => Estimator::OneStep,
        });
    }
    let summary = run_study(&spec, &study, cfg.workers)?;
    Ok(SimulationReport {
        tool: "kronfit",
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg.clone(),
        labels: design.labels(),
        summary,
    })
}

fn write_theta_csv(path: &Path, report: &EstimationReport) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["parameter", "md", "md_se"];
    if report.one_step.is_some() {
        header.extend(["one_step", "one_step_se"]);
    }
    w.write_record(&header)?;
    for (k, label) in report.labels.iter().enumerate() {
        let mut rec = vec![
            label.clone(),
            report.md.theta[k].to_string(),
            report.md.std_errors[k].to_string(),
        ];
        if let Some(os) = &report.one_step {
            rec.push(os.theta[k].to_string());
            rec.push(os.std_errors[k].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()
}

fn emit(out: Option<&Path>, doc: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(doc).expect("report serializes");
    text.push('\n');
    match out {
        Some(p) => fs::write(p, text).map_err(|source| CliError::Output {
            path: p.display().to_string(),
            source,
        }),
        None => io::stdout().write_all(text.as_bytes()).map_err(|source| CliError::Output {
            path: "<stdout>".into(),
            source,
        }),
    }
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    if cfg.command == "simulate" {
        return emit(cfg.out.as_deref(), &simulate(cfg)?);
    }
    let report = estimate(cfg)?;
    if let Some(p) = &cfg.theta_csv {
        write_theta_csv(p, &report).map_err(|source| CliError::Output {
            path: p.display().to_string(),
            source,
        })?;
    }
    emit(cfg.out.as_deref(), &report)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_DATA } else { EXIT_OK };
        }
    };
    let (name, args) = match cli.command {
        Command::Estimate(a) => ("estimate", a),
        Command::Test(a) => ("test", a),
        Command::Simulate(a) => ("simulate", a),
    };
    match RunConfig::resolve(name, args).and_then(|cfg| run(&cfg)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("kronfit: {e}");
            e.exit_code()
        }
    }
}
