//! Command-line driver for the confood detector.
//!
//! Exit codes: 0 success (or in-distribution for a single-query `detect`),
//! 1 OOD for a single-query `detect`, 2 configuration or input errors,
//! 3 probe handshake failure, 4 failures during a run.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use confood_core::LayerId;
use thiserror::Error;

pub use config::{ConfigLayer, ModelKind, Settings};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("probe handshake failed: {0}")]
    Handshake(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Handshake(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "confood",
    version,
    about = "Conformal OOD detection from dropout tolerance",
    after_help = "Settings resolve as flags > config file (--config or CONFOOD_CONFIG) > \
                  CONFOOD_<KEY> environment variables > defaults."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (id_queries.jsonl, ood_queries.jsonl).
    Simulate(SimulateArgs),
    /// Measure calibration queries and write per-layer calibration sets.
    Calibrate(CalibrateArgs),
    /// Score queries against calibration sets.
    Detect(DetectArgs),
    /// Run the full split/calibrate/score protocol and write a report.
    Evaluate(EvaluateArgs),
    /// Serve a synthetic corpus over the stdio probe protocol.
    #[command(hide = true)]
    ServeSynthetic(ServeArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    /// JSON config file with the same keys as the flags (snake_case).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Directory for output files; must already exist.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Seed for corpus generation and calibration splits.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (and probe processes with --model probe).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    /// Subject model backend.
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Probe command line, shell-split (with --model probe).
    #[arg(long, value_name = "ARGV", allow_hyphen_values = true)]
    pub probe_cmd: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DetectorFlags {
    /// Layers to probe, comma separated.
    #[arg(long, value_delimiter = ',', value_name = "L1,L2,...")]
    pub layers: Option<Vec<LayerId>>,
    /// Most activated neurons considered per layer (m).
    #[arg(long)]
    pub max_drop: Option<usize>,
    /// Neurons added per dropout step (n).
    #[arg(long)]
    pub step: Option<usize>,
    /// Also try dropping exactly max-drop neurons.
    #[arg(long)]
    pub inclusive_bound: bool,
    /// P-value merging function.
    #[arg(long, value_parser = ["hm", "am", "gm", "bm", "bonferroni", "harmonic", "arithmetic", "geometric"])]
    pub method: Option<String>,
    /// Detection threshold; OOD iff the merged p-value is below it.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SplitFlags {
    /// Number of random calibration/test splits.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Fraction of in-distribution queries used for calibration.
    #[arg(long)]
    pub cal_frac: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SpecFlags {
    /// In-distribution queries to generate.
    #[arg(long)]
    pub n_id: Option<usize>,
    /// OOD queries to generate.
    #[arg(long)]
    pub n_ood: Option<usize>,
    /// Center of the in-distribution redundancy parameter.
    #[arg(long)]
    pub rho_id: Option<f64>,
    /// Center of the OOD redundancy parameter.
    #[arg(long)]
    pub rho_ood: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub spec: SpecFlags,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub detector: DetectorFlags,
    /// Calibration queries (JSONL corpus entries or {"id","text"} lines).
    #[arg(long, value_name = "PATH")]
    pub queries: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub detector: DetectorFlags,
    /// Queries to score (JSONL corpus entries or {"id","text"} lines).
    #[arg(long, value_name = "PATH")]
    pub queries: Option<PathBuf>,
    /// Directory holding calibration_l<layer>.json files.
    #[arg(long, value_name = "DIR")]
    pub calibration: Option<PathBuf>,
    /// Score only this query from --queries; the exit code is the verdict.
    #[arg(long, conflicts_with = "query")]
    pub query_id: Option<String>,
    /// Score this query text directly; the exit code is the verdict.
    #[arg(long)]
    pub query: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub detector: DetectorFlags,
    #[command(flatten)]
    pub split: SplitFlags,
    #[command(flatten)]
    pub spec: SpecFlags,
    /// In-distribution queries; generated from the spec flags when absent.
    #[arg(long, value_name = "PATH", requires = "ood_queries")]
    pub id_queries: Option<PathBuf>,
    /// OOD queries; generated from the spec flags when absent.
    #[arg(long, value_name = "PATH", requires = "id_queries")]
    pub ood_queries: Option<PathBuf>,
    /// Add an ensemble row for every merging function.
    #[arg(long)]
    pub all_methods: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Corpus files to serve; repeatable.
    #[arg(long = "queries", value_name = "PATH", required = true)]
    pub corpora: Vec<PathBuf>,
}

impl CommonFlags {
    fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            out_dir: self.out_dir.clone(),
            seed: self.seed,
            jobs: self.jobs,
            ..ConfigLayer::default()
        }
    }
}

impl ModelFlags {
    fn apply(&self, layer: &mut ConfigLayer) {
        layer.model = self.model;
        layer.probe_cmd = self.probe_cmd.clone();
    }
}

impl DetectorFlags {
    fn apply(&self, layer: &mut ConfigLayer) {
        layer.layers = self.layers.clone();
        layer.max_drop = self.max_drop;
        layer.step = self.step;
        layer.inclusive_bound = self.inclusive_bound.then_some(true);
        layer.method = self.method.clone();
        layer.epsilon = self.epsilon;
    }
}

impl SpecFlags {
    fn apply(&self, layer: &mut ConfigLayer) {
        layer.n_id = self.n_id;
        layer.n_ood = self.n_ood;
        layer.rho_id = self.rho_id;
        layer.rho_ood = self.rho_ood;
    }
}

impl Command {
    /// Settings given on the command line, plus the config file path.
    pub fn flag_layer(&self) -> (ConfigLayer, Option<PathBuf>) {
        let (common, layer) = match self {
            Command::Simulate(a) => {
                let mut l = a.common.layer();
                a.spec.apply(&mut l);
                (&a.common, l)
            }
            Command::Calibrate(a) => {
                let mut l = a.common.layer();
                a.model.apply(&mut l);
                a.detector.apply(&mut l);
                l.queries = a.queries.clone();
                (&a.common, l)
            }
            Command::Detect(a) => {
                let mut l = a.common.layer();
                a.model.apply(&mut l);
                a.detector.apply(&mut l);
                l.queries = a.queries.clone();
                l.calibration = a.calibration.clone();
                (&a.common, l)
            }
            Command::Evaluate(a) => {
                let mut l = a.common.layer();
                a.model.apply(&mut l);
                a.detector.apply(&mut l);
                a.spec.apply(&mut l);
                l.runs = a.split.runs;
                l.cal_frac = a.split.cal_frac;
                l.id_queries = a.id_queries.clone();
                l.ood_queries = a.ood_queries.clone();
                l.all_methods = a.all_methods.then_some(true);
                (&a.common, l)
            }
            Command::ServeSynthetic(_) => return (ConfigLayer::default(), None),
        };
        (layer, common.config.clone())
    }
}

/// Runs one invocation against the given environment.
pub fn run(
    cli: Cli,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<ExitCode, CliError> {
    if let Command::ServeSynthetic(args) = &cli.command {
        return commands::serve_synthetic(args);
    }
    let (flags, config_path) = cli.command.flag_layer();
    let settings = config::resolve(flags, config_path.as_deref(), env)?;
    match &cli.command {
        Command::Simulate(_) => commands::simulate(&settings),
        Command::Calibrate(_) => commands::calibrate(&settings),
        Command::Detect(a) => {
            commands::detect(&settings, a.query_id.as_deref(), a.query.as_deref())
        }
        Command::Evaluate(_) => commands::evaluate(&settings),
        Command::ServeSynthetic(_) => unreachable!(),
    }
}
