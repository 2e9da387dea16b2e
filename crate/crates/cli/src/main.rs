//! `xma`: synth, distance, cluster, train, gradcheck, eval, report, repro.

mod commands;
mod config;
mod gradcheck;
mod repro;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failure of a subcommand, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag values (exit 1).
    Usage(String),
    /// Inputs that are readable but inconsistent (exit 2).
    Data(String),
    /// Anything reported by the library.
    Core(crossmodal::Error),
    /// A check that ran to completion and did not pass (exit 3).
    Check(String),
}

impl From<crossmodal::Error> for CliError {
    fn from(e: crossmodal::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use crossmodal::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
            CliError::Core(E::InvalidParameter(_)) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "xma", version, about = "Cross-modality clustering and prototype learning on synthetic embeddings")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOptions,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOptions {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// JSON file with `synth`, `cluster` and `train` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-modality corpus.
    Synth(commands::SynthArgs),
    /// Pairwise distances over an embedding file.
    Distance(commands::DistanceArgs),
    /// DBSCAN clustering, intra-modality or global.
    Cluster(commands::ClusterArgs),
    /// Two-stage training of the toy encoder.
    Train(commands::TrainArgs),
    /// Compare loss gradients with finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Retrieval, clustering and distance statistics.
    Eval(commands::EvalArgs),
    /// CSV tables from a training report or a corpus.
    Report(commands::ReportArgs),
    /// Scripted experiments.
    Repro(repro::ReproArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Cosine,
    Jaccard,
    MaJaccard,
}

impl MetricArg {
    pub fn name(self) -> &'static str {
        match self {
            MetricArg::Cosine => "cosine",
            MetricArg::Jaccard => "jaccard",
            MetricArg::MaJaccard => "ma-jaccard",
        }
    }
}

fn run(cli: Cli) -> CliResult {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let file = config::FileConfig::load(cli.global.config.as_deref())?;
    let g = &cli.global;
    match cli.command {
        Command::Synth(a) => commands::synth(g, &file, a),
        Command::Distance(a) => commands::distance(g, &file, a),
        Command::Cluster(a) => commands::cluster(g, &file, a),
        Command::Train(a) => commands::train(g, &file, a),
        Command::Gradcheck(a) => gradcheck::run(g, a),
        Command::Eval(a) => commands::eval(g, &file, a),
        Command::Report(a) => commands::report(g, &file, a),
        Command::Repro(a) => repro::run(g, &file, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xma: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
