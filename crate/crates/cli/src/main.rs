//! `sonar`: data generation, band analysis, training, evaluation and
//! filter inspection.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sonar_core::model::{Mode, QuerySource};
use sonar_core::parallel::Execution;
use sonar_core::SonarError;

#[derive(Debug, Parser)]
#[command(
    name = "sonar",
    version,
    about = "Synthetic-speech detection with constrained noise filters"
)]
struct Cli {
    /// Run every per-clip loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus (WAVs plus manifest.csv).
    GenData(GenDataArgs),
    /// Per-clip band statistics and a class-conditional summary.
    Analyze(AnalyzeArgs),
    /// Train a detector on the train/val splits of a manifest.
    Train(TrainArgs),
    /// Score clips with a checkpoint.
    Eval(EvalArgs),
    /// EER, threshold, cosine means and DET points from a scores file.
    Metrics(MetricsArgs),
    /// Dump filter taps and their magnitude responses as JSON.
    InspectFilters(InspectArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n_real: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_fake: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64_600)]
    pub clip_samples: usize,
    #[arg(long, default_value_t = 12.0)]
    pub hf_atten_db: f64,
    #[arg(long, default_value_t = 1.0)]
    pub coupling: f64,
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for band_stats.csv, summary.json and config.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Lite,
    Full,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lite => Mode::Lite,
            ModeArg::Full => Mode::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryArg {
    Content,
    Noise,
}

impl From<QueryArg> for QuerySource {
    fn from(q: QueryArg) -> Self {
        match q {
            QueryArg::Content => QuerySource::Content,
            QueryArg::Noise => QuerySource::Noise,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_js: f64,
    #[arg(long, default_value_t = 30)]
    pub m_filters: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Lite)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_start: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub lr_end: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, value_enum, default_value_t = QueryArg::Content)]
    pub query: QueryArg,
    /// Keep the filter taps at their initial values.
    #[arg(long)]
    pub freeze_srm: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scores CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// DET points CSV; defaults to det.csv beside the scores file.
    #[arg(long)]
    pub det_out: Option<PathBuf>,
    /// Also write the JSON summary here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    /// Read the bank from a checkpoint instead of a fresh init.
    #[arg(long, conflicts_with = "m_filters")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub m_filters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frequencies per response, evenly spaced over [0, pi].
    #[arg(long, default_value_t = 65)]
    pub points: usize,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Usage and config errors exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err
        .chain()
        .filter_map(|e| e.downcast_ref::<SonarError>())
        .any(SonarError::is_usage);
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::available()
    };
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a, exec),
        Command::Analyze(a) => commands::analyze(a, exec),
        Command::Train(a) => commands::train(a, exec),
        Command::Eval(a) => commands::eval(a, exec),
        Command::Metrics(a) => commands::metrics(a),
        Command::InspectFilters(a) => commands::inspect_filters(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
