//! `longdoc` command-line driver.
//!
//! Every subcommand reads an optional TOML/JSON config, applies flag
//! overrides on top, and writes `run_manifest.json` next to its outputs.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::UsageError;

#[derive(Debug, Parser)]
#[command(name = "longdoc", version, about = "Long-document VQA data construction and evaluation")]
pub struct Cli {
    /// Log verbosity: repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus manifest and write its canonical form.
    Ingest(IngestArgs),
    /// Generate continued-pretraining examples.
    CptGen(CptGenArgs),
    /// Run an instruction-tuning synthesis pipeline.
    SftGen(SftGenArgs),
    /// Build preference pairs with short and long contexts.
    LongpoPairs(LongpoPairsArgs),
    /// Compute the preference loss over scored pairs.
    LongpoLoss(LongpoLossArgs),
    /// Split examples into stages and order them.
    Schedule(ScheduleArgs),
    /// Pack ordered examples into fixed-budget sequences.
    Pack(PackArgs),
    /// Apply a task-vector merge recipe.
    Merge(MergeArgs),
    /// Normalize and aggregate benchmark scores.
    Evalagg(EvalaggArgs),
    /// Flag benchmark items and create a review store.
    Flag(FlagArgs),
    /// Serve the review API over a store.
    ReviewServe(ReviewServeArgs),
    /// Render the leaderboard as JSON or HTML.
    ExportLeaderboard(ExportLeaderboardArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ClientArgs {
    /// Answer requests from a mock fixture instead of the network.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    /// Endpoint base URL; defaults to GENAI_BASE_URL.
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub max_in_flight: usize,
    /// Directory of prompt template overrides.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Corpus manifest (JSONL).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Neighbor lists (JSONL).
    #[arg(long)]
    pub neighbors: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub neighbors: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CptTask {
    Fim,
    Unshuffle,
    RetrievalKey,
    RetrievalPosition,
    Counting,
}

#[derive(Debug, Args)]
pub struct CptGenArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task to generate; repeatable, overrides the config list.
    #[arg(long, value_enum)]
    pub task: Vec<CptTask>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub instances_per_doc: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub client: ClientArgs,
}

#[derive(Debug, Args)]
pub struct SftGenArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Pipeline config.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_examples: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub client: ClientArgs,
}

#[derive(Debug, Args)]
pub struct LongpoPairsArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_pairs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub client: ClientArgs,
}

#[derive(Debug, Args)]
pub struct LongpoLossArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Also write the report and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Example files (JSONL); repeatable.
    #[arg(long, required = true)]
    pub examples: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// none, length or length-difficulty.
    #[arg(long)]
    pub curriculum: Option<String>,
    #[arg(long)]
    pub mix_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Insert "Page i:" text before each page image.
    #[arg(long)]
    pub page_indices: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long, required = true)]
    pub examples: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// short or long; sets the default budget.
    #[arg(long)]
    pub stage: Option<String>,
    /// Use the smaller long-stage budget.
    #[arg(long)]
    pub qwen: bool,
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Merge recipe; relative paths resolve against its directory.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Manifest directory; defaults to the output file's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalaggArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlagArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub extractor_model: Option<String>,
    #[arg(long)]
    pub judge_model: Option<String>,
    /// Store directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub client: ClientArgs,
}

#[derive(Debug, Args)]
pub struct ReviewServeArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Defaults to REVIEW_BIND_ADDR, then 127.0.0.1:8080.
    #[arg(long)]
    pub bind: Option<String>,
    /// Directory of built UI assets served at /.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Html,
}

#[derive(Debug, Args)]
pub struct ExportLeaderboardArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Checkpoint metadata: a map from checkpoint to method, base model, merge recipe and data composition.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, value_enum, default_value_t = FormatArg::Html)]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `argv`, run, and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                2
            } else {
                1
            }
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).try_init();
}
