//! Command-line definitions.

use std::net::SocketAddr;
use std::path::PathBuf;

use cap_eval::config::ENV_CONFIG;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cap-eval", version, about = "Score advertisement images for alignment, creativity and persuasiveness")]
pub struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, env = ENV_CONFIG)]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score the evaluation split and write score and component tables.
    Score(ScoreArgs),
    /// Generate ad prompts or images.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Build training datasets.
    #[command(subcommand)]
    Build(BuildCommand),
    /// Compute agreement tables from annotations and stored scores.
    Agreement(AgreementArgs),
    /// Serve the annotation API.
    Serve(ServeArgs),
    /// Rewrite report tables from stored scores.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Comma list of metrics: cite, creativity, pa.
    #[arg(long, default_value = "cite,creativity,pa")]
    pub metrics: String,
    /// Dataset file, overriding the config.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Concurrency limit, overriding the config.
    #[arg(long)]
    pub max_inflight: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum GenCommand {
    /// Write one visual ad description per (record, statement).
    Prompts(GenPromptsArgs),
    /// Send prompts to an image-generation endpoint and store the images.
    Images(GenImagesArgs),
}

#[derive(Debug, Args)]
pub struct GenPromptsArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output JSONL of `{record_id, statement_index, d_llm}`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageSource {
    /// Use generated ad descriptions from `--prompts`.
    Llm,
    /// Use the action-reason statements themselves.
    Ar,
}

#[derive(Debug, Args)]
pub struct GenImagesArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "llm")]
    pub source: ImageSource,
    /// Prompt file written by `gen prompts`; required for `--source llm`.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible image-generation server.
    #[arg(long)]
    pub endpoint: String,
    #[arg(long, default_value = "aura-flow")]
    pub model: String,
    /// Output directory for images and the derived dataset file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum BuildCommand {
    /// Build preference triples from descriptions and hard negatives.
    CpoDataset(CpoArgs),
}

#[derive(Debug, Args)]
pub struct CpoArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// JSONL of `{record_id, statement}` hard negatives.
    #[arg(long)]
    pub negatives: PathBuf,
    /// Precomputed JSONL of `{record_id, description}`; generated with the
    /// vision backend when absent.
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
    /// Output JSONL of `{prompt, chosen, rejected}`.
    #[arg(long)]
    pub out: PathBuf,
    /// Trainer config stub path; defaults to `<out>.training.json`.
    #[arg(long)]
    pub training_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AgreementArgs {
    /// JSONL of `{pair_id, left_record, right_record}`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// JSONL annotation export.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory holding a scoring run.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep metric ties as a third category instead of dropping them.
    #[arg(long)]
    pub keep_ties: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// JSONL of `{pair_id, left_record, right_record}`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Append-only annotation log; replayed on start.
    #[arg(long)]
    pub log: PathBuf,
    /// Left/right shuffle seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum pairs per annotator session.
    #[arg(long)]
    pub quota: Option<usize>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Directory of static client assets served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Scores,
    Components,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding a scoring run.
    #[arg(long)]
    pub scores: PathBuf,
    /// Output directory; defaults to the scores directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "scores,components")]
    pub shape: Vec<ReportKind>,
}
