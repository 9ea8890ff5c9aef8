//! `dopra`: decode, inspect traces, generate scenarios, and score outputs.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::DecodeFlags;

pub const DEFAULTS_HELP: &str = "\
Defaults: alpha=1  beta=5  r=15  sigma=50  n_can=5  layer=12 (zero-based)
          k=16  l=k  n_beam=5  max_new=64  length_penalty=1
Exit status: 0 success, 1 invalid arguments or settings, 2 unreadable or malformed input.";

#[derive(Debug, Parser)]
#[command(name = "dopra", version, about = "Over-accumulation penalized beam search", after_help = DEFAULTS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Decode a prompt with a toy model or a recorded trace
    #[command(after_help = DEFAULTS_HELP)]
    Decode(DecodeArgs),
    /// Dump the detector's window, column scores, phi and c per trace step (JSON lines)
    #[command(after_help = DEFAULTS_HELP)]
    Inspect(InspectArgs),
    /// Generate a synthetic scenario trace
    #[command(after_help = DEFAULTS_HELP)]
    Gen(GenArgs),
    /// Run a detector sensitivity sweep over planted scenarios
    #[command(after_help = DEFAULTS_HELP)]
    Sweep(SweepArgs),
    /// Caption hallucination ratios
    #[command(after_help = DEFAULTS_HELP)]
    Chair(ChairArgs),
    /// Yes/no probe scores
    #[command(after_help = DEFAULTS_HELP)]
    Pope(PopeArgs),
    /// Query/visual response map and PGM heatmap
    #[command(after_help = DEFAULTS_HELP)]
    Heatmap(HeatmapArgs),
}

#[derive(Debug, clap::Args)]
pub struct DecodeArgs {
    /// Replay a recorded trace
    #[arg(long, conflicts_with_all = ["toy_seed", "toy_config"])]
    pub trace: Option<PathBuf>,
    /// Build the toy model with this seed
    #[arg(long = "toy-seed")]
    pub toy_seed: Option<u64>,
    /// Toy model settings (TOML)
    #[arg(long = "toy-config")]
    pub toy_config: Option<PathBuf>,
    /// Toy prompt token ids, comma-separated
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    pub prompt: Vec<u32>,
    /// Leading prompt tokens treated as image tokens
    #[arg(long = "n-image", default_value_t = 4)]
    pub n_image: usize,
    /// Decode settings file (TOML, keys named like the flags' config fields)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: DecodeFlags,
    /// Record the toy run as a trace file
    #[arg(long, conflicts_with = "trace")]
    pub record: Option<PathBuf>,
    /// Store every layer when recording
    #[arg(long = "full-tensor", requires = "record")]
    pub full_tensor: bool,
    /// Write the JSON result here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Window size
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// Window scale factor
    #[arg(long, default_value_t = 50.0)]
    pub sigma: f64,
    /// Zero-based layer (defaults to the trace's stored layer)
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct GenArgs {
    /// Scenario description (JSON)
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    /// Sweep grid (JSON)
    #[arg(long)]
    pub grid: PathBuf,
    /// CSV destination (stdout if omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ChairArgs {
    /// Caption records (JSON lines)
    #[arg(long)]
    pub records: PathBuf,
    /// Object lexicon
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Probe records to add a summary table row
    #[arg(long)]
    pub pope: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct PopeArgs {
    /// Probe records (JSON lines)
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct HeatmapArgs {
    /// Query matrix (DPRM or CSV)
    #[arg(long)]
    pub query: PathBuf,
    /// Visual embeddings (DPRM or CSV)
    #[arg(long)]
    pub visual: PathBuf,
    /// Patch grid as ROWSxCOLS
    #[arg(long)]
    pub grid: dopra_core::response::Grid,
    #[arg(long, default_value_t = 50)]
    pub topk: usize,
    /// PGM destination
    #[arg(long)]
    pub out: PathBuf,
    /// Write plain-text P2 instead of binary P5
    #[arg(long)]
    pub plain: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Decode(a) => commands::decode(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Gen(a) => commands::gen(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Chair(a) => commands::chair(a),
        Command::Pope(a) => commands::pope(a),
        Command::Heatmap(a) => commands::heatmap(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
