mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Nested multi-resolution diffusion on toy image data.
#[derive(Debug, Parser)]
#[command(name = "nestdiff", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Output directory, defaulting to `$NESTDIFF_OUT/<command>`.
#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root used when --out is absent.
    #[arg(long, env = "NESTDIFF_OUT", hide_env_values = true)]
    pub out_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    /// Nested model with the multi-resolution loss.
    Mdm,
    /// Nested stages joined into one plain UNet.
    SimpleUnet,
    /// Nested model trained on the finest-level loss only.
    SimpleNested,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a shapes dataset cache.
    MakeData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train (or resume) a model.
    Train {
        /// Architecture listing.
        #[arg(long)]
        config: PathBuf,
        /// Training listing; optional when resuming.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Dataset cache file or the directory written by make-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Variant::Mdm)]
        variant: Variant,
        /// Print a progress line every this many steps (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Score samples against reference data.
    Eval {
        /// Sample from this checkpoint first.
        #[arg(long, conflicts_with = "samples", required_unless_present = "samples")]
        checkpoint: Option<PathBuf>,
        /// Directory written by the sample command.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Reference dataset cache (also the held-out set for validation loss).
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of pixel_frechet, sliced_wasserstein, validation_loss.
        #[arg(long, value_delimiter = ',', default_value = "pixel_frechet,sliced_wasserstein")]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 8)]
        eval_side: usize,
        #[arg(long, default_value_t = 256)]
        projections: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Print a noise schedule table.
    InspectSchedule {
        #[arg(long, default_value = "cosine")]
        schedule: String,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
    },
    /// Merge metrics logs into one CSV keyed by step.
    Compare {
        /// metrics.jsonl files (or run directories containing one).
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Column prefixes, one per log; defaults to the parent directory names.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub cfg_weight: f64,
    #[arg(long, default_value_t = nestdiff::sampler::DEFAULT_NUM_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = nestdiff::sampler::DEFAULT_PERCENTILE)]
    pub threshold_percentile: f64,
    /// Draw every sample from this class instead of cycling through all.
    #[arg(long)]
    pub class: Option<usize>,
    /// Sample unconditionally.
    #[arg(long, conflicts_with = "class")]
    pub unconditional: bool,
}

/// Exit code for each error class.
pub fn exit_code(class: &str) -> u8 {
    match class {
        "usage" => 2,
        "invalid-argument" => 3,
        "parse" => 4,
        "consistency" => 5,
        "capacity" => 6,
        "non-finite" => 7,
        "mismatch" => 8,
        "format" => 9,
        "io" => 10,
        "json" => 11,
        _ => 1,
    }
}

fn fail(class: &str, msg: &str) -> ExitCode {
    let line = msg.lines().next().unwrap_or_default();
    eprintln!("error[{class}]: {line}");
    ExitCode::from(exit_code(class))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text.trim_start_matches("error: ");
            return fail("usage", line);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.class(), &e.to_string()),
    }
}
