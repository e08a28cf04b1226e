mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::failure::Failure;

/// Train, sample and evaluate multiscale mel-spectrogram models.
///
/// Artifacts go under $MELNET_OUTPUT (default ./melnet-out).
#[derive(Debug, Parser)]
#[command(name = "melnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ToyKindArg {
    Tones,
    CharToTone,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InvertMethod {
    GriffinLim,
    Gradient,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute (or reuse) cached spectrograms for the configured corpus.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Train one tier on the configured corpus.
    Train {
        #[command(flatten)]
        common: Common,
        /// 1-based tier index.
        #[arg(long)]
        tier: usize,
        /// Continue from the existing tier checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Generate a spectrogram through all tiers and invert it to audio.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        temperature: Option<f64>,
        /// WAV whose leading frames are clamped.
        #[arg(long)]
        prime: Option<PathBuf>,
        /// Transcript for text-conditioned models.
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        speaker: Option<usize>,
        /// Base name of the output files.
        #[arg(long)]
        name: Option<String>,
    },
    /// Reconstruct audio from the log-mel spectrogram of a WAV file.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "griffin-lim")]
        method: InvertMethod,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Held-out negative log-likelihood of the trained tiers.
    Nll {
        #[command(flatten)]
        common: Common,
    },
    /// Train and compare density models on synthetic corpora.
    BenchDensity {
        #[command(flatten)]
        common: Common,
        /// Training steps per model.
        #[arg(long, default_value_t = 600)]
        steps: usize,
        /// Also run the text-conditional comparison on char-to-tone grids.
        #[arg(long)]
        with_text: bool,
    },
    /// Write a synthetic toy corpus of WAV files.
    Toydata {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: ToyKindArg,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Frames per character or per tone segment.
        #[arg(long, default_value_t = 7)]
        frames_per_unit: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Prepare { common } => commands::prepare(&common),
        Command::Train { common, tier, resume } => commands::train(&common, tier, resume),
        Command::Sample {
            common,
            temperature,
            prime,
            text,
            speaker,
            name,
        } => commands::sample(&common, temperature, prime.as_deref(), text.as_deref(), speaker, name),
        Command::Invert {
            common,
            input,
            method,
            output,
        } => commands::invert(&common, &input, method, output),
        Command::Nll { common } => commands::nll(&common),
        Command::BenchDensity { common, steps, with_text } => commands::bench_density(&common, steps, with_text),
        Command::Toydata {
            common,
            kind,
            size,
            frames_per_unit,
            out,
        } => commands::toydata(&common, kind, size, frames_per_unit, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            let reason = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            return Failure::Usage(reason).report();
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
