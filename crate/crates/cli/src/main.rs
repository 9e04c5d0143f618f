//! `roadseg` command-line entry point.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use roadseg::eval::{ReportFormat, TotalMode};
use roadseg::EncoderVariant;

use crate::run::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "roadseg",
    version,
    about = "Road-surface semantic segmentation toolkit"
)]
struct Cli {
    /// Root under which runs without an explicit --out get their own directory.
    #[arg(
        long,
        global = true,
        env = "ROADSEG_OUTPUT_ROOT",
        default_value = "runs"
    )]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a corpus and report its class-pixel distribution and weights.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic annotated corpus.
    Synth(SynthArgs),
    /// Train a configuration (preset or run file) on a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Predict a colored mask and overlay for one image.
    Predict(PredictArgs),
    /// Render saved metrics reports and a side-by-side comparison.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Label schema JSON; defaults to the built-in road schema.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// TOML recipe with any of: n, width, height, profile, noise_level, seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run file (preset plus overrides, or explicit stages).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset, e.g. r34-DW.
    #[arg(long)]
    preset: Option<String>,
    /// Corpus manifest; overrides the run file's.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<Encoder>,
    /// Epochs for every stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Long runs: 100 epochs per stage.
    #[arg(long = "final")]
    final_mode: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = Total::Pixel)]
    total: Total,
    /// Name recorded in the report; defaults to the checkpoint's stage name.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output mask path; defaults to `<image stem>_mask.png` in a new run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overlay path; defaults to `<out stem>_overlay.png`.
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Metrics report JSON files written by train or eval.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "csv,json,png")]
    format: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Encoder {
    R34,
    R50,
    Tiny,
}

impl From<Encoder> for EncoderVariant {
    fn from(e: Encoder) -> Self {
        match e {
            Encoder::R34 => EncoderVariant::R34Like,
            Encoder::R50 => EncoderVariant::R50Like,
            Encoder::Tiny => EncoderVariant::Tiny,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Total {
    Pixel,
    ClassMean,
}

impl From<Total> for TotalMode {
    fn from(t: Total) -> Self {
        match t {
            Total::Pixel => TotalMode::Pixel,
            Total::ClassMean => TotalMode::ClassMean,
        }
    }
}

fn parse_formats(raw: &[String]) -> Result<Vec<ReportFormat>, Failure> {
    raw.iter()
        .map(|f| f.parse::<ReportFormat>().map_err(Failure::from))
        .collect()
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
    let root = cli.output_root;
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(&root, a),
        Command::Synth(a) => commands::synth(&root, a),
        Command::Train(a) => commands::train(&root, a),
        Command::Eval(a) => commands::eval(&root, a),
        Command::Predict(a) => commands::predict(&root, a),
        Command::Report(a) => parse_formats(&a.format).and_then(|f| commands::report(&root, a, f)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
