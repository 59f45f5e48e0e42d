//! `deepboots` — command-line driver for the boosting forecaster.
//!
//! Subcommands: `train`, `eval`, `decompose`, `ablate`, `theory`. Every run
//! writes a manifest (resolved configuration, dataset fingerprint, artifact
//! paths) next to its outputs so results can be replayed bit-for-bit.
//!
//! Exit codes: 0 success, 1 runtime/data failure, 2 usage error.

mod commands;
mod manifest;
mod variants;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "deepboots",
    about = "Dual-stream residual-boosting forecaster",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a CSV series and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a CSV series.
    Eval(EvalArgs),
    /// Write per-block contribution CSVs for one test window.
    Decompose(DecomposeArgs),
    /// Train stream-aggregation variants over several seeds and compare.
    Ablate(AblateArgs),
    /// Run the numerical checks of the underlying ensemble mathematics.
    Theory(TheoryArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionFlag {
    Full,
    Freq,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggFlag {
    Sub,
    Add,
}

#[derive(Clone, Copy, ValueEnum)]
enum GatingFlag {
    On,
    Off,
}

/// Flags shared by every command that trains a model.
#[derive(Args, Clone)]
struct ModelFlags {
    /// Input window length I.
    #[arg(long, default_value_t = 96)]
    input_len: usize,
    /// Prediction length O.
    #[arg(long, default_value_t = 96)]
    pred_len: usize,
    /// Number of boosting blocks L.
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    /// Embedding width E.
    #[arg(long, default_value_t = 128)]
    embed: usize,
    #[arg(long, value_enum, default_value_t = AttentionFlag::Full)]
    attention: AttentionFlag,
    /// Input-stream aggregation sign.
    #[arg(long, value_enum, default_value_t = AggFlag::Sub)]
    input_agg: AggFlag,
    /// Output-stream aggregation sign.
    #[arg(long, value_enum, default_value_t = AggFlag::Sub)]
    output_agg: AggFlag,
    #[arg(long, value_enum, default_value_t = GatingFlag::On)]
    gating: GatingFlag,
    /// Attention head count.
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training CSV (header row; optional leading `date` column).
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Output directory (default: $DEEPBOOTS_OUT or ./deepboots-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated metric tokens: mse, mae, rmsp, mape, smape, mase:m,
    /// quantile:q.
    #[arg(long, default_value = "mse,mae")]
    metrics: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Index of the window within the test split (stride 1).
    #[arg(long, default_value_t = 0)]
    window_index: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated variant tokens, e.g. "-X-Y+G,+X+Y".
    #[arg(long, default_value = "-X-Y+G,+X+Y", allow_hyphen_values = true)]
    variants: String,
    /// Seeds per variant.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TheoryCheck {
    /// Error decomposition into variance + bias² + noise.
    Decomposition,
    /// Variance reduction by averaging N independent learners.
    Averaging,
    /// Closed-form MSE gap under a distribution shift, plus its simulation.
    DriftGap,
    /// Convex-ensemble ambiguity identity.
    Ambiguity,
    /// Alternating-weight ensemble identity.
    Alternating,
    /// Block-combination variance: alternating vs additive aggregation.
    BlockVariance,
    All,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, value_enum, default_value_t = TheoryCheck::All)]
    check: TheoryCheck,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ensemble size N for the averaging check.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Block count L for the block-variance check (must be even).
    #[arg(long, default_value_t = 2)]
    l: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    #[arg(long, default_value_t = 0.5)]
    mu: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Decompose(args) => commands::decompose(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::Theory(args) => commands::theory(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
