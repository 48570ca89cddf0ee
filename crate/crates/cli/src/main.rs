use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use commands::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "rap",
    version,
    about = "Train, evaluate and inspect reinforced attention models",
    after_help = "Settings come from the defaults, then --config, then --set, then dedicated flags.\nRAP_THREADS caps the evaluation worker pool."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoints and metrics
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out data
    Eval(EvalArgs),
    /// Train and evaluate every cell of a settings grid
    Ablate(AblateArgs),
    /// Generate a patch-cue dataset directory
    MakeSynth(SynthArgs),
    /// Dump attention maps and patch-hit scores of a checkpoint
    InspectAttention(InspectArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Configuration file ([data], [backbone], [policy], [train], [eval])
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one setting; repeatable
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training seed (train.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for config.txt, metrics.jsonl, best.rapc and last.rapc
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttentionArg {
    /// Roll out the trained policy
    Policy,
    /// All-ones attention
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Replaces the configuration stored in the checkpoint
    #[command(flatten)]
    config: ConfigArgs,
    /// Evaluation seed (eval.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for eval.json and config.txt
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of test episodes (eval.episodes)
    #[arg(long)]
    episodes: Option<usize>,
    /// Attention used at test time
    #[arg(long, value_enum, default_value = "policy")]
    attention: AttentionArg,
    /// Held-out classes or images to evaluate on
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seed used when --seeds is absent
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for ablation.jsonl and table.txt
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Attention step counts, comma separated
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
    /// Reward weights, comma separated
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f32>,
    /// Attention settings (on, off, plain), comma separated
    #[arg(long, value_delimiter = ',')]
    attention: Vec<String>,
    /// Training seeds, comma separated
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Generator seed (data.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Number of classes (data.num_classes)
    #[arg(long)]
    classes: Option<usize>,
    /// Dataset directory to create
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Checkpoint to inspect
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Replaces the configuration stored in the checkpoint
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of held-out images
    #[arg(long, default_value_t = 200)]
    images: usize,
    /// Attention steps to roll out (defaults to train.steps)
    #[arg(long)]
    steps: Option<usize>,
    /// Directory for attention.txt and overlay.json
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::MakeSynth(a) => commands::make_synth(a),
        Command::InspectAttention(a) => commands::inspect(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
