//! `dval`: generate data, train, evaluate, score, sweep and verify gradients.
//!
//! Settings resolve as command-line flag, then config file, then built-in
//! default. Every command writes a JSON run manifest with SHA-256 hashes of
//! its inputs and outputs.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dval", version, about = "Dual-view alignment training and evaluation for long-tailed multi-label data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic long-tailed benchmark (train.dvds, test.dvds, stats.json).
    Generate(GenerateArgs),
    /// Train one stage (or the joint objective) and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset archive.
    Eval(EvalArgs),
    /// Score an external prediction file against archive labels.
    Score(ScoreArgs),
    /// Finite-difference gradient checks of the registered objectives.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate once per value of a hyperparameter; writes CSV.
    Sweep(SweepArgs),
    /// Print the default training configuration as TOML.
    DefaultConfig,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Generator spec (TOML). Defaults to the 12-class desk benchmark.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `seed` in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateArg {
    /// Dual-view alignment only: no hierarchical prompts.
    DvalOnly,
    /// Disable hierarchical prompt tuning.
    NoHpt,
    /// Drop the semantic-consistency term from stage two.
    NoSc,
    /// Optimize image tower and prompts together in one phase.
    Joint,
    /// Plain BCE instead of the distribution-balanced loss.
    Bce,
    /// Distribution-balanced loss without positive class weights.
    NoPosWeight,
}

/// Flags shared by commands that resolve a training configuration.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigFlags {
    /// Training configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Global-view weight α of the fused score.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Top-k pooling size.
    #[arg(long)]
    pub k: Option<usize>,
    /// Learnable prompt length M.
    #[arg(long = "prompt-len")]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub logit_scale: Option<f64>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub stage1_lr: Option<f64>,
    #[arg(long)]
    pub stage2_lr: Option<f64>,
    /// Ablation switches; repeatable.
    #[arg(long, value_enum)]
    pub ablate: Vec<AblateArg>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Directory holding train.dvds.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to continue from: a stage-1 checkpoint for stage 2, or an
    /// interrupted checkpoint of the same stage.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output checkpoint. Defaults to `<data>/stage<N>.dvck`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stop after this many optimizer steps of the stage, keeping resumable progress.
    #[arg(long)]
    pub stop_at_step: Option<u64>,
    #[command(flatten)]
    pub cfg: ConfigFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fixed,
    Hierarchical,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset archive, or a directory holding test.dvds.
    #[arg(long)]
    pub data: PathBuf,
    /// Text report path; the JSON report goes next to it with a `.json` extension.
    #[arg(long)]
    pub report: PathBuf,
    /// Archive whose class counts define head/medium/tail. Defaults to train.dvds beside the data.
    #[arg(long)]
    pub counts_from: Option<PathBuf>,
    /// Prompt set used for scoring. Defaults to hierarchical when the checkpoint has prompts.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Also write the fused scores as a prediction file.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Lines of `sample_id score_1 ... score_c`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Dataset archive supplying the labels.
    #[arg(long)]
    pub labels: PathBuf,
    /// Archive whose class counts define head/medium/tail. Defaults to train.dvds beside the labels.
    #[arg(long)]
    pub counts_from: Option<PathBuf>,
    /// Text report path; JSON goes next to it. Defaults to `<predictions>.report`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Suite name, `all`, or the negative control `broken-square`.
    #[arg(long, default_value = "all")]
    pub module: String,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    pub trials: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest path.
    #[arg(long, default_value = "gradcheck.manifest.json")]
    pub manifest: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Alpha,
    K,
    #[value(name = "M")]
    M,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Directory holding train.dvds and test.dvds.
    #[arg(long)]
    pub data: PathBuf,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Score(a) => commands::score(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::DefaultConfig => {
            print!("{}", dval_core::train::TrainConfig::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
