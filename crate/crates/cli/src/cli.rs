use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tdst", version, about = "Open-vocabulary dialogue state tracking with a shared-weight Transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus split 8:1:1 into train/dev/test.
    Gen(GenArgs),
    /// Train a model and write its checkpoint and metric log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Track a dialogue typed one turn per line.
    Infer(InferArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and score one model per reuse configuration.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Schema JSON; the built-in 9-slot schema when omitted.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub max_turns: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory written by `gen` (or laid out the same way).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Previous state fed to the model: `gold` or `predicted`.
    #[arg(long, default_value = "predicted")]
    pub mode: String,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Where to write the JSON report; next to the checkpoint by default.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model settings and seed; the built-in toy settings when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = tdst::gradcheck::DEFAULT_EPS)]
    pub eps: f64,
    /// Number of (domain, slot) pairs in the check schema.
    #[arg(long, default_value_t = 4)]
    pub slots: usize,
    /// Initialisation scale for the checked model.
    #[arg(long, default_value_t = 0.1)]
    pub init_std: f64,
    /// Coordinates sampled per parameter tensor; 0 checks every coordinate.
    #[arg(long, default_value_t = 16)]
    pub per_param: usize,
    /// Scale the backward rule of one op (gelu, softmax, layernorm, matmul)
    /// to confirm the check catches it.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated reuse specs such as `full,curr+slot`, or `all`.
    #[arg(long, default_value = "all")]
    pub specs: String,
    /// Directory for the JSON table and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}
