use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod error;

#[derive(Parser, Debug)]
#[command(name = "conspace", version, about = "Align video features to a concept space and model embedding sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired video/caption dataset.
    Gen(GenArgs),
    /// Generate a rule-based embedding-sequence corpus.
    GenSeq(GenSeqArgs),
    /// Train the projector through a curriculum of stages.
    Align(AlignArgs),
    /// Train the latent diffusion next-embedding model.
    TrainLcm(TrainLcmArgs),
    /// Evaluate a projector on a dataset split.
    Eval(EvalArgs),
    /// Sample next embeddings from a trained model.
    Sample(SampleArgs),
    /// Write the JSON schemas of the config, stage and report files.
    Schema(SchemaArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the sample stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub dim_frame: Option<usize>,
    #[arg(long)]
    pub dim_concept: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub bank_size: Option<usize>,
    /// Seed of the world (mixing matrix and caption bank).
    #[arg(long)]
    pub world_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenSeqArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Seed of the bank and the rule.
    #[arg(long, default_value_t = 11)]
    pub world_seed: u64,
    #[arg(long, default_value_t = 64)]
    pub bank_size: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub distractors: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stage files in curriculum order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub stages: Vec<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainLcmArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sequence corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ckpt_every: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Projector checkpoint directory.
    #[arg(long)]
    pub projector: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Report file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-video drift against gold and decoded captions.
    #[arg(long)]
    pub drift: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Two-tower checkpoint directory.
    #[arg(long)]
    pub lcm: PathBuf,
    /// Embedding file holding the prefix rows.
    #[arg(long)]
    pub prefix: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Independent samples to draw.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Output embedding file.
    #[arg(long)]
    pub out: PathBuf,
    /// Caption bank to decode samples against.
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SchemaArgs {
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::GenSeq(a) => commands::gen_seq(&a),
        Command::Align(a) => commands::align(&a),
        Command::TrainLcm(a) => commands::train_lcm(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Schema(a) => commands::schema(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
