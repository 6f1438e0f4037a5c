//! `advmakeup`: prepare data, train the victim, train the attack, generate
//! adversarial images and evaluate them.
//!
//! Every command reads an optional JSON config (`--config`), applies flag
//! overrides on top, validates everything before touching the output
//! directory, and writes the resolved config plus its digest next to its
//! outputs. Exit codes: 0 success, 2 invalid input, 3 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "advmakeup", version, about = "Adversarial makeup against a face classifier")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct GlobalArgs {
    /// JSON config; flags given on the command line win over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed, fanned out to every component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Keep run histories free of wall-clock readings so reruns are
    /// byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Detect, crop and resize every face of a raw image tree.
    Prepare(PrepareArgs),
    /// Train the victim classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Train the makeup generators against a frozen victim.
    TrainAttack(TrainAttackArgs),
    /// Apply a trained generator to a directory of images.
    Generate(GenerateArgs),
    /// Score a generator against the victim on a frame sequence.
    Evaluate(EvaluateArgs),
    /// Write the procedural face corpus used for desk-scale runs.
    Synth(SynthArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Untargeted,
    Targeted,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    NonMakeup,
    Makeup,
    Frame,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReductionArg {
    Sum,
    Mean,
}

#[derive(Args, Debug, Default)]
pub struct PrepareArgs {
    #[arg(long)]
    pub raw_dir: Option<PathBuf>,
    /// `center-crop` or `sidecar:<boxes.json>`.
    #[arg(long)]
    pub detector: Option<String>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, value_enum)]
    pub domain: Option<DomainArg>,
}

#[derive(Args, Debug, Default)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub train_dir: Option<PathBuf>,
    #[arg(long)]
    pub test_dir: Option<PathBuf>,
    /// Start from this classifier checkpoint (the pretrained regime).
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainAttackArgs {
    #[arg(long)]
    pub victim: Option<PathBuf>,
    /// Labeled non-makeup tree holding the attacker's photographs.
    #[arg(long)]
    pub x_dir: Option<PathBuf>,
    /// Flat directory of makeup references.
    #[arg(long)]
    pub y_dir: Option<PathBuf>,
    #[arg(long)]
    pub attacker_label: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub target_label: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_cycle: Option<f64>,
    #[arg(long)]
    pub alpha_identity: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub blur_kernel: Option<usize>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long)]
    pub delta_scale: Option<f64>,
    #[arg(long, value_enum)]
    pub l1_reduction: Option<ReductionArg>,
}

#[derive(Args, Debug, Default)]
pub struct GenerateArgs {
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    /// Also write the blurred output next to each image.
    #[arg(long)]
    pub blur: bool,
    #[arg(long)]
    pub blur_kernel: Option<usize>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Directory of frame images, read in file-name order.
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
    #[arg(long)]
    pub attacker_label: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub target_label: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_prime: Option<f64>,
    #[arg(long)]
    pub blur_kernel: Option<usize>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub makeup_count: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Also write this many evaluation frames per identity under `frames/`.
    #[arg(long)]
    pub frames: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match &cli.command {
        Command::Prepare(a) => commands::prepare(g, a),
        Command::TrainClassifier(a) => commands::train_classifier(g, a),
        Command::TrainAttack(a) => commands::train_attack(g, a),
        Command::Generate(a) => commands::generate(g, a),
        Command::Evaluate(a) => commands::evaluate(g, a),
        Command::Synth(a) => commands::synth(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
