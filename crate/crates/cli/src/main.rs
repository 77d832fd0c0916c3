//! `softpool`: generate the synthetic corpus, train base, teacher and
//! student models, evaluate them and run the invariant suites.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use softpool::compressor::Variant;

#[derive(Parser, Debug)]
#[command(name = "softpool", version, about = "Soft context compression at desk scale")]
struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print a progress line every this many training steps.
    #[arg(long, global = true, default_value_t = 100)]
    log_every: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the train/eval corpora, vocabulary and manifest.
    GenData(GenDataArgs),
    /// Train the base model, the teacher or a compressor.
    Train(TrainArgs),
    /// Score the teacher, the no-context baseline and students.
    Eval(EvalArgs),
    /// Run the invariant suites and print a JSON-lines summary.
    Verify(VerifyArgs),
    /// Every stage in order: data, base, teacher, student, eval.
    Run,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long)]
    train_contexts: Option<usize>,
    #[arg(long)]
    eval_contexts: Option<usize>,
    #[arg(long)]
    warmup_contexts: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    /// Short-context warmup followed by pretraining on both domains.
    Base,
    /// Adapter finetuning of the base model on the in-domain split.
    Teacher,
    /// Compressor distillation against the teacher.
    Distill,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: TrainMode,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Input checkpoint. Defaults to `base/model.bin` for the teacher and
    /// `teacher/model.bin` for distillation.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory. Defaults to `base`, `teacher` or `student`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optimizer steps of the selected stage.
    #[arg(long)]
    steps: Option<u64>,
    /// Warmup steps of the base mode.
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Compressor: mean-pool, ctok-causal or ctok-bidir.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Comma-separated compression ratios, for example `4,8,16`.
    #[arg(long, value_delimiter = ',', conflicts_with = "single_ratio")]
    ratios: Option<Vec<usize>>,
    /// Sum the loss over every ratio in `--ratios` (the default regime).
    #[arg(long, conflicts_with = "single_ratio")]
    multi_ratio: bool,
    /// Train on this one ratio only.
    #[arg(long)]
    single_ratio: Option<usize>,
    #[arg(long)]
    fixed_decoder: bool,
    #[arg(long)]
    fixed_encoder: bool,
    #[arg(long)]
    no_encoder: bool,
    #[arg(long)]
    no_linear: bool,
    /// Draw one ratio per example instead of summing over all of them.
    #[arg(long)]
    ratio_sampling: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "teacher/model.bin")]
    teacher: PathBuf,
    /// Student checkpoints; repeat the flag to compare several.
    #[arg(long, default_value = "student/student.bin")]
    student: Vec<PathBuf>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Ratios to evaluate; defaults to each student's trained ratios.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<usize>>,
    /// Evaluate at most this many records per set.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Run only these suites (repeatable).
    #[arg(long = "suite")]
    suites: Vec<String>,
    /// Also write the JSON-lines summary to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|_| format!("expected one of mean-pool, ctok-causal, ctok-bidir; got {s:?}"))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    commands::dispatch(cli)
}
