use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "boomerang", version, about = "Distill a layer-pruned student and patch it back up to any intermediate depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON). Defaults to the built-in profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in profile used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    /// Overrides the seed of the step being run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to runs/<subcommand>.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Acceptance,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepRuleArg {
    Last,
    First2,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitArg {
    Teacher,
    Random,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossArg {
    #[value(name = "ce")]
    Ce,
    #[value(name = "ce+kl")]
    CeKl,
    #[value(name = "ce+cos")]
    CeCos,
    #[value(name = "full")]
    Full,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderArg {
    Backward,
    Forward,
    Similarity,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    Naive,
    Shortgpt,
    Laco,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain the teacher from scratch on the configured corpus.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Build a student from teacher layers (or at random).
    InitStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        keep_every: Option<usize>,
        #[arg(long, value_enum)]
        keep_rule: Option<KeepRuleArg>,
        /// Explicit comma-separated block starts, e.g. 1,3,5,7,8.
        #[arg(long, value_delimiter = ',')]
        starts: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
    },
    /// Distill an initialized student against its teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, value_enum, default_value_t = LossArg::Full)]
        loss: LossArg,
        /// Token budget; sets the step count from batch and sequence size.
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Evaluate every prefix-patched model along a patch order.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, value_enum)]
        order: Option<OrderArg>,
    },
    /// Training-free depth reduction of the teacher.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// naive: number of patched blocks kept (0..=M).
        #[arg(long)]
        n_keep_patched: Option<usize>,
        /// shortgpt: layers to remove.
        #[arg(long)]
        n_remove: Option<usize>,
        /// shortgpt: rank once instead of recomputing after each removal.
        #[arg(long)]
        one_shot: bool,
        /// laco: layers folded per merge.
        #[arg(long, default_value_t = 3)]
        chunk_size: usize,
        #[arg(long, default_value_t = 0.95, allow_negative_numbers = true)]
        threshold: f64,
        #[arg(long, default_value_t = 2)]
        min_interval: usize,
        #[arg(long, default_value_t = 1)]
        layer_lo: usize,
        #[arg(long)]
        layer_hi: Option<usize>,
    },
    /// Per-layer cosine similarity between two models on held-out text.
    CosineMatrix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Calibration samples; defaults to the config value.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Held-out perplexity (and synthetic task accuracy) of one checkpoint.
    EvalPpl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PretrainTeacher { .. } => "pretrain-teacher",
            Command::InitStudent { .. } => "init-student",
            Command::Distill { .. } => "distill",
            Command::Sweep { .. } => "sweep",
            Command::Prune { .. } => "prune",
            Command::CosineMatrix { .. } => "cosine-matrix",
            Command::EvalPpl { .. } => "eval-ppl",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::PretrainTeacher { common }
            | Command::InitStudent { common, .. }
            | Command::Distill { common, .. }
            | Command::Sweep { common, .. }
            | Command::Prune { common, .. }
            | Command::CosineMatrix { common, .. }
            | Command::EvalPpl { common, .. } => common,
        }
    }
}

fn init_threads() -> anyhow::Result<()> {
    let n = match std::env::var("BOOMERANG_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| anyhow::anyhow!("BOOMERANG_THREADS must be a positive integer, got `{v}`"))?
            .max(1),
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|_| commands::run(&cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
