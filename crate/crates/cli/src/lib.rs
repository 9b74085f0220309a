//! `bundle-forge`: drive the pipeline end to end — synthetic worlds,
//! splits, relational features, LM pretraining, staged fine-tuning,
//! evaluation, ablations, and token accounting.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod schema;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "bundle-forge",
    version,
    about = "Synthetic bundle-completion pipeline",
    propagate_version = true
)]
pub struct Cli {
    /// Bound evaluation/generation parallelism (training is serial and
    /// deterministic regardless).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// JSON config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; all randomness derives from it through named streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (timestamped under BUNDLE_FORGE_DIR or ./runs when
    /// omitted).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Reuse an existing output directory.
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitModeArg {
    Random,
    Cold,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum StageArg {
    S1,
    S2,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TokenizationArg {
    Text,
    Fusion,
    Prompt,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SeparatorArg {
    Textual,
    None,
    Soft,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BaselineArg {
    Random,
    Oracle,
    Popularity,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AblatePreset {
    Stages,
    Separators,
    Modalities,
}

#[derive(Args, Clone)]
pub struct ModeArgs {
    /// Item tokenization strategy.
    #[arg(long, value_enum, default_value_t = TokenizationArg::Fusion)]
    mode: TokenizationArg,
    /// Separator between textual and non-textual tokens (fusion mode).
    #[arg(long, value_enum, default_value_t = SeparatorArg::Soft)]
    separator: SeparatorArg,
    /// Comma-separated modality subset: media,ui,bi.
    #[arg(long, default_value = "media,ui,bi")]
    modalities: String,
    /// Drop item text (unimodal non-text ablations).
    #[arg(long, default_value_t = false)]
    no_item_text: bool,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic bundle world.
    GenWorld {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Split a world's bundles into train/valid/test.
    Split {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        world: PathBuf,
        /// train,valid,test ratios summing to 1.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        #[arg(long, value_enum, default_value_t = SplitModeArg::Random)]
        mode: SplitModeArg,
    },
    /// Train collaborative-filtering embeddings and export the user-level
    /// and bundle-level item feature tables.
    TrainRelational {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        /// Propagation depth override.
        #[arg(long)]
        k: Option<usize>,
        /// Embedding size override.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Pretrain the frozen backbone on item descriptions and rendered
    /// task examples from the training split.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        splits: PathBuf,
    },
    /// Run one optimization stage.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        /// Directory produced by `pretrain`.
        #[arg(long)]
        pretrained: PathBuf,
        /// Stage-1 output directory (required for --stage s2).
        #[arg(long)]
        s1: Option<PathBuf>,
        /// Directory produced by `train-relational`.
        #[arg(long)]
        features: Option<PathBuf>,
        #[command(flatten)]
        mode: ModeArgs,
        #[arg(long)]
        sample_count: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        peak_lr: Option<f64>,
        #[arg(long)]
        n_candidates: Option<usize>,
    },
    /// Evaluate a model or a reference baseline.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        /// Which split to evaluate: train, valid, or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Staged model directory (adapters + fusion group).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        #[command(flatten)]
        mode: ModeArgs,
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        /// Comma-separated candidate-size sweep, e.g. 2,5,10,20.
        #[arg(long)]
        sweep: Option<String>,
        /// Also emit the per-mode token-count comparison.
        #[arg(long, default_value_t = false)]
        tokens: bool,
    },
    /// Run an ablation matrix over prompt modes and optimization plans.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, default_value_t = AblatePreset::Stages)]
        preset: AblatePreset,
        #[arg(long)]
        eval_count: Option<usize>,
        #[arg(long)]
        sample_count: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        n_candidates: Option<usize>,
    },
    /// Token-count comparison across tokenization strategies.
    Tokens {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        candidates: Option<usize>,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.workers > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .ok();
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .ok();
    }
    match cli.command {
        Command::GenWorld { common } => commands::gen_world(common),
        Command::Split {
            common,
            world,
            ratios,
            mode,
        } => commands::split(common, world, ratios, mode),
        Command::TrainRelational {
            common,
            world,
            splits,
            k,
            dim,
            epochs,
        } => commands::train_relational(common, world, splits, k, dim, epochs),
        Command::Pretrain {
            common,
            world,
            splits,
        } => commands::pretrain(common, world, splits),
        Command::Train {
            common,
            stage,
            world,
            splits,
            pretrained,
            s1,
            features,
            mode,
            sample_count,
            max_epochs,
            batch_size,
            peak_lr,
            n_candidates,
        } => commands::train(commands::TrainArgs {
            common,
            stage,
            world,
            splits,
            pretrained,
            s1,
            features,
            mode,
            sample_count,
            max_epochs,
            batch_size,
            peak_lr,
            n_candidates,
        }),
        Command::Eval {
            common,
            world,
            splits,
            split,
            pretrained,
            model,
            features,
            baseline,
            mode,
            candidates,
            count,
            sweep,
            tokens,
        } => commands::eval(commands::EvalArgs {
            common,
            world,
            splits,
            split,
            pretrained,
            model,
            features,
            baseline,
            mode,
            candidates,
            count,
            sweep,
            tokens,
        }),
        Command::Ablate {
            common,
            world,
            splits,
            pretrained,
            features,
            preset,
            eval_count,
            sample_count,
            max_epochs,
            n_candidates,
        } => commands::ablate(commands::AblateArgs {
            common,
            world,
            splits,
            pretrained,
            features,
            preset,
            eval_count,
            sample_count,
            max_epochs,
            n_candidates,
        }),
        Command::Tokens {
            common,
            world,
            splits,
            count,
            candidates,
        } => commands::tokens(common, world, splits, count, candidates),
    }
}
