//! Batch harness tying the pipeline together: data generation, training,
//! sampling, evaluation, ranking and benchmarking. Every command is a
//! pure function of (config, seed); artifacts are byte-identical across
//! reruns except the training log, whose wall-clock column makes it the
//! designated timestamp sidecar.

pub mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "hetdiff", version, about = "Heteroscedastic-uncertainty diffusion for trajectory completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate (or import) the scene set and write scenes.jsonl.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Override paths.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the denoiser and write checkpoint.ckpt plus train_log.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample K modes per scene and write modes.jsonl.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Denoiser checkpoint (default: <out>/checkpoint.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate modes against ground truth; writes report.json/report.csv.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Modes file (default: <out>/modes.jsonl).
        #[arg(long)]
        modes: Option<PathBuf>,
        /// Scenes file (default: <out>/scenes.jsonl).
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Train or load the ranker, annotate modes with error probabilities
    /// and write modes_ranked.jsonl plus spearman_summary.json.
    Rank {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reuse an existing ranker checkpoint instead of training.
        #[arg(long)]
        ranker_ckpt: Option<PathBuf>,
    },
    /// Wall-clock comparison of the sampler variants.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the full default configuration as TOML.
    PrintConfig,
}

/// Run a parsed command; errors map onto process exit codes in `main`.
pub fn run(cli: Cli) -> hetdiff::Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => commands::cmd_gen_data(&commands::load_config(&config, out, seed)?),
        Command::Train { config, out, seed } => commands::cmd_train(&commands::load_config(&config, out, seed)?),
        Command::Sample { config, out, seed, checkpoint } => {
            commands::cmd_sample(&commands::load_config(&config, out, seed)?, checkpoint.as_deref())
        }
        Command::Eval { config, out, seed, modes, scenes } => commands::cmd_eval(
            &commands::load_config(&config, out, seed)?,
            modes.as_deref(),
            scenes.as_deref(),
        ),
        Command::Rank { config, out, seed, checkpoint, ranker_ckpt } => commands::cmd_rank(
            &commands::load_config(&config, out, seed)?,
            checkpoint.as_deref(),
            ranker_ckpt.as_deref(),
        ),
        Command::Bench { config, out, seed } => commands::cmd_bench(&commands::load_config(&config, out, seed)?),
        Command::PrintConfig => {
            print!("{}", hetdiff::config::RunConfig::default().to_toml());
            Ok(())
        }
    }
}
