use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, OUT_ENV};
use crate::error::{CliError, Result, EXIT_OK};
use crate::run::Ctx;
use crate::stages;

#[derive(Debug, Parser)]
#[command(name = "voljepa", version, about = "Self-supervised volumetric encoder pipeline on synthetic head phantoms")]
pub struct Cli {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output root. Falls back to $VOLJEPA_OUT, then `paths.root`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus.
    PhantomGen,
    /// Resample, window and quantize the corpus.
    Preprocess,
    /// Pack training shards and compute window means.
    ShardPack,
    /// Self-supervised pretraining.
    Pretrain,
    /// Train the attentive probe on frozen features.
    ProbeTrain,
    /// Test-set metrics, pointing game, flip test and cross-modal transfer.
    Evaluate,
    /// Nearest-neighbour reconstruction of masked targets.
    Recon,
    /// Cross-modal patch matching.
    Match,
    /// Unsupervised clustering of dense embeddings.
    Cluster,
    /// Merge stage metrics into one summary.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::PhantomGen => "phantom-gen",
            Command::Preprocess => "preprocess",
            Command::ShardPack => "shard-pack",
            Command::Pretrain => "pretrain",
            Command::ProbeTrain => "probe-train",
            Command::Evaluate => "evaluate",
            Command::Recon => "recon",
            Command::Match => "match",
            Command::Cluster => "cluster",
            Command::Report => "report",
        }
    }
}

/// Resolves the config and output root for `cli`.
pub fn context(cli: &Cli) -> Result<Ctx> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let root = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| config.paths.root.clone());
    Ctx::new(config, root)
}

pub fn dispatch(ctx: &Ctx, cmd: Command) -> Result<PathBuf> {
    match cmd {
        Command::PhantomGen => stages::phantom_gen(ctx),
        Command::Preprocess => stages::preprocess(ctx),
        Command::ShardPack => stages::shard_pack(ctx),
        Command::Pretrain => stages::pretrain(ctx),
        Command::ProbeTrain => stages::probe_train_stage(ctx),
        Command::Evaluate => stages::evaluate(ctx),
        Command::Recon => stages::recon(ctx),
        Command::Match => stages::match_stage(ctx),
        Command::Cluster => stages::cluster(ctx),
        Command::Report => stages::report(ctx),
    }
}

fn execute(cli: &Cli) -> Result<PathBuf> {
    let ctx = context(cli)?;
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
            .install(|| dispatch(&ctx, cli.command)),
        None => dispatch(&ctx, cli.command),
    }
}

/// Runs one parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(&cli) {
        Ok(dir) => {
            log::info!("{} wrote {}", cli.command.name(), dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("voljepa {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
