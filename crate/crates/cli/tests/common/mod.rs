#![allow(dead_code)]

use std::path::Path;

use voljepa::model::{EncoderConfig, ModelConfig, PredictorConfig};
use voljepa::phantom::ModalityPolicy;
use voljepa_cli::cli::{dispatch, Command};
use voljepa_cli::config::RunConfig;
use voljepa_cli::run::Ctx;

pub const PIPELINE: [Command; 10] = [
    Command::PhantomGen,
    Command::Preprocess,
    Command::ShardPack,
    Command::Pretrain,
    Command::ProbeTrain,
    Command::Evaluate,
    Command::Recon,
    Command::Match,
    Command::Cluster,
    Command::Report,
];

/// Small enough that the full pipeline runs in seconds.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        ..Default::default()
    };
    c.phantom.n_studies = 10;
    c.phantom.corpus.modality_policy = ModalityPolicy::Both;
    c.phantom.corpus.split = [0.5, 0.2, 0.3];
    c.train.model = ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 12,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            ..Default::default()
        },
        predictor: PredictorConfig {
            depth: 1,
            width: 12,
            heads: 2,
            mlp_ratio: 2,
        },
    };
    c.train.steps = 3;
    c.train.batch_size = 2;
    c.probe.params.max_epochs = 3;
    c.probe.params.batch_size = 4;
    c.eval.replicates = 50;
    c.eval.heatmaps_per_class = 1;
    c.latent.recon_studies = 2;
    c.latent.match_pairs = 1;
    c.latent.cluster_studies = 1;
    c
}

pub fn run_all(config: &RunConfig, root: &Path, commands: &[Command]) {
    let ctx = Ctx::new(config.clone(), root.to_path_buf()).unwrap();
    for &cmd in commands {
        dispatch(&ctx, cmd).unwrap_or_else(|e| panic!("{}: {e}", cmd.name()));
    }
}
