//! Run configuration. Every section rejects unknown fields; omitted fields
//! take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voljepa::model::TrainConfig;
use voljepa::phantom::{CorpusConfig, LABELS};
use voljepa::probe::ProbeConfig;
use voljepa::seed::sub_seed;
use voljepa::volume::Modality;

use crate::error::{CliError, Result};

/// Output-directory override honoured when `--out` is absent.
pub const OUT_ENV: &str = "VOLJEPA_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Default output root when neither `--out` nor the environment sets one.
    pub root: PathBuf,
    pub corpus: PathBuf,
    pub preprocessed: PathBuf,
    pub shards: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: "runs".into(),
            corpus: "corpus".into(),
            preprocessed: "preprocessed".into(),
            shards: "shards".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomStage {
    pub n_studies: usize,
    pub corpus: CorpusConfig,
}

impl Default for PhantomStage {
    fn default() -> Self {
        Self {
            n_studies: 200,
            corpus: CorpusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeStage {
    pub params: ProbeConfig,
    /// Train on studies of this modality only.
    pub modality: Option<Modality>,
    pub classes: Vec<String>,
}

impl Default for ProbeStage {
    fn default() -> Self {
        Self {
            params: ProbeConfig::default(),
            modality: None,
            classes: LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalStage {
    pub split: String,
    pub replicates: usize,
    /// Heatmaps exported per class, taken from the first positive studies.
    pub heatmaps_per_class: usize,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self {
            split: "test".into(),
            replicates: voljepa::evalstats::DEFAULT_REPLICATES,
            heatmaps_per_class: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatabankSource {
    /// Each evaluated volume retrieves from its own patches.
    SelfVolume,
    /// One shared databank from the first `reference_volumes` training volumes.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentStage {
    pub split: String,
    pub k: usize,
    pub databank: DatabankSource,
    pub reference_volumes: usize,
    pub recon_studies: usize,
    pub match_pairs: usize,
    pub clusters: usize,
    pub cluster_studies: usize,
}

impl Default for LatentStage {
    fn default() -> Self {
        Self {
            split: "test".into(),
            k: 1,
            databank: DatabankSource::SelfVolume,
            reference_volumes: 20,
            recon_studies: 20,
            match_pairs: 10,
            clusters: 3,
            cluster_studies: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; every module seed is derived from it by purpose.
    pub seed: u64,
    pub paths: Paths,
    pub phantom: PhantomStage,
    pub train: TrainConfig,
    pub probe: ProbeStage,
    pub eval: EvalStage,
    pub latent: LatentStage,
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Overwrites module seeds with sub-seeds of the global seed.
    pub fn derive_seeds(&mut self) {
        self.phantom.corpus.seed = sub_seed(self.seed, "phantom");
        self.train.seed = sub_seed(self.seed, "pretrain");
        self.probe.params.seed = sub_seed(self.seed, "probe");
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        for (name, p) in [
            ("corpus", &self.paths.corpus),
            ("preprocessed", &self.paths.preprocessed),
            ("shards", &self.paths.shards),
            ("checkpoints", &self.paths.checkpoints),
            ("reports", &self.paths.reports),
        ] {
            if p.as_os_str().is_empty() {
                return bad(format!("paths.{name} is empty"));
            }
        }
        if self.phantom.n_studies == 0 {
            return bad("phantom.n_studies must be positive".into());
        }
        self.train.validate()?;
        self.probe.params.validate()?;
        if self.probe.classes.is_empty() {
            return bad("probe.classes is empty".into());
        }
        if let Some(c) = self.probe.classes.iter().find(|c| !LABELS.contains(&c.as_str())) {
            return bad(format!("unknown probe class {c:?}"));
        }
        if self.eval.replicates == 0 {
            return bad("eval.replicates must be positive".into());
        }
        if self.latent.k == 0 || self.latent.clusters == 0 {
            return bad("latent.k and latent.clusters must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(&bytes))
    }
}
