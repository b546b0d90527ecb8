//! Run context, staging directories and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Resolved configuration plus the output root for one invocation.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub config: RunConfig,
    pub root: PathBuf,
    pub config_hash: String,
}

impl Ctx {
    /// Derives module seeds, validates, and fixes the config hash.
    pub fn new(mut config: RunConfig, root: PathBuf) -> Result<Self> {
        config.derive_seeds();
        config.validate()?;
        let config_hash = config.hash();
        Ok(Self {
            config,
            root,
            config_hash,
        })
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.path(&self.config.paths.corpus)
    }

    pub fn preprocessed_dir(&self) -> PathBuf {
        self.path(&self.config.paths.preprocessed)
    }

    pub fn shards_dir(&self) -> PathBuf {
        self.path(&self.config.paths.shards)
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.path(&self.config.paths.checkpoints).join("pretrain")
    }

    pub fn probe_dir(&self) -> PathBuf {
        self.path(&self.config.paths.checkpoints).join("probe")
    }

    pub fn report_dir(&self, stage: &str) -> PathBuf {
        self.path(&self.config.paths.reports).join(stage)
    }

    /// Fails with a data error naming the missing input.
    pub fn require(&self, path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::Data(format!("missing input {}", path.display())))
        }
    }

    pub fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<String>,
    /// Files written by the stage, relative to its directory, sorted.
    pub outputs: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

fn list_files(dir: &Path, base: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            list_files(&p, base, out)?;
        } else {
            out.push(p.strip_prefix(base).unwrap_or(&p).display().to_string());
        }
    }
    Ok(())
}

/// Output written to a hidden sibling directory and renamed into place on
/// [`Staging::commit`]. Dropping without committing removes it.
pub struct Staging {
    tmp: tempfile::TempDir,
    target: PathBuf,
    started: Instant,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self> {
        let parent = target
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = tempfile::Builder::new()
            .prefix(&format!(".{name}.staging-"))
            .tempdir_in(parent)
            .map_err(|e| CliError::io(parent, e))?;
        Ok(Self {
            tmp,
            target: target.to_path_buf(),
            started: Instant::now(),
        })
    }

    pub fn path(&self) -> &Path {
        self.tmp.path()
    }

    /// Writes the run manifest, then swaps the staged directory into place.
    pub fn commit(self, ctx: &Ctx, command: &str, inputs: &[PathBuf]) -> Result<PathBuf> {
        let mut outputs = Vec::new();
        list_files(self.tmp.path(), self.tmp.path(), &mut outputs)?;
        let manifest = RunManifest {
            command: command.to_string(),
            inputs: inputs.iter().map(|p| ctx.rel(p)).collect(),
            outputs,
            config_hash: ctx.config_hash.clone(),
            seed: ctx.config.seed,
            versions: BTreeMap::from([
                ("voljepa".to_string(), env!("CARGO_PKG_VERSION").to_string()),
                ("run_manifest".to_string(), "1".to_string()),
            ]),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        write_json(&self.tmp.path().join(RUN_MANIFEST), &manifest)?;
        let staged = self.tmp.keep();
        let target = self.target;
        if target.exists() {
            let old = target.with_file_name(format!(
                ".{}.old-{}",
                target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                std::process::id()
            ));
            fs::rename(&target, &old).map_err(|e| CliError::io(&target, e))?;
            fs::rename(&staged, &target).map_err(|e| CliError::io(&target, e))?;
            fs::remove_dir_all(&old).map_err(|e| CliError::io(&old, e))?;
        } else {
            fs::rename(&staged, &target).map_err(|e| CliError::io(&target, e))?;
        }
        Ok(target)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
