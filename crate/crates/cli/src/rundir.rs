//! Run directory layout and artifact loading.

use std::fs;
use std::path::{Path, PathBuf};

use dam_core::classifier::{Classifier, ClassifierCheckpoint};
use dam_core::diffusion::{DiffusionCheckpoint, DiffusionModel};
use dam_core::pointcloud::io::read_dataset_archive;
use dam_core::pointcloud::{LabeledDataset, Split};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.resolved";

/// Written next to the dataset archives by `gen-data`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataSummary {
    pub source: String,
    pub class_names: Vec<String>,
    pub n_points: usize,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub train_hash: String,
    pub test_hash: String,
    pub seed: u64,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn explanations(&self) -> PathBuf {
        self.root.join("explanations")
    }

    pub fn trajectories(&self) -> PathBuf {
        self.root.join("trajectories")
    }

    pub fn saliency(&self) -> PathBuf {
        self.root.join("saliency")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.explanations().join("manifest.json")
    }

    pub fn ensure(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::other(format!("cannot create {}: {e}", dir.display())))
    }

    pub fn summary(&self) -> Result<DataSummary, CliError> {
        read_json(&self.data().join("summary.json"), "dam gen-data")
    }

    pub fn dataset(&self, split: Split) -> Result<LabeledDataset<f64>, CliError> {
        let summary = self.summary()?;
        let name = match split {
            Split::Train => "train.dam",
            Split::Test => "test.dam",
        };
        let path = self.data().join(name);
        require(&path, "dam gen-data")?;
        Ok(read_dataset_archive(&path, Some(summary.class_names), split)?)
    }

    pub fn classifier_path(&self, noised: bool) -> PathBuf {
        self.checkpoints().join(if noised { "noised_classifier.json" } else { "classifier.json" })
    }

    pub fn diffusion_path(&self) -> PathBuf {
        self.checkpoints().join("diffusion.json")
    }

    pub fn classifier(&self, noised: bool) -> Result<Classifier<f64>, CliError> {
        let cmd = if noised { "dam train noised-classifier" } else { "dam train classifier" };
        let ck: ClassifierCheckpoint = read_json(&self.classifier_path(noised), cmd)?;
        Ok(Classifier::from_checkpoint(&ck)?)
    }

    pub fn diffusion(&self) -> Result<DiffusionModel<f64>, CliError> {
        let ck: DiffusionCheckpoint = read_json(&self.diffusion_path(), "dam train diffusion")?;
        Ok(DiffusionModel::from_checkpoint(&ck)?)
    }
}

/// Exit-3 error naming the command that produces `path`.
pub fn require(path: &Path, producer: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(format!("{} not found; run `{producer}` first", path.display())))
    }
}

pub fn read_json<V: DeserializeOwned>(path: &Path, producer: &str) -> Result<V, CliError> {
    require(path, producer)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::other(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::other(format!("{} is not valid: {e}", path.display())))
}

/// Writes through a temporary file so an interrupted command never leaves a truncated artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::other(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::other(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_bytes(&fs::read(path)?))
}

/// Sorted file names in `dir` ending with `suffix`.
pub fn list_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)))
        .collect();
    v.sort();
    Ok(v)
}
