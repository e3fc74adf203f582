use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bank::FeatureBank;
use super::split::{stratified_kfold, SplitAssignment};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "finder-manifest/v1";

fn default_schema() -> String {
    MANIFEST_SCHEMA.to_string()
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationRef {
    pub name: String,
    pub dim: usize,
    /// Relative to the manifest's directory.
    pub bank_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Stratified k-fold; each fold's training part loses `val_fraction` of
    /// every class to a validation set.
    Kfold {
        k: usize,
        seed: u64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
    /// Fixed splits, each a text file with one sample id per line.
    Official {
        train_path: PathBuf,
        val_path: PathBuf,
        test_path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "$schema", default = "default_schema")]
    pub schema: String,
    pub dataset_name: String,
    pub class_names: Vec<String>,
    pub representations: Vec<RepresentationRef>,
    pub split_policy: SplitPolicy,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// A manifest with its banks loaded and cross-validated.
#[derive(Clone, Debug)]
pub struct Dataset {
    manifest: DatasetManifest,
    root: PathBuf,
    banks: Vec<FeatureBank>,
}

impl Dataset {
    /// Reads the manifest and every bank it references.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = DatasetManifest::read(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let banks = manifest
            .representations
            .iter()
            .map(|r| FeatureBank::read(root.join(&r.bank_path)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, root, banks)
    }

    /// Validates that `banks` (in manifest order) satisfy `manifest`.
    pub fn from_parts(manifest: DatasetManifest, root: PathBuf, banks: Vec<FeatureBank>) -> Result<Self> {
        if !manifest.schema.starts_with(MANIFEST_SCHEMA) {
            return Err(Error::Config(format!(
                "unsupported manifest schema {:?} (expected {MANIFEST_SCHEMA})",
                manifest.schema
            )));
        }
        if manifest.class_names.len() < 2 {
            return Err(Error::Config("manifest needs at least two classes".into()));
        }
        if manifest.class_names.len() > u16::MAX as usize {
            return Err(Error::Config("too many classes for 16-bit labels".into()));
        }
        if manifest.representations.is_empty() || banks.len() != manifest.representations.len() {
            return Err(Error::Config(format!(
                "manifest lists {} representation(s) but {} bank(s) were given",
                manifest.representations.len(),
                banks.len()
            )));
        }
        if let SplitPolicy::Kfold { k, val_fraction, .. } = manifest.split_policy {
            if k < 2 || !(0.0..1.0).contains(&val_fraction) {
                return Err(Error::Config(format!(
                    "k-fold policy needs k >= 2 and val_fraction in [0, 1), got k={k}, val_fraction={val_fraction}"
                )));
            }
        }
        for (rep, bank) in manifest.representations.iter().zip(&banks) {
            if bank.dim() != rep.dim {
                return Err(Error::Integrity(format!(
                    "bank for {:?} has dimension {} but the manifest declares {}",
                    rep.name,
                    bank.dim(),
                    rep.dim
                )));
            }
            bank.check_labels(manifest.class_names.len())?;
        }
        let reference = banks[0].sample_ids();
        for (rep, bank) in manifest.representations.iter().zip(&banks).skip(1) {
            if bank.len() != reference.len() {
                return Err(Error::Integrity(format!(
                    "bank for {:?} has {} rows, first bank has {}",
                    rep.name,
                    bank.len(),
                    reference.len()
                )));
            }
            if let Some((a, b)) = reference.iter().zip(bank.sample_ids()).find(|(a, b)| a != b) {
                return Err(Error::Integrity(format!(
                    "bank for {:?} is not row-aligned: first divergent id {b:?} (expected {a:?})",
                    rep.name
                )));
            }
        }
        Ok(Self { manifest, root, banks })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn banks(&self) -> &[FeatureBank] {
        &self.banks
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    pub fn sample_ids(&self) -> &[String] {
        self.banks[0].sample_ids()
    }

    pub fn labels(&self) -> &[u16] {
        self.banks[0].labels()
    }

    /// Index of the representation called `name`.
    pub fn view_index(&self, name: &str) -> Result<usize> {
        self.manifest
            .representations
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| {
                let known: Vec<_> = self.manifest.representations.iter().map(|r| r.name.as_str()).collect();
                Error::Config(format!("unknown representation {name:?} (known: {})", known.join(", ")))
            })
    }

    pub fn view_dim(&self, index: usize) -> usize {
        self.manifest.representations[index].dim
    }

    /// Folds under a k-fold policy, or the single official split.
    pub fn splits(&self) -> Result<Vec<SplitAssignment>> {
        match &self.manifest.split_policy {
            SplitPolicy::Kfold { k, seed, val_fraction } => stratified_kfold(
                self.sample_ids(),
                self.labels(),
                self.class_names(),
                *k,
                *seed,
                *val_fraction,
            ),
            SplitPolicy::Official {
                train_path,
                val_path,
                test_path,
            } => {
                let read = |p: &PathBuf| read_id_list(self.root.join(p));
                let split = SplitAssignment {
                    name: "official".into(),
                    train_ids: read(train_path)?,
                    val_ids: read(val_path)?,
                    test_ids: read(test_path)?,
                };
                split.validate()?;
                Ok(vec![split])
            }
        }
    }
}

/// One sample id per non-empty line.
pub fn read_id_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_id_list(path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
