//! Dataset and run manifests.

use anyhow::{bail, Context, Result};
use discseg_core::volume::{load_volume, Modality, MultiModalSample, Volume};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// One sample's file layout inside a dataset manifest; paths are relative to
/// the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    /// `train` or `val`.
    pub split: String,
    pub label: String,
    pub modalities: BTreeMap<String, String>,
}

/// A dataset: plain 3D volumes, or per-axis slice stacks for the 2D path
/// (slices stored as channels of one volume per sample and modality).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad_to: Option<[usize; 2]>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading dataset manifest {}", path.display()))?;
        let m: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.kind != "volumes3d" && m.kind != "slices2d" {
            bail!("unknown dataset kind `{}`", m.kind);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)
            .with_context(|| format!("writing dataset manifest {}", path.display()))?;
        Ok(())
    }

    /// Load one sample's volumes, restricted to the given modalities.
    pub fn load_sample(
        &self,
        entry: &SampleEntry,
        base: &Path,
        modalities: &[Modality],
    ) -> Result<MultiModalSample> {
        let label: Volume = load_volume(&base.join(&entry.label))
            .with_context(|| format!("loading label of {}", entry.id))?;
        let mut mods = BTreeMap::new();
        for m in modalities {
            let rel = entry
                .modalities
                .get(&m.to_string())
                .with_context(|| format!("sample {} lacks modality {m}", entry.id))?;
            let v = load_volume(&base.join(rel))
                .with_context(|| format!("loading {m} of {}", entry.id))?;
            mods.insert(*m, v);
        }
        Ok(MultiModalSample::new(entry.id.clone(), mods, label)?)
    }

    pub fn split_entries(&self, split: &str) -> Vec<&SampleEntry> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Every file a command emitted, relative to its run directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str) -> Self {
        Self { command: command.into(), config_hash: config_hash.into(), artifacts: Vec::new() }
    }

    pub fn push(&mut self, rel: impl Into<String>) {
        self.artifacts.push(rel.into());
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut with_self = self.clone();
        with_self.artifacts.push("manifest.json".into());
        with_self.artifacts.sort();
        let text = serde_json::to_string_pretty(&with_self)?;
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

/// Resolve a possibly relative path against the current directory.
pub fn resolve(path: &str) -> PathBuf {
    PathBuf::from(path)
}
