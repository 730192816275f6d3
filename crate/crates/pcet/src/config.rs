//! One serializable bundle of every run setting: named presets, a TOML
//! loader that overlays partial files onto a preset, a content digest
//! for provenance, and data-source resolution.

use crate::dataset::{load_dataset, LabeledSequence};
use crate::error::{Error, Result};
use crate::ingest::{load_split, Split};
use crate::model::ModelConfig;
use crate::sim::SimConfig;
use crate::track::{Aggregation, Variant};
use crate::train::TrainConfig;
use std::fs;
use std::path::{Path, PathBuf};

/// Environment variable that overrides the configured dataset
/// directory.
pub const DATA_ROOT_ENV: &str = "PCET_DATA_ROOT";

/// Named configuration baseline.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Minutes-scale sizes for a workstation.
    Desk,
    /// Full-scale sizes matching the published setup.
    Paper,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

/// Where sequences come from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DataConfig {
    /// Directory of normalized sequences (as written by `gen`). The
    /// `PCET_DATA_ROOT` environment variable overrides this.
    pub dataset_dir: Option<PathBuf>,
    /// KITTI tracking layout root, consulted when no dataset directory
    /// is configured.
    pub kitti_root: Option<PathBuf>,
    /// Which scenes to take from the KITTI root.
    pub kitti_split: Split,
}

/// Tracker choices for `track`, `eval`, and `compare-arp`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrackSettings {
    pub variant: Variant,
    pub aggregation: Aggregation,
    /// Trained weights to track with.
    pub checkpoint: Option<PathBuf>,
}

/// Benchmark sizing.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchSettings {
    /// Timed frames per variant.
    pub frames: usize,
    /// Untimed frames run before measuring.
    pub warmup: usize,
}

/// Everything a run needs, serializable as one TOML document.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub data: DataConfig,
    pub track: TrackSettings,
    pub bench: BenchSettings,
}

/// Hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Overlay `over` onto `base`: tables merge key by key, everything else
/// replaces.
fn merge_value(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Config {
    /// The named preset's full configuration.
    pub fn preset(preset: Preset) -> Config {
        let (model, train, sim, bench) = match preset {
            Preset::Desk => (
                ModelConfig::desk(),
                TrainConfig::desk(),
                SimConfig::desk(),
                BenchSettings { frames: 30, warmup: 3 },
            ),
            Preset::Paper => (
                ModelConfig::paper(),
                TrainConfig::paper(),
                SimConfig::desk(),
                BenchSettings { frames: 200, warmup: 10 },
            ),
        };
        Config {
            model,
            train,
            sim,
            data: DataConfig {
                dataset_dir: None,
                kitti_root: None,
                kitti_split: Split::Train,
            },
            track: TrackSettings {
                variant: Variant::Refined,
                aggregation: Aggregation::Arp,
                checkpoint: None,
            },
            bench,
        }
    }

    /// Start from `preset` and overlay the TOML file at `path`, when
    /// given. The file may set any subset of fields.
    pub fn load(path: Option<&Path>, preset: Preset) -> Result<Config> {
        let base = Config::preset(preset);
        let Some(path) = path else { return Ok(base) };
        let text = fs::read_to_string(path)?;
        let over: toml::Value = text.parse().map_err(|e: toml::de::Error| {
            Error::format(path.display().to_string(), None, e.message().to_string())
        })?;
        let mut merged = toml::Value::try_from(&base)
            .map_err(|e| Error::Config(format!("preset did not serialize: {e}")))?;
        merge_value(&mut merged, over);
        let config: Config = merged.try_into().map_err(|e: toml::de::Error| {
            Error::format(path.display().to_string(), None, e.message().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sim.validate()?;
        if self.bench.frames == 0 {
            return Err(Error::Config("bench.frames must be at least 1".into()));
        }
        Ok(())
    }

    /// Content digest: equal digests mean byte-equal settings.
    pub fn digest(&self) -> String {
        let canonical =
            serde_json::to_string(self).expect("config serialization is infallible");
        sha256_hex(canonical.as_bytes())
    }

    /// Load sequences from an explicit root (highest priority), else the
    /// configured dataset directory, else the KITTI root.
    pub fn load_sequences_from(&self, override_root: Option<&Path>) -> Result<Vec<LabeledSequence>> {
        if let Some(root) = override_root {
            return load_dataset(root);
        }
        if let Some(dir) = &self.data.dataset_dir {
            return load_dataset(dir);
        }
        if let Some(root) = &self.data.kitti_root {
            return load_split(root, self.data.kitti_split);
        }
        Err(Error::Config(format!(
            "no data source: set data.dataset_dir or data.kitti_root in the config, \
             or export {DATA_ROOT_ENV}"
        )))
    }

    /// Load sequences, honoring the `PCET_DATA_ROOT` override.
    pub fn load_sequences(&self) -> Result<Vec<LabeledSequence>> {
        let env_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        self.load_sequences_from(env_root.as_deref())
    }
}
