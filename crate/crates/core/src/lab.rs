//! Reproducible training recipes with an on-disk checkpoint cache.
//!
//! A recipe is hashed to a cache key; the first request trains and saves a
//! checkpoint under the cache root, later requests load it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DatasetSpec};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::Result;
use crate::models::checkpoint::{load_checkpoint, load_pixel_checkpoint, save_checkpoint, save_pixel_checkpoint};
use crate::models::{PixelArchitecture, PixelDmBundle};
use crate::models::train::{train_autoencoder, train_denoiser, train_pixel_dm, AutoencoderConfig, DenoiserConfig};
use crate::models::{Architecture, LdmBundle};

pub const CACHE_ENV: &str = "LATENTSHIELD_CACHE";

/// Artifact cache root: `$LATENTSHIELD_CACHE`, else a directory under the
/// system temp dir.
pub fn cache_root() -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => std::env::temp_dir().join("latentshield-cache"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Hex sha256 of the canonical JSON of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(&bytes))
}

/// Everything that determines a trained latent diffusion bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleRecipe {
    pub data: DatasetSpec,
    #[serde(default)]
    pub arch: Architecture,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub seed: u64,
    #[serde(default)]
    pub autoencoder: AutoencoderConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
}

impl BundleRecipe {
    /// Default architecture on 1024 synthetic images; `seed` drives the
    /// network initialization and both training loops.
    pub fn standard(seed: u64) -> Self {
        Self {
            data: DatasetSpec {
                per_class: 128,
                resolution: 32,
                seed: 0,
                variant: Default::default(),
            },
            arch: Architecture::default(),
            schedule: ScheduleSpec::default(),
            seed,
            autoencoder: AutoencoderConfig {
                seed,
                ..Default::default()
            },
            denoiser: DenoiserConfig {
                seed,
                ..Default::default()
            },
        }
    }

    pub fn key(&self) -> String {
        content_hash(&("ldm", self))
    }

    pub fn checkpoint_path(&self, root: &Path) -> PathBuf {
        root.join(format!("ldm-{}.lsc", &self.key()[..16]))
    }

    /// Trains from scratch, ignoring any cache.
    pub fn train(&self) -> Result<LdmBundle> {
        let data = Dataset::generate(&self.data);
        let mut bundle = LdmBundle::init(self.arch.clone(), self.schedule.build()?, self.seed)?;
        train_autoencoder(&mut bundle, &data, &self.autoencoder)?;
        train_denoiser(&mut bundle, &data, &self.denoiser)?;
        bundle.meta.dataset_id = format!("synthetic-{}x{}-seed{}", self.data.per_class, self.data.resolution, self.data.seed);
        bundle.meta.dataset_hash = data.content_hash();
        bundle.meta.config_hash = self.key();
        Ok(bundle)
    }

    /// Loads the cached checkpoint under `root`, training and saving it first
    /// if absent.
    pub fn load_or_train(&self, root: &Path) -> Result<LdmBundle> {
        let path = self.checkpoint_path(root);
        if path.exists() {
            return load_checkpoint(&path);
        }
        let bundle = self.train()?;
        std::fs::create_dir_all(root)?;
        save_checkpoint(&bundle, &path)?;
        Ok(bundle)
    }
}

/// Everything that determines a trained pixel-space diffusion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelRecipe {
    pub data: DatasetSpec,
    #[serde(default)]
    pub arch: PixelArchitecture,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub seed: u64,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
}

impl PixelRecipe {
    pub fn standard(seed: u64) -> Self {
        let b = BundleRecipe::standard(seed);
        Self {
            data: b.data,
            arch: PixelArchitecture::default(),
            schedule: b.schedule,
            seed,
            denoiser: b.denoiser,
        }
    }

    pub fn key(&self) -> String {
        content_hash(&("pixel_dm", self))
    }

    pub fn checkpoint_path(&self, root: &Path) -> PathBuf {
        root.join(format!("pixel-{}.lsc", &self.key()[..16]))
    }

    pub fn train(&self) -> Result<PixelDmBundle> {
        let data = Dataset::generate(&self.data);
        let mut bundle = PixelDmBundle::init(self.arch.clone(), self.schedule.build()?, self.seed);
        train_pixel_dm(&mut bundle, &data, &self.denoiser)?;
        bundle.meta.dataset_id = format!("synthetic-{}x{}-seed{}", self.data.per_class, self.data.resolution, self.data.seed);
        bundle.meta.dataset_hash = data.content_hash();
        bundle.meta.config_hash = self.key();
        Ok(bundle)
    }

    pub fn load_or_train(&self, root: &Path) -> Result<PixelDmBundle> {
        let path = self.checkpoint_path(root);
        if path.exists() {
            return load_pixel_checkpoint(&path);
        }
        let bundle = self.train()?;
        std::fs::create_dir_all(root)?;
        save_pixel_checkpoint(&bundle, &path)?;
        Ok(bundle)
    }
}
