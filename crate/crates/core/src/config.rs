//! Experiment configuration: one TOML file with a section per stage.
//! Values repeated across stages (tile side, latent width) are derived
//! rather than restated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Strategy};
use crate::diffusion::ScheduleConfig;
use crate::downstream::{FinetuneConfig, ReadoutMode};
use crate::entity_graph::GraphParams;
use crate::error::{Error, Result};
use crate::latent_codec::CodecConfig;
use crate::pretrain::TrainConfig;

pub const SEED_ENV: &str = "HMGDM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub factor: usize,
    pub latent_channels: usize,
    pub kl_weight: f64,
    pub hidden: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        let c = CodecConfig::default();
        Self {
            factor: c.factor,
            latent_channels: c.latent_channels,
            kl_weight: c.kl_weight,
            hidden: c.hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub ratio: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self { ratio: 0.6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub layers: usize,
    pub heads: usize,
    pub strategy: Strategy,
    pub self_loops: bool,
    pub ff_mult: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            layers: b.layers,
            heads: b.heads,
            strategy: b.strategy,
            self_loops: b.self_loops,
            ff_mult: b.ff_mult,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub codec_epochs: usize,
    pub codec_batch_size: usize,
    pub codec_lr: f64,
    /// Tiles sampled for codec training (0 uses every tile).
    pub codec_tiles: usize,
    pub rmse_every: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            lr: t.lr,
            min_lr: t.min_lr,
            epochs: t.epochs,
            patience: t.patience,
            codec_epochs: t.codec_epochs,
            codec_batch_size: t.codec_batch_size,
            codec_lr: t.codec_lr,
            codec_tiles: 0,
            rmse_every: t.rmse_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSection {
    pub hidden: usize,
    pub readout: ReadoutMode,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub freeze_encoder: bool,
    pub standardize: bool,
    /// Fraction of labeled graphs held out from head training for `eval`.
    pub holdout: f64,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            hidden: f.hidden,
            readout: f.readout,
            epochs: f.epochs,
            lr: f.lr,
            batch_size: f.batch_size,
            freeze_encoder: f.freeze_encoder,
            standardize: f.standardize,
            holdout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory of `.hmgg` bundles consumed by `pretrain`.
    pub graphs: PathBuf,
    /// Parent of the per-run directories.
    pub runs: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            graphs: "graphs".into(),
            runs: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub graph: GraphParams,
    pub codec: CodecSection,
    pub diffusion: ScheduleConfig,
    pub mask: MaskSection,
    pub backbone: BackboneSection,
    pub training: TrainingSection,
    pub downstream: DownstreamSection,
    pub paths: PathsSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `HMGDM_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            tile: self.graph.tile,
            factor: self.codec.factor,
            latent_channels: self.codec.latent_channels,
            kl_weight: self.codec.kl_weight,
            hidden: self.codec.hidden,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            width: self.codec_config().latent_dim(),
            layers: self.backbone.layers,
            heads: self.backbone.heads,
            strategy: self.backbone.strategy,
            self_loops: self.backbone.self_loops,
            ff_mult: self.backbone.ff_mult,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            batch_size: t.batch_size,
            lr: t.lr,
            min_lr: t.min_lr,
            epochs: t.epochs,
            patience: t.patience,
            codec_epochs: t.codec_epochs,
            codec_batch_size: t.codec_batch_size,
            codec_lr: t.codec_lr,
            schedule: self.diffusion,
            mask_ratio: self.mask.ratio,
            seed: self.seed,
            fixed_t: None,
            rmse_every: t.rmse_every,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let d = &self.downstream;
        FinetuneConfig {
            hidden: d.hidden,
            readout: d.readout,
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            freeze_encoder: d.freeze_encoder,
            standardize: d.standardize,
            seed: self.seed,
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.graph.validate().map_err(cfg)?;
        self.codec_config().validate().map_err(cfg)?;
        self.backbone_config().validate().map_err(cfg)?;
        self.train_config().validate().map_err(cfg)?;
        self.finetune_config().validate().map_err(cfg)?;
        if !(0.0..1.0).contains(&self.downstream.holdout) {
            return Err(Error::Config(format!("holdout {} outside [0, 1)", self.downstream.holdout)));
        }
        Ok(())
    }

    /// Hex SHA-256 of everything except the seed, which names runs
    /// separately.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// `<runs>/<hash[..12]>-seed<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.paths.runs.join(format!("{}-seed{}", &self.hash()[..12], self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!((c.graph.n_regions, c.graph.tile, c.graph.compactness), (500, 64, 10.0));
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.backbone_config().width, c.codec_config().latent_dim());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml_str("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("[mask]\nratio = 1.5"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("[graph]\ntile = 48\n[codec]\nfactor = 5"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("[backbone]\nstrategy = \"NtoX\""), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_seed_but_not_hyperparameters() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 9;
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.run_dir(), b.run_dir());
        b.mask.ratio = 0.5;
        assert_ne!(a.hash(), b.hash());
    }
}
