//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{derive_seed, BackboneConfig, ModelGraph};
use crate::block::AdapterConfig;
use crate::error::{Error, Result};
use crate::task::TaskConfig;
use crate::train::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "ADAROUTE_SEED";

// Sub-seed tags; every random draw in a run descends from `RunConfig::seed`.
const TAG_BACKBONE: u64 = 1;
const TAG_ADAPTER: u64 = 2;
const TAG_HEAD: u64 = 3;
const TAG_DATA: u64 = 4;

fn schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_adapter() -> Option<AdapterConfig> {
    Some(AdapterConfig::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Required: there is no implicit randomness.
    pub seed: u64,
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// `null` trains the task head on the frozen backbone only.
    #[serde(default = "default_adapter")]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            backbone: BackboneConfig::default(),
            adapter: default_adapter(),
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            output_dir: default_output(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Version {
                found: self.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        self.backbone.validate()?;
        if let Some(a) = &self.adapter {
            a.validate()?;
            for (s, &dim) in self.backbone.dims.iter().enumerate() {
                let latent = a.latent_for_stage(s);
                if latent >= dim {
                    return Err(Error::config(format!(
                        "latent width {latent} must be below stage {s} width {dim}"
                    )));
                }
            }
        }
        self.task.validate()?;
        let stride: usize = self.backbone.patch.iter().product();
        if !self.task.image_size.is_multiple_of(stride) {
            return Err(Error::config(format!(
                "image size {} is not divisible by the total patch stride {stride}",
                self.task.image_size
            )));
        }
        self.train.validate()
    }

    /// Applies `ADAROUTE_SEED` when set; a malformed value is a config error.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::config(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, TAG_DATA)
    }

    /// Frozen backbone, adapters (if configured) and a fresh task head.
    pub fn build_model(&self) -> Result<ModelGraph> {
        let mut g = ModelGraph::build(&self.backbone, derive_seed(self.seed, TAG_BACKBONE))?;
        if let Some(a) = &self.adapter {
            g.insert_adapters(a, derive_seed(self.seed, TAG_ADAPTER))?;
        }
        g.attach_head(self.task.head(), derive_seed(self.seed, TAG_HEAD))?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_json(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn seed_is_required() {
        assert!(RunConfig::from_json("{}").is_err());
        let c = RunConfig::from_json(r#"{"seed": 5}"#).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.backbone, BackboneConfig::default());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_enums() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "lr": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "adapter": {"layout": "zigzag"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "adapter": {"capacity": "3L"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "schema_version": 9}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "adapter": {"latent": 16}}"#).is_err());
    }

    #[test]
    fn baseline_has_no_adapters() {
        let c = RunConfig::from_json(r#"{"seed": 1, "adapter": null}"#).unwrap();
        let g = c.build_model().unwrap();
        assert!(g.sites.is_empty() && g.head.is_some());
    }
}
