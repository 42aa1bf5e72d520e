//! Optional TOML run configuration. Command-line flags take precedence.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use specalign::data::DatasetConfig;
use specalign::trainer::{StageConfig, StageId};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub dataset: Option<DatasetConfig>,
    /// Per-stage overrides keyed by `I`, `II` or `III`.
    #[serde(default)]
    pub stage: BTreeMap<String, StageOverride>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub epochs: Option<usize>,
    pub base_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub queue_capacity: Option<usize>,
    pub unfrozen_blocks: Option<usize>,
    pub la_warmup_epochs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        for key in cfg.stage.keys() {
            key.parse::<StageId>()?;
        }
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut StageConfig) -> Result<()> {
        let Some(o) = self
            .stage
            .iter()
            .find(|(k, _)| k.parse::<StageId>().ok() == Some(cfg.stage))
            .map(|(_, o)| o)
        else {
            return Ok(());
        };
        if let Some(v) = o.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = o.base_lr {
            cfg.base_lr = v;
        }
        if let Some(v) = o.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = o.queue_capacity {
            cfg.queue_capacity = v;
        }
        if let Some(v) = o.unfrozen_blocks {
            if cfg.stage != StageId::III && v > 0 {
                bail!(
                    "stage {}: only Stage III unfreezes backbone blocks",
                    cfg.stage
                );
            }
            cfg.freeze.unfrozen_blocks = v;
        }
        if let Some(v) = o.la_warmup_epochs {
            cfg.la_warmup_epochs = v;
        }
        Ok(())
    }
}
