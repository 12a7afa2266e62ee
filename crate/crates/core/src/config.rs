//! Declarative run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::diagnostics::DiagnoseConfig;
use crate::error::{LabError, LabResult};
use crate::harness::{Strategy, TuneConfig};
use crate::tasks::{default_sequence, TaskFamily, TaskSpec};
use crate::train::PretrainConfig;

pub const CONFIG_VERSION: u32 = 1;
/// Environment variable naming the root that relative output directories hang off.
pub const OUT_ENV: &str = "MODELAB_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub strategy: Strategy,
    /// One continual run per seed.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Backbone checkpoint read by `continual` and `diagnose`; defaults to the
    /// one `pretrain` writes into the output directory.
    pub backbone_checkpoint: Option<PathBuf>,
    /// Explicit task sequence. Empty means the default sequence for each seed.
    pub tasks: Vec<TaskSpec>,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub tune: TuneConfig,
    pub diagnose: DiagnoseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            strategy: Strategy::Mode,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs/default"),
            backbone_checkpoint: None,
            tasks: Vec::new(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            tune: TuneConfig::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> LabResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> LabResult<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn validate(&self) -> LabResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(cfg_err(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(cfg_err("at least one seed is required"));
        }
        self.backbone.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.tune.kd.validate().map_err(|e| cfg_err(e.to_string()))?;
        for t in &self.tasks {
            t.family.parse::<TaskFamily>().map_err(|e| cfg_err(e.to_string()))?;
        }
        if self.tune.optimizer.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(cfg_err("batch sizes must be positive"));
        }
        Ok(())
    }

    /// Output directory, resolved against `MODELAB_OUT` when relative.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.backbone_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir().join("backbone.ckpt"))
    }

    pub fn task_sequence(&self, seed: u64) -> Vec<TaskSpec> {
        if self.tasks.is_empty() {
            default_sequence(seed)
        } else {
            self.tasks.clone()
        }
    }
}
