use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdaptConfig;
use crate::compressor::{CompressConfig, DistillConfig};
use crate::error::{Error, Result, StoreError};
use crate::mimicry::MimicryConfig;
use crate::recombinator::GateConfig;
use crate::toy::{Shift, SyntheticTask, TrainConfig};

/// Toy MLP shape: a dense embedding to `hidden_dim`, `hidden_layers` square
/// hidden layers and a dense head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub pretrain: TrainConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            hidden_layers: 4,
            pretrain: TrainConfig::default(),
        }
    }
}

impl ModelSpec {
    pub fn dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(std::iter::repeat_n(self.hidden_dim, self.hidden_layers + 1));
        d.push(classes);
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorSpec {
    pub r: usize,
    pub s: usize,
    pub group_size: usize,
    /// Module kinds to factorize; others stay dense.
    pub kinds: Vec<String>,
}

impl Default for FactorSpec {
    fn default() -> Self {
        Self {
            r: 16,
            s: 16,
            group_size: 4,
            kinds: vec!["hidden".into()],
        }
    }
}

/// Everything a pipeline run needs. Absent fields take their defaults and
/// unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: SyntheticTask,
    pub model: ModelSpec,
    pub factorization: FactorSpec,
    pub gate: GateConfig,
    pub mimicry: MimicryConfig,
    pub compress: CompressConfig,
    pub distill: DistillConfig,
    pub adapt: AdaptConfig,
    /// Shift defining the adaptation target task.
    pub target_shift: Shift,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: SyntheticTask::default(),
            model: ModelSpec::default(),
            factorization: FactorSpec::default(),
            gate: GateConfig::default(),
            mimicry: MimicryConfig::default(),
            compress: CompressConfig::default(),
            distill: DistillConfig::default(),
            adapt: AdaptConfig::default(),
            target_shift: Shift {
                rotation: 0.5,
                label_offset: 1,
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.model.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        self.model.pretrain.validate()?;
        let f = &self.factorization;
        if f.group_size == 0 {
            return Err(Error::Config("group_size must be at least 1".into()));
        }
        if f.r == 0 || f.s == 0 {
            return Err(Error::Config(format!("r and s must be at least 1 (r={}, s={})", f.r, f.s)));
        }
        self.mimicry.validate()?;
        self.compress.validate()?;
        self.distill.validate()?;
        self.adapt.validate()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.model.dims(self.task.dim, self.task.classes)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Pretty JSON with every default written out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_json().as_bytes())
    }
}
