//! Mixer-only fine-tuning: bases stay frozen, only mixers (and optionally the
//! classification head) move.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::optim::{OptimizerKind, StepSchedule};
use crate::toy::{evaluate, train, Dataset, LayerWeight, ToyMlp, TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "yes")]
    pub train_head: bool,
    #[serde(default)]
    pub train_biases: bool,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Early-stopping patience in epochs; `None` disables it.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    0.05
}
fn default_epochs() -> usize {
    40
}
fn default_batch() -> usize {
    32
}
fn yes() -> bool {
    true
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn default_patience() -> Option<usize> {
    Some(10)
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            train_head: true,
            train_biases: false,
            optimizer: default_optimizer(),
            patience: default_patience(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn mode(&self) -> TrainMode {
        TrainMode::Adapt {
            train_head: self.train_head,
            train_biases: self.train_biases,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("adapt lr must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the adaptation metrics: epoch 0 is the frozen model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptMetric {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: ToyMlp,
    pub metrics: Vec<AdaptMetric>,
}

/// Number of tensor elements `adapt` updates under `cfg`.
pub fn trainable_budget(model: &ToyMlp, cfg: &AdaptConfig) -> usize {
    model.trainable_count(cfg.mode())
}

/// Fine-tunes mixer-like tensors on `train_set`, early-stopping on `val`.
pub fn adapt(model: &ToyMlp, train_set: &Dataset, val: &Dataset, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.layers.iter().all(|l| matches!(l.weight, LayerWeight::Dense(_))) {
        return Err(Error::Config("adapt needs a model with factorized layers".into()));
    }
    let mut metrics = Vec::new();
    let row = |epoch, split: &str, loss, accuracy| AdaptMetric {
        epoch,
        split: split.to_string(),
        loss,
        accuracy,
    };
    let t0 = evaluate(model, train_set)?;
    let v0 = evaluate(model, val)?;
    metrics.push(row(0, "train", t0.loss, t0.accuracy));
    metrics.push(row(0, "val", v0.loss, v0.accuracy));

    let mut adapted = model.clone();
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        optimizer: cfg.optimizer,
        schedule: StepSchedule::CONSTANT,
        mode: cfg.mode(),
        patience: cfg.patience,
        seed: cfg.seed,
    };
    let history = train(&mut adapted, train_set, Some(val), &tcfg)?;
    for e in &history {
        metrics.push(row(e.epoch + 1, "train", e.train_loss, e.train_accuracy));
        metrics.push(row(
            e.epoch + 1,
            "val",
            e.val_loss.expect("validation set given"),
            e.val_accuracy.expect("validation set given"),
        ));
    }
    Ok(AdaptOutcome { model: adapted, metrics })
}

/// What adaptation changed, so one compressed base can serve many tasks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterDelta {
    /// Crisp mixers by layer name.
    pub mixers: BTreeMap<String, Matrix>,
    /// Head weight, when the head was trained.
    pub head: Option<Matrix>,
    /// Biases that were trained, by layer name.
    pub biases: BTreeMap<String, Vec<f32>>,
}

impl AdapterDelta {
    /// Collects the tensors `cfg` allows to change. Only crisp mixers are supported.
    pub fn extract(model: &ToyMlp, cfg: &AdaptConfig) -> Result<Self> {
        let mut delta = AdapterDelta::default();
        let head = model.head_index();
        for (i, l) in model.layers.iter().enumerate() {
            match &l.weight {
                LayerWeight::Crisp { mixer, .. } => {
                    delta.mixers.insert(l.name.clone(), mixer.clone());
                }
                LayerWeight::Dense(w) if i == head && cfg.train_head => delta.head = Some(w.clone()),
                LayerWeight::Dense(_) => {}
                other => {
                    return Err(Error::Config(format!(
                        "layer {} uses the {:?} backend; deltas hold crisp mixers only",
                        l.name,
                        other.backend()
                    )))
                }
            }
            if cfg.train_biases || (cfg.train_head && i == head) {
                delta.biases.insert(l.name.clone(), l.bias.clone());
            }
        }
        Ok(delta)
    }

    /// Writes the delta into `model`, checking every shape first.
    pub fn apply(&self, model: &mut ToyMlp) -> Result<()> {
        let head = model.head_index();
        for (name, m) in &self.mixers {
            let i = model
                .layer_index(name)
                .ok_or_else(|| Error::Config(format!("delta names unknown layer {name}")))?;
            match &model.layers[i].weight {
                LayerWeight::Crisp { mixer, .. } if mixer.shape() == m.shape() => {}
                _ => return Err(Error::Config(format!("delta mixer for {name} does not fit the model"))),
            }
        }
        if let Some(h) = &self.head {
            match &model.layers[head].weight {
                LayerWeight::Dense(w) if w.shape() == h.shape() => {}
                _ => return Err(Error::Config("delta head does not fit the model".into())),
            }
        }
        for (name, b) in &self.biases {
            let i = model
                .layer_index(name)
                .ok_or_else(|| Error::Config(format!("delta names unknown layer {name}")))?;
            if model.layers[i].bias.len() != b.len() {
                return Err(Error::Config(format!("delta bias for {name} has the wrong length")));
            }
        }
        for (name, m) in &self.mixers {
            let i = model.layer_index(name).expect("checked");
            if let LayerWeight::Crisp { mixer, .. } = &mut model.layers[i].weight {
                *mixer = m.clone();
            }
        }
        if let Some(h) = &self.head {
            model.layers[head].weight = LayerWeight::Dense(h.clone());
        }
        for (name, b) in &self.biases {
            let i = model.layer_index(name).expect("checked");
            model.layers[i].bias = b.clone();
        }
        Ok(())
    }
}
