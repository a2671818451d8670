use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Gradients, ToyMlp, TrainMode};
use super::task::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, Matrix};
use crate::optim::{Optimizer, OptimizerKind, StepSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Decay applied per optimizer step.
    pub schedule: StepSchedule,
    pub mode: TrainMode,
    /// Stop after this many epochs without a validation-loss improvement and
    /// restore the best epoch. Needs a validation set.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            schedule: StepSchedule::CONSTANT,
            mode: TrainMode::Full,
            patience: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy on the training set after the epoch.
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Row-wise argmax, lowest index on ties.
pub fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate(model: &ToyMlp, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = model.forward(&data.x)?.logits;
    let (loss, _) = cross_entropy(&logits, &data.y)?;
    Ok(Evaluation {
        loss,
        accuracy: accuracy(&logits, &data.y),
    })
}

/// Shuffled mini-batches of row indices for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One optimizer update over every tensor present in `grads`.
pub fn apply_gradients(model: &mut ToyMlp, grads: &Gradients, opt: &mut Optimizer, lr: f64) -> Result<()> {
    let mut params = Vec::with_capacity(grads.len());
    let mut gs = Vec::with_capacity(grads.len());
    for (id, p) in model.params_mut() {
        if let Some(g) = grads.get(id) {
            params.push(p);
            gs.push(g);
        }
    }
    opt.step(&mut params, &gs, lr)
}

/// Cross-entropy training. Batch order depends only on `cfg.seed` and the
/// dataset size, never on the model.
pub fn train(model: &mut ToyMlp, train_set: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.patience.is_some() && val.is_none() {
        return Err(Error::Config("early stopping needs a validation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut best: Option<(f64, ToyMlp)> = None;
    let mut stale = 0usize;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(train_set.len(), cfg.batch_size, &mut rng) {
            let batch = train_set.select(&idx);
            let out = model.forward_train(&batch.x)?;
            let (loss, dl) = cross_entropy(&out.logits, &batch.y)?;
            if !loss.is_finite() {
                model.clear_cache();
                return Err(Error::NonFinite { step });
            }
            let grads = model.backward(&dl, cfg.mode)?;
            apply_gradients(model, &grads, &mut opt, cfg.schedule.lr_at(cfg.lr, step))?;
            total += loss * idx.len() as f64;
            step += 1;
        }
        model.clear_cache();
        let mut metrics = EpochMetrics {
            epoch,
            train_loss: total / train_set.len() as f64,
            train_accuracy: evaluate(model, train_set)?.accuracy,
            val_loss: None,
            val_accuracy: None,
        };
        if let Some(v) = val {
            let e = evaluate(model, v)?;
            metrics.val_loss = Some(e.loss);
            metrics.val_accuracy = Some(e.accuracy);
            if let Some(patience) = cfg.patience {
                if best.as_ref().is_none_or(|(b, _)| e.loss < *b) {
                    best = Some((e.loss, model.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                }
                history.push(metrics);
                if stale >= patience {
                    break;
                }
                continue;
            }
        }
        history.push(metrics);
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(history)
}
