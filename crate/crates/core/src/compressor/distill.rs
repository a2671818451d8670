use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, kl_divergence, mse, Matrix};
use crate::optim::Optimizer;
use crate::toy::{apply_gradients, epoch_batches, Dataset, Gradients, LayerWeight, ToyMlp, TrainMode};

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "one")]
    pub lambda_kl: f64,
    #[serde(default = "one")]
    pub lambda_feat: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn default_steps() -> usize {
    300
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    64
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_kl: 1.0,
            lambda_feat: 1.0,
            steps: default_steps(),
            lr: default_lr(),
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0 && self.lambda_feat >= 0.0) {
            return Err(Error::Config("distillation weights must be non-negative".into()));
        }
        if !(self.lambda_kl > 0.0 || self.lambda_feat > 0.0) {
            return Err(Error::Config("at least one distillation weight must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("distillation needs lr >= 0 and batch size >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub step: usize,
    pub loss: f64,
    pub kl: f64,
    pub feature: f64,
}

fn check_pair(teacher: &ToyMlp, student: &ToyMlp) -> Result<()> {
    let same = teacher.layers.len() == student.layers.len()
        && teacher
            .layers
            .iter()
            .zip(&student.layers)
            .all(|(t, s)| t.name == s.name && t.d_in == s.d_in && t.d_out == s.d_out);
    if !same {
        return Err(Error::Config("teacher and student architectures differ".into()));
    }
    Ok(())
}

/// `λ_KL·KL(student‖teacher) + λ_feat·Σ_ℓ MSE(features)` on `x`, with the
/// gradients w.r.t. the student's logits and features.
fn objective(
    student_out: &crate::toy::ForwardOutput,
    teacher_out: &crate::toy::ForwardOutput,
    cfg: &DistillConfig,
) -> Result<(DistillRecord, Matrix, Vec<Matrix>)> {
    let (kl, mut dlogits) = kl_divergence(&student_out.logits, &teacher_out.logits)?;
    dlogits = dlogits.scale(cfg.lambda_kl as f32);
    let mut feature = 0.0;
    let mut dfeat = Vec::with_capacity(student_out.features.len());
    for (s, t) in student_out.features.iter().zip(&teacher_out.features) {
        let (l, g) = mse(s, t)?;
        feature += l;
        dfeat.push(g.scale(cfg.lambda_feat as f32));
    }
    let loss = cfg.lambda_kl * kl + cfg.lambda_feat * feature;
    Ok((DistillRecord { step: 0, loss, kl, feature }, dlogits, dfeat))
}

/// Distillation objective of `student` against `teacher` over the whole dataset.
pub fn distill_loss(teacher: &ToyMlp, student: &ToyMlp, data: &Dataset, cfg: &DistillConfig) -> Result<DistillRecord> {
    check_pair(teacher, student)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t = teacher.forward(&data.x)?;
    let s = student.forward(&data.x)?;
    Ok(objective(&s, &t, cfg)?.0)
}

/// Trains the student's factors (bases and mixers) to match the teacher's
/// logits and hidden features. Returns the student and the per-step history.
pub fn distill_compress(
    teacher: &ToyMlp,
    student: ToyMlp,
    data: &Dataset,
    cfg: &DistillConfig,
) -> Result<(ToyMlp, Vec<DistillRecord>)> {
    cfg.validate()?;
    check_pair(teacher, &student)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut student = student;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut batches = Vec::new().into_iter();
    let mut initial = None;
    let mut above = 0;
    for step in 0..cfg.steps {
        let idx = match batches.next() {
            Some(b) => b,
            None => {
                batches = epoch_batches(data.len(), cfg.batch_size, &mut rng).into_iter();
                batches.next().expect("non-empty dataset")
            }
        };
        let batch = data.select(&idx);
        let t = teacher.forward(&batch.x)?;
        let s = student.forward_train(&batch.x)?;
        let (mut rec, dlogits, dfeat) = objective(&s, &t, cfg)?;
        rec.step = step;
        history.push(rec);
        if !rec.loss.is_finite() {
            return Err(Error::NonFinite { step });
        }
        let init = *initial.get_or_insert(rec.loss);
        if rec.loss > DIVERGENCE_FACTOR * init && init > 0.0 {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged { step, loss: rec.loss, initial: init });
            }
        } else {
            above = 0;
        }
        let grads = student.backward_with_features(&dlogits, &dfeat, TrainMode::Factors)?;
        apply_gradients(&mut student, &grads, &mut opt, cfg.lr)?;
    }
    student.clear_cache();
    Ok((student, history))
}

/// Stage-2 refinement: `w1·Σ‖W_i − W_teacher,i‖²_F + w2·cross-entropy`, the
/// task loss standing in for a language-modelling loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default = "one")]
    pub w1: f64,
    #[serde(default = "one")]
    pub w2: f64,
    /// 0 skips calibration.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_calibration_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_epochs() -> usize {
    20
}
fn default_calibration_lr() -> f64 {
    3e-3
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            epochs: default_epochs(),
            lr: default_calibration_lr(),
            batch_size: default_batch(),
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0 && self.w1.is_finite() && self.w2.is_finite()) {
            return Err(Error::Config("calibration weights must be non-negative".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("calibration needs lr >= 0 and batch size >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub epoch: usize,
    pub reconstruction: f64,
    pub task: f64,
    pub combined: f64,
}

/// Layers whose weight is generated rather than stored, paired with their teacher weight.
fn factorized_targets<'a>(model: &ToyMlp, teacher: &'a Checkpoint) -> Result<Vec<(usize, &'a Matrix)>> {
    let mut out = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        if matches!(l.weight, LayerWeight::Dense(_)) {
            continue;
        }
        let t = teacher
            .get(&l.name)
            .ok_or_else(|| Error::Config(format!("teacher has no layer {}", l.name)))?;
        if t.weight.shape() != (l.d_out, l.d_in) {
            return Err(Error::shape("calibrate", format!("teacher layer {} has shape {:?}", l.name, t.weight.shape())));
        }
        out.push((i, &t.weight));
    }
    Ok(out)
}

fn reconstruction(model: &ToyMlp, targets: &[(usize, &Matrix)]) -> Result<(f64, Vec<Matrix>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(targets.len());
    for &(i, t) in targets {
        let diff = model.weight(i)?.sub(t)?;
        total += diff.frobenius_norm().powi(2);
        grads.push(diff.scale(2.0));
    }
    Ok((total, grads))
}

/// Combined calibration loss over the whole dataset.
pub fn calibration_loss(model: &ToyMlp, teacher: &Checkpoint, data: &Dataset, cfg: &CalibrationConfig) -> Result<CalibrationRecord> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let targets = factorized_targets(model, teacher)?;
    let (recon, _) = reconstruction(model, &targets)?;
    let (task, _) = cross_entropy(&model.forward(&data.x)?.logits, &data.y)?;
    Ok(CalibrationRecord {
        epoch: 0,
        reconstruction: recon,
        task,
        combined: cfg.w1 * recon + cfg.w2 * task,
    })
}

/// Refines bases and mixers of `student` for `cfg.epochs` epochs with Adam.
/// The history holds the full-dataset loss before training and after each epoch.
pub fn calibrate(
    student: ToyMlp,
    teacher: &Checkpoint,
    data: &Dataset,
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<(ToyMlp, Vec<CalibrationRecord>)> {
    cfg.validate()?;
    let mut model = student;
    let targets = factorized_targets(&model, teacher)?;
    let mut history = vec![calibration_loss(&model, teacher, data, cfg)?];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::adam();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let batch = data.select(&idx);
            let mut grads = Gradients::default();
            if cfg.w2 > 0.0 {
                let out = model.forward_train(&batch.x)?;
                let (loss, dl) = cross_entropy(&out.logits, &batch.y)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite { step });
                }
                grads.add_scaled(&model.backward(&dl, TrainMode::Factors)?, cfg.w2 as f32);
            }
            if cfg.w1 > 0.0 {
                let (recon, dws) = reconstruction(&model, &targets)?;
                if !recon.is_finite() {
                    return Err(Error::NonFinite { step });
                }
                for (&(i, _), dw) in targets.iter().zip(&dws) {
                    grads.add_scaled(&model.weight_backward(i, dw, TrainMode::Factors)?, cfg.w1 as f32);
                }
            }
            apply_gradients(&mut model, &grads, &mut opt, cfg.lr)?;
            step += 1;
        }
        model.clear_cache();
        let mut rec = calibration_loss(&model, teacher, data, cfg)?;
        rec.epoch = epoch;
        if !rec.combined.is_finite() {
            return Err(Error::NonFinite { step });
        }
        history.push(rec);
    }
    Ok((model, history))
}
