use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SmoothL1,
    Huber,
    Mse,
    L1,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::SmoothL1, LossKind::Huber, LossKind::Mse, LossKind::L1];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Transition point for smooth-L1 and Huber.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::SmoothL1,
            beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self { kind, beta: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("loss beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// Per-element loss and derivative for a residual `d = pred - target`.
    #[inline]
    pub fn element(&self, d: f64) -> (f64, f64) {
        let beta = self.beta;
        match self.kind {
            LossKind::SmoothL1 => {
                if d.abs() < beta {
                    (0.5 * d * d / beta, d / beta)
                } else {
                    (d.abs() - 0.5 * beta, d.signum())
                }
            }
            LossKind::Huber => {
                if d.abs() < beta {
                    (0.5 * d * d, d)
                } else {
                    (beta * (d.abs() - 0.5 * beta), beta * d.signum())
                }
            }
            LossKind::Mse => (d * d, 2.0 * d),
            LossKind::L1 => {
                let g = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (d.abs(), g)
            }
        }
    }
}

/// Mean-reduced regression loss and its gradient with respect to `pred`.
pub fn loss_and_grad(pred: &Matrix, target: &Matrix, cfg: &LossConfig) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "loss_and_grad",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.len().max(1) as f64;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (l, g) = cfg.element(p as f64 - t as f64);
        total += l;
        grad.push((g / n) as f32);
    }
    Ok((total / n, Matrix::from_vec(pred.rows(), pred.cols(), grad)?))
}

/// Numerically stable row-wise log-softmax, in f64.
pub(crate) fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let ls = log_softmax_row(logits.row(r));
        for (o, l) in out.row_mut(r).iter_mut().zip(ls) {
            *o = l.exp() as f32;
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch, with gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} rows of logits, {} labels", logits.rows(), labels.len()),
        ));
    }
    let classes = logits.cols();
    let batch = labels.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let ls = log_softmax_row(logits.row(r));
        total -= ls[y];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = ls[c].exp();
            let onehot = if c == y { 1.0 } else { 0.0 };
            *g = ((p - onehot) / batch) as f32;
        }
    }
    Ok((total / batch, grad))
}

/// Batch-mean KL(softmax(student) ‖ softmax(teacher)), with gradient w.r.t. the student logits.
pub fn kl_divergence(student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?} vs {:?}", student.shape(), teacher.shape()),
        ));
    }
    let batch = student.rows().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    for r in 0..student.rows() {
        let ls = log_softmax_row(student.row(r));
        let lt = log_softmax_row(teacher.row(r));
        let kl: f64 = ls.iter().zip(&lt).map(|(s, t)| s.exp() * (s - t)).sum();
        total += kl;
        // d/dz_j = p_j (log p_j − log q_j − KL)
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = (ls[j].exp() * (ls[j] - lt[j] - kl) / batch) as f32;
        }
    }
    Ok((total / batch, grad))
}

/// Mean squared error (mean over all elements) and its gradient w.r.t. `pred`.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    loss_and_grad(pred, target, &LossConfig::new(LossKind::Mse))
}
