use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// One isotropic Gaussian per class around a random center.
    GaussianBlobs,
    /// Class `c` lives on the sphere of radius `c + 1`, with radial noise.
    ConcentricRings,
}

/// Distribution shift applied to a source task to produce a target task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    /// Rotation angle (radians) applied in every coordinate plane (0,1), (2,3), …
    #[serde(default)]
    pub rotation: f64,
    /// Labels map to `(y + label_offset) mod classes`.
    #[serde(default)]
    pub label_offset: usize,
}

impl Shift {
    pub const IDENTITY: Shift = Shift {
        rotation: 0.0,
        label_offset: 0,
    };

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.label_offset == 0
    }
}

impl Default for Shift {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub generator: Generator,
    pub classes: usize,
    pub dim: usize,
    pub noise: f64,
    /// Distance scale of blob centers.
    #[serde(default = "default_spread")]
    pub spread: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default)]
    pub shift: Shift,
    pub seed: u64,
}

fn default_spread() -> f64 {
    1.0
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self::blobs(4, 16, 0.5, 0)
    }
}

impl SyntheticTask {
    pub fn blobs(classes: usize, dim: usize, noise: f64, seed: u64) -> Self {
        Self {
            generator: Generator::GaussianBlobs,
            classes,
            dim,
            noise,
            spread: default_spread(),
            train: 512,
            val: 256,
            test: 512,
            shift: Shift::IDENTITY,
            seed,
        }
    }

    pub fn with_shift(&self, shift: Shift) -> Self {
        Self { shift, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("a task needs at least 2 classes".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("task dimension must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Config("noise must be non-negative and spread positive".into()));
        }
        if self.train == 0 {
            return Err(Error::Config("train split must be non-empty".into()));
        }
        if !self.shift.rotation.is_finite() {
            return Err(Error::Config("shift rotation must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Rows `idx` as a new dataset, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: Matrix::from_fn(idx.len(), self.x.cols(), |r, c| self.x.get(idx[r], c)),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }

    fn range(&self, start: usize, end: usize) -> Dataset {
        self.select(&(start..end).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates the task's splits. Points come from one pool drawn in order and
/// split by position, so splits never share a sample. A non-identity shift
/// transforms the same pool.
pub fn make_task(task: &SyntheticTask) -> Result<Splits> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let n = task.train + task.val + task.test;
    let (c, d) = (task.classes, task.dim);
    let mut x = Matrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    match task.generator {
        Generator::GaussianBlobs => {
            let centers: Vec<Vec<f64>> = (0..c)
                .map(|_| (0..d).map(|_| normal(&mut rng) * task.spread).collect())
                .collect();
            for i in 0..n {
                let label = rng.random_range(0..c);
                for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                    *v = (centers[label][j] + task.noise * normal(&mut rng)) as f32;
                }
                y.push(label);
            }
        }
        Generator::ConcentricRings => {
            for i in 0..n {
                let label = rng.random_range(0..c);
                let dir: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let radius = (label as f64 + 1.0) * task.spread + task.noise * normal(&mut rng);
                for (v, &u) in x.row_mut(i).iter_mut().zip(&dir) {
                    *v = (u / norm * radius) as f32;
                }
                y.push(label);
            }
        }
    }
    let mut pool = Dataset { x, y, classes: c };
    apply_shift(&mut pool, &task.shift);
    Ok(Splits {
        train: pool.range(0, task.train),
        val: pool.range(task.train, task.train + task.val),
        test: pool.range(task.train + task.val, n),
    })
}

fn apply_shift(data: &mut Dataset, shift: &Shift) {
    if shift.rotation != 0.0 {
        let (sin, cos) = shift.rotation.sin_cos();
        for r in 0..data.x.rows() {
            let row = data.x.row_mut(r);
            for pair in row.chunks_exact_mut(2) {
                let (a, b) = (pair[0] as f64, pair[1] as f64);
                pair[0] = (cos * a - sin * b) as f32;
                pair[1] = (sin * a + cos * b) as f32;
            }
        }
    }
    if shift.label_offset % data.classes != 0 {
        for y in &mut data.y {
            *y = (*y + shift.label_offset) % data.classes;
        }
    }
}
