//! Data-free retrofitting of dense checkpoints into shared bases and mixers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::bank::{Checkpoint, DenseLayer, FactorBank, GroupMember, LayerGroup, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{loss_and_grad, random_orthogonal, LossConfig, Matrix};
use crate::optim::{Optimizer, OptimizerKind, StepSchedule};
use crate::recombinator::{generate_weight, layer_backward, FactorizationConfig, GateConfig};

/// Shape and module kind of one layer, as seen by the grouping step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDescriptor {
    pub name: String,
    pub kind: String,
    pub index: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl LayerDescriptor {
    pub fn of(layer: &DenseLayer, index: usize) -> Self {
        Self {
            name: layer.name.clone(),
            kind: layer.kind.clone(),
            index,
            d_in: layer.d_in(),
            d_out: layer.d_out(),
        }
    }
}

/// Layer names that will share one basis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPlan {
    pub id: usize,
    pub kind: String,
    pub members: Vec<String>,
}

/// Chunks same-kind layers, in order, into groups of `group_size`.
/// Kinds never mix; groups are numbered by the position of their first layer.
pub fn group_layers(layers: &[LayerDescriptor], group_size: usize) -> Result<Vec<GroupPlan>> {
    if layers.is_empty() {
        return Err(Error::Config("no layers to group".into()));
    }
    if group_size == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    let mut ordered: Vec<&LayerDescriptor> = layers.iter().collect();
    ordered.sort_by_key(|l| l.index);

    let mut kinds: Vec<&str> = Vec::new();
    for l in &ordered {
        if !kinds.contains(&l.kind.as_str()) {
            kinds.push(&l.kind);
        }
    }
    let mut chunks: Vec<(usize, GroupPlan)> = Vec::new();
    for kind in kinds {
        let same: Vec<&&LayerDescriptor> = ordered.iter().filter(|l| l.kind == kind).collect();
        for chunk in same.chunks(group_size) {
            let first = chunk[0];
            if let Some(bad) = chunk.iter().find(|l| (l.d_in, l.d_out) != (first.d_in, first.d_out)) {
                return Err(Error::Config(format!(
                    "layers {} and {} share a group but have shapes {}x{} and {}x{}",
                    first.name, bad.name, first.d_out, first.d_in, bad.d_out, bad.d_in
                )));
            }
            chunks.push((
                first.index,
                GroupPlan {
                    id: 0,
                    kind: kind.to_string(),
                    members: chunk.iter().map(|l| l.name.clone()).collect(),
                },
            ));
        }
    }
    chunks.sort_by_key(|(first, _)| *first);
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(id, (_, mut plan))| {
            plan.id = id;
            plan
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// N(0, 0.01²)
    Gaussian0p01,
    /// U(−1/√cols, 1/√cols)
    Uniform,
    /// N(0, 2/cols)
    Kaiming,
    /// U(±√(6/(rows+cols)))
    Xavier,
    /// Orthonormal rows (or columns, for tall matrices)
    Orthogonal,
}

impl InitScheme {
    pub const ALL: [InitScheme; 5] = [
        InitScheme::Gaussian0p01,
        InitScheme::Uniform,
        InitScheme::Kaiming,
        InitScheme::Xavier,
        InitScheme::Orthogonal,
    ];

    pub fn sample(self, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let fan_in = cols.max(1) as f32;
        match self {
            InitScheme::Gaussian0p01 => Matrix::random_normal(rows, cols, 0.01, rng),
            InitScheme::Uniform => Matrix::random_uniform(rows, cols, 1.0 / fan_in.sqrt(), rng),
            InitScheme::Kaiming => Matrix::random_normal(rows, cols, (2.0 / fan_in).sqrt(), rng),
            InitScheme::Xavier => {
                Matrix::random_uniform(rows, cols, (6.0 / (rows + cols).max(1) as f32).sqrt(), rng)
            }
            InitScheme::Orthogonal => random_orthogonal(rows, cols, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MimicryConfig {
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_basis_init")]
    pub basis_init: InitScheme,
    #[serde(default = "default_mixer_init")]
    pub mixer_init: InitScheme,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_schedule")]
    pub schedule: StepSchedule,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_target")]
    pub target_rel_error: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_basis_init() -> InitScheme {
    InitScheme::Gaussian0p01
}
fn default_mixer_init() -> InitScheme {
    InitScheme::Orthogonal
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_lr() -> f64 {
    0.01
}
fn default_schedule() -> StepSchedule {
    StepSchedule { factor: 0.5, period: 2000 }
}
fn default_max_steps() -> usize {
    10_000
}
fn default_target() -> f64 {
    1e-2
}

impl Default for MimicryConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            basis_init: default_basis_init(),
            mixer_init: default_mixer_init(),
            optimizer: default_optimizer(),
            lr: default_lr(),
            schedule: default_schedule(),
            max_steps: default_max_steps(),
            target_rel_error: default_target(),
            seed: 0,
        }
    }
}

impl MimicryConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.target_rel_error >= 0.0) {
            return Err(Error::Config("target relative error must be non-negative".into()));
        }
        if !(self.schedule.factor > 0.0) {
            return Err(Error::Config("schedule factor must be positive".into()));
        }
        Ok(())
    }
}

/// Builds a bank for `plans` over `checkpoint`. Layers not named in any plan
/// stay dense. Factors are drawn group by group (basis, then mixers in order)
/// from one stream seeded by `mcfg.seed`; biases are copied.
pub fn init_factors(
    checkpoint: &Checkpoint,
    plans: &[GroupPlan],
    r: usize,
    s: usize,
    gate: GateConfig,
    mcfg: &MimicryConfig,
) -> Result<FactorBank> {
    mcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mcfg.seed);
    let mut groups = Vec::with_capacity(plans.len());
    for plan in plans {
        let first = plan
            .members
            .first()
            .and_then(|n| checkpoint.get(n))
            .ok_or_else(|| Error::Config(format!("group {} names a layer missing from the checkpoint", plan.id)))?;
        let cfg = FactorizationConfig::new(first.d_in(), first.d_out(), r, s)
            .map_err(|e| Error::Config(format!("layer {}: {e}", first.name)))?;
        let (bu, br) = cfg.basis_shape();
        let basis = mcfg.basis_init.sample(bu, br, &mut rng);
        let mut members = Vec::with_capacity(plan.members.len());
        for name in &plan.members {
            let layer = checkpoint
                .get(name)
                .ok_or_else(|| Error::Config(format!("layer {name} missing from the checkpoint")))?;
            if (layer.d_in(), layer.d_out()) != (cfg.d_in, cfg.d_out) {
                return Err(Error::Config(format!("layer {name} does not match the shape of its group")));
            }
            let mixer = mcfg.mixer_init.sample(cfg.r, cfg.s, &mut rng);
            members.push(GroupMember {
                name: name.clone(),
                mixer,
                bias: layer.bias.clone(),
            });
        }
        groups.push(LayerGroup {
            id: plan.id,
            kind: plan.kind.clone(),
            cfg,
            basis,
            members,
        });
    }
    let factorized: std::collections::BTreeSet<&str> =
        plans.iter().flat_map(|p| p.members.iter().map(String::as_str)).collect();
    let passthrough = checkpoint
        .layers
        .iter()
        .filter(|l| !factorized.contains(l.name.as_str()))
        .cloned()
        .collect();
    let bank = FactorBank {
        groups,
        passthrough,
        layer_order: checkpoint.layers.iter().map(|l| l.name.clone()).collect(),
        gate,
        provenance: Provenance {
            source_hash: checkpoint.content_hash(),
            seed: mcfg.seed,
            notes: Vec::new(),
        },
    };
    bank.validate()?;
    Ok(bank)
}

/// One row of the mimicry loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub group: usize,
    /// Sum of per-layer mean losses over the group.
    pub loss: f64,
    /// Worst relative Frobenius error over the group's layers.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub group: usize,
    pub steps: usize,
    pub converged: bool,
    pub rel_errors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RetrofitOutcome {
    pub bank: FactorBank,
    /// Ordered by group, then step.
    pub history: Vec<LossRecord>,
    pub groups: Vec<GroupSummary>,
}

impl RetrofitOutcome {
    pub fn converged(&self) -> bool {
        self.groups.iter().all(|g| g.converged)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .flat_map(|g| g.rel_errors.iter().copied())
            .fold(0.0, f64::max)
    }
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

/// Fits every group's factors to the matching dense weights of `pretrained`.
/// Groups are independent and run in parallel; each is deterministic.
pub fn retrofit(pretrained: &Checkpoint, bank: FactorBank, mcfg: &MimicryConfig) -> Result<RetrofitOutcome> {
    mcfg.validate()?;
    bank.validate()?;
    let mut targets = Vec::with_capacity(bank.groups.len());
    for g in &bank.groups {
        let mut ws = Vec::with_capacity(g.members.len());
        for m in &g.members {
            let layer = pretrained
                .get(&m.name)
                .ok_or_else(|| Error::Config(format!("layer {} missing from the checkpoint", m.name)))?;
            if layer.weight.shape() != (g.cfg.d_out, g.cfg.d_in) {
                return Err(Error::shape(
                    "retrofit",
                    format!("layer {}: checkpoint {:?}, bank {:?}", m.name, layer.weight.shape(), (g.cfg.d_out, g.cfg.d_in)),
                ));
            }
            ws.push(layer.weight.clone());
        }
        targets.push(ws);
    }

    let gate = bank.gate;
    let mut bank = bank;
    let results: Vec<Result<(Vec<LossRecord>, GroupSummary)>> = bank
        .groups
        .par_iter_mut()
        .zip(targets.par_iter())
        .map(|(group, ws)| fit_group(group, ws, &gate, mcfg))
        .collect();
    let mut history = Vec::new();
    let mut groups = Vec::new();
    for r in results {
        let (h, s) = r?;
        history.extend(h);
        groups.push(s);
    }
    Ok(RetrofitOutcome { bank, history, groups })
}

fn evaluate(group: &LayerGroup, targets: &[Matrix], gate: &GateConfig, loss: &LossConfig) -> Result<(f64, Vec<f64>, Vec<Matrix>)> {
    let mut total = 0.0;
    let mut rel = Vec::with_capacity(targets.len());
    let mut grads = Vec::with_capacity(targets.len());
    for (i, w) in targets.iter().enumerate() {
        let gen = generate_weight(&group.basis, &group.members[i].mixer, &group.cfg, gate)?;
        let (l, g) = loss_and_grad(&gen, w, loss)?;
        total += l;
        rel.push(gen.relative_error(w));
        grads.push(g);
    }
    Ok((total, rel, grads))
}

fn fit_group(
    group: &mut LayerGroup,
    targets: &[Matrix],
    gate: &GateConfig,
    mcfg: &MimicryConfig,
) -> Result<(Vec<LossRecord>, GroupSummary)> {
    let mut opt = Optimizer::new(mcfg.optimizer);
    let mut history = Vec::new();
    let mut initial = None;
    let mut above = 0usize;
    let mut step = 0usize;
    loop {
        let (loss, rel, grads) = evaluate(group, targets, gate, &mcfg.loss)?;
        let worst = rel.iter().copied().fold(0.0, f64::max);
        history.push(LossRecord {
            step,
            group: group.id,
            loss,
            rel_error: worst,
        });
        if !loss.is_finite() || !worst.is_finite() {
            return Err(Error::NonFinite { step });
        }
        let initial = *initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged { step, loss, initial });
            }
        } else {
            above = 0;
        }
        let converged = loss == 0.0 || worst < mcfg.target_rel_error;
        if converged || step >= mcfg.max_steps {
            let summary = GroupSummary {
                group: group.id,
                steps: step,
                converged,
                rel_errors: rel,
            };
            return Ok((history, summary));
        }

        let mut db_total = Matrix::zeros(group.basis.rows(), group.basis.cols());
        let mut da = Vec::with_capacity(targets.len());
        for (i, g) in grads.iter().enumerate() {
            let (db, dai) = layer_backward(g, &group.basis, &group.members[i].mixer, &group.cfg, gate)?;
            db_total.add_assign(&db)?;
            da.push(dai);
        }
        let lr = mcfg.schedule.lr_at(mcfg.lr, step);
        let LayerGroup { basis, members, .. } = group;
        let mut params: Vec<&mut [f32]> = Vec::with_capacity(members.len() + 1);
        params.push(basis.data_mut());
        params.extend(members.iter_mut().map(|m| m.mixer.data_mut()));
        let mut grad_refs: Vec<&[f32]> = Vec::with_capacity(da.len() + 1);
        grad_refs.push(db_total.data());
        grad_refs.extend(da.iter().map(Matrix::data));
        opt.step(&mut params, &grad_refs, lr)?;
        step += 1;
    }
}
