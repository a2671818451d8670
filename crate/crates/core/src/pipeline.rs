//! End-to-end stages driven by a [`RunConfig`]: pretrain, retrofit, compress,
//! adapt, the joint pipeline and ablation sweeps. Every stage is a pure
//! function of its config and inputs.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapt, trainable_budget, AdaptMetric, AdapterDelta};
use crate::bank::{kind_of, Checkpoint, FactorBank};
use crate::compressor::{
    calibrate, compress_cluster, distill_compress, reduced_rank, svd_warm_start, CalibrationRecord, DistillRecord,
    StageMetric,
};
use crate::error::{Error, Result};
use crate::mimicry::{group_layers, init_factors, retrofit, InitScheme, LayerDescriptor, RetrofitOutcome};
use crate::numerics::{LossConfig, LossKind};
use crate::recombinator::{Activation, GateConfig, Placement};
use crate::store::{self, RunConfig};
use crate::toy::{evaluate, make_task, train, EpochMetrics, Evaluation, ToyMlp};

/// Receives one preformatted `key=value` log line per event.
pub type Log<'a> = &'a mut dyn FnMut(&str);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressMode {
    Distill,
    Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    GatePlacement,
    LossFn,
    Init,
    MixerDims,
    Budget,
}

/// snake_case name of a unit enum value.
pub fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: ToyMlp,
    pub history: Vec<EpochMetrics>,
    pub test: Evaluation,
}

/// Dense toy model trained on the source task.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let splits = make_task(&cfg.task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ToyMlp::dense(&cfg.dims(), &mut rng)?;
    let history = train(&mut model, &splits.train, Some(&splits.val), &cfg.model.pretrain)?;
    let test = evaluate(&model, &splits.test)?;
    Ok(PretrainOutcome { model, history, test })
}

/// Initial factor bank for the layers of `ck` whose kind is configured.
pub fn initial_bank(cfg: &RunConfig, ck: &Checkpoint) -> Result<FactorBank> {
    let descs: Vec<LayerDescriptor> = ck
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| cfg.factorization.kinds.iter().any(|k| k == kind_of(&l.name)))
        .map(|(i, l)| LayerDescriptor::of(l, i))
        .collect();
    if descs.is_empty() {
        return Err(Error::Config(format!(
            "no checkpoint layer matches the factorized kinds {:?}",
            cfg.factorization.kinds
        )));
    }
    let plans = group_layers(&descs, cfg.factorization.group_size)?;
    let mut bank = init_factors(ck, &plans, cfg.factorization.r, cfg.factorization.s, cfg.gate, &cfg.mimicry)?;
    bank.provenance.source_hash = ck.content_hash();
    bank.provenance.seed = cfg.mimicry.seed;
    Ok(bank)
}

pub fn retrofit_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<RetrofitOutcome> {
    cfg.validate()?;
    let bank = initial_bank(cfg, ck)?;
    retrofit(ck, bank, &cfg.mimicry)
}

#[derive(Debug, Clone)]
pub struct CompressOutcome {
    pub bank: FactorBank,
    pub stages: Vec<StageMetric>,
    pub distill: Vec<DistillRecord>,
    pub calibration: Vec<CalibrationRecord>,
}

fn group_rows(stage: &str, teacher: &FactorBank, student: &FactorBank) -> Result<Vec<StageMetric>> {
    let mut rows = Vec::with_capacity(student.groups.len());
    for (t, s) in teacher.groups.iter().zip(&student.groups) {
        let mut worst = 0.0f64;
        for (m, member) in t.members.iter().enumerate() {
            let target = t.weight(m, &teacher.gate)?;
            worst = worst.max(student.weight(&member.name)?.relative_error(&target));
        }
        rows.push(StageMetric {
            stage: stage.to_string(),
            group: s.id,
            rel_error: worst,
            params_before: t.param_count(),
            params_after: s.param_count(),
        });
    }
    Ok(rows)
}

/// Compresses `teacher` with the chosen pipeline. Cluster mode runs
/// calibration when `compress.calibration.epochs > 0` and some group lost
/// rank; otherwise the output is the data-free stage alone and the CSV says so.
pub fn compress(cfg: &RunConfig, teacher: &FactorBank, mode: CompressMode) -> Result<CompressOutcome> {
    cfg.validate()?;
    teacher.validate()?;
    let splits = make_task(&cfg.task)?;
    match mode {
        CompressMode::Cluster => {
            let out = compress_cluster(teacher, &cfg.compress)?;
            let mut stages = out.metrics;
            let calib = &cfg.compress.calibration;
            let unchanged = teacher.groups.iter().zip(&out.bank.groups).all(|(t, s)| t.cfg.r == s.cfg.r);
            if calib.epochs == 0 || unchanged {
                stages.extend(group_rows("calibration_skipped", teacher, &out.bank)?);
                return Ok(CompressOutcome {
                    bank: out.bank,
                    stages,
                    distill: Vec::new(),
                    calibration: Vec::new(),
                });
            }
            let teacher_ck = teacher.to_checkpoint()?;
            let student = ToyMlp::from_bank(&out.bank)?;
            let (model, calibration) = calibrate(student, &teacher_ck, &splits.train, calib, cfg.compress.seed)?;
            let bank = with_provenance(model.to_bank()?, &out.bank);
            stages.extend(group_rows("calibrate", teacher, &bank)?);
            Ok(CompressOutcome {
                bank,
                stages,
                distill: Vec::new(),
                calibration,
            })
        }
        CompressMode::Distill => {
            let mut target = None;
            for g in &teacher.groups {
                let k = reduced_rank(g.cfg.r, cfg.compress.rate_for(&g.kind))?;
                match target {
                    None => target = Some(k),
                    Some(t) if t != k => {
                        return Err(Error::Config(format!(
                            "distill mode needs one target rank for all groups, got {t} and {k} (group {})",
                            g.id
                        )))
                    }
                    Some(_) => {}
                }
            }
            let Some(k) = target else {
                return Err(Error::Config("bank has no factorized groups".into()));
            };
            let warm = svd_warm_start(teacher, k)?;
            let mut stages = group_rows("warm_start", teacher, &warm)?;
            let teacher_model = ToyMlp::from_bank(teacher)?;
            let (student, distill) = distill_compress(&teacher_model, ToyMlp::from_bank(&warm)?, &splits.train, &cfg.distill)?;
            let bank = with_provenance(student.to_bank()?, &warm);
            stages.extend(group_rows("distill", teacher, &bank)?);
            Ok(CompressOutcome {
                bank,
                stages,
                distill,
                calibration: Vec::new(),
            })
        }
    }
}

fn with_provenance(mut bank: FactorBank, from: &FactorBank) -> FactorBank {
    bank.provenance = from.provenance.clone();
    bank
}

#[derive(Debug, Clone)]
pub struct AdaptRun {
    pub model: ToyMlp,
    pub delta: AdapterDelta,
    /// Training history followed by one `test` row for the adapted model.
    pub metrics: Vec<AdaptMetric>,
    pub frozen_test: Evaluation,
    pub adapted_test: Evaluation,
}

/// Mixer-only adaptation of `bank` to the shifted target task.
pub fn adapt_bank(cfg: &RunConfig, bank: &FactorBank) -> Result<AdaptRun> {
    cfg.validate()?;
    let splits = make_task(&cfg.task.with_shift(cfg.target_shift))?;
    let model = ToyMlp::from_bank(bank)?;
    let frozen_test = evaluate(&model, &splits.test)?;
    let out = adapt(&model, &splits.train, &splits.val, &cfg.adapt)?;
    let adapted_test = evaluate(&out.model, &splits.test)?;
    let mut metrics = out.metrics;
    let last = metrics.last().map_or(0, |m| m.epoch);
    metrics.push(AdaptMetric {
        epoch: last,
        split: "test".into(),
        loss: adapted_test.loss,
        accuracy: adapted_test.accuracy,
    });
    let delta = AdapterDelta::extract(&out.model, &cfg.adapt)?;
    Ok(AdaptRun {
        model: out.model,
        delta,
        metrics,
        frozen_test,
        adapted_test,
    })
}

/// One row of the joint-pipeline summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub stage: String,
    pub params: usize,
    pub trainable: usize,
    pub task: String,
    pub accuracy: f64,
}

/// Paths of the files the joint pipeline writes.
#[derive(Debug, Clone)]
pub struct PipelineFiles {
    pub config: PathBuf,
    pub pretrained: PathBuf,
    pub bank: PathBuf,
    pub compressed: PathBuf,
    pub delta: PathBuf,
    pub summary: PathBuf,
}

impl PipelineFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            config: dir.join("config.json"),
            pretrained: dir.join("pretrained.crsp"),
            bank: dir.join("bank.crsp"),
            compressed: dir.join("compressed.crsp"),
            delta: dir.join("delta.crsp"),
            summary: dir.join("summary.csv"),
        }
    }
}

/// Pretrain, retrofit, cluster-compress and adapt, writing each stage's
/// outputs before the next stage starts.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path, log: Log) -> Result<PipelineFiles> {
    cfg.validate()?;
    let files = PipelineFiles::in_dir(dir);
    cfg.save(&files.config)?;
    let source = make_task(&cfg.task)?;

    let pre = pretrain(cfg)?;
    let ck = pre.model.to_checkpoint()?;
    store::save_checkpoint(&files.pretrained, &ck)?;
    store::write_csv(&dir.join("pretrain_metrics.csv"), &pre.history)?;
    log(&format!("stage=pretrain test_accuracy={:.4} params={}", pre.test.accuracy, ck.param_count()));

    let rf = retrofit(&ck, initial_bank(cfg, &ck)?, &cfg.mimicry)?;
    store::save_bank(&files.bank, &rf.bank)?;
    store::write_csv(&dir.join("retrofit_history.csv"), &rf.history)?;
    let retro_model = ToyMlp::from_bank(&rf.bank)?;
    let retro_acc = evaluate(&retro_model, &source.test)?.accuracy;
    log(&format!(
        "stage=retrofit converged={} max_rel_error={:.6} test_accuracy={retro_acc:.4}",
        rf.converged(),
        rf.max_rel_error()
    ));

    let comp = compress(cfg, &rf.bank, CompressMode::Cluster)?;
    store::save_bank(&files.compressed, &comp.bank)?;
    store::write_csv(&dir.join("compress_metrics.csv"), &comp.stages)?;
    if !comp.calibration.is_empty() {
        store::write_csv(&dir.join("calibration_history.csv"), &comp.calibration)?;
    }
    let comp_model = ToyMlp::from_bank(&comp.bank)?;
    let comp_acc = evaluate(&comp_model, &source.test)?.accuracy;
    log(&format!(
        "stage=compress params_before={} params_after={} test_accuracy={comp_acc:.4}",
        rf.bank.total_params(),
        comp.bank.total_params()
    ));

    let ad = adapt_bank(cfg, &comp.bank)?;
    store::save_delta(&files.delta, &ad.delta)?;
    store::write_csv(&dir.join("adapt_metrics.csv"), &ad.metrics)?;
    log(&format!(
        "stage=adapt frozen_accuracy={:.4} adapted_accuracy={:.4}",
        ad.frozen_test.accuracy, ad.adapted_test.accuracy
    ));

    let summary = vec![
        SummaryRow {
            stage: "pretrain".into(),
            params: ck.param_count(),
            trainable: ck.param_count(),
            task: "source".into(),
            accuracy: pre.test.accuracy,
        },
        SummaryRow {
            stage: "retrofit".into(),
            params: rf.bank.total_params(),
            trainable: rf.bank.factor_params(),
            task: "source".into(),
            accuracy: retro_acc,
        },
        SummaryRow {
            stage: "compress".into(),
            params: comp.bank.total_params(),
            trainable: comp.bank.factor_params(),
            task: "source".into(),
            accuracy: comp_acc,
        },
        SummaryRow {
            stage: "frozen".into(),
            params: comp.bank.total_params(),
            trainable: 0,
            task: "target".into(),
            accuracy: ad.frozen_test.accuracy,
        },
        SummaryRow {
            stage: "adapt".into(),
            params: comp.bank.total_params(),
            trainable: trainable_budget(&comp_model, &cfg.adapt),
            task: "target".into(),
            accuracy: ad.adapted_test.accuracy,
        },
    ];
    store::write_csv(&files.summary, &summary)?;
    Ok(files)
}

/// One setting of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep: String,
    pub setting: String,
    pub r: usize,
    pub s: usize,
    /// Stored parameters of the factorized model.
    pub params: usize,
    /// Parameters trained in the measured stage.
    pub trainable: usize,
    pub converged: bool,
    pub rel_error: f64,
    /// Test accuracy on the source task after retrofit, or on the target
    /// task after adaptation for the budget sweep.
    pub accuracy: f64,
}

/// Settings each sweep visits.
pub fn sweep_settings(sweep: Sweep, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match sweep {
        Sweep::GatePlacement => {
            for p in Placement::ALL {
                for a in Activation::ALL {
                    let c = with(&|c: &mut RunConfig| c.gate = GateConfig { placement: p, activation: a });
                    out.push((format!("{}/{}", label(&p), label(&a)), c));
                }
            }
        }
        Sweep::LossFn => {
            for k in LossKind::ALL {
                let c = with(&|c: &mut RunConfig| c.mimicry.loss = LossConfig { kind: k, ..c.mimicry.loss });
                out.push((label(&k), c));
            }
        }
        Sweep::Init => {
            for scheme in InitScheme::ALL {
                let c = with(&|c: &mut RunConfig| {
                    c.mimicry.basis_init = scheme;
                    c.mimicry.mixer_init = scheme;
                });
                out.push((label(&scheme), c));
            }
        }
        Sweep::MixerDims => {
            for r in [4, 8, 16, 32] {
                for s in [4, 16, 64] {
                    let c = with(&|c: &mut RunConfig| {
                        c.factorization.r = r;
                        c.factorization.s = s;
                    });
                    out.push((format!("r{r}_s{s}"), c));
                }
            }
        }
        Sweep::Budget => {
            for (r, s) in [(1, 4), (2, 8), (4, 8), (4, 16), (8, 16), (16, 16), (16, 64)] {
                let c = with(&|c: &mut RunConfig| {
                    c.factorization.r = r;
                    c.factorization.s = s;
                });
                out.push((format!("r{r}_s{s}"), c));
            }
        }
    }
    out
}

/// Runs `sweep` around `base`. One dense model is pretrained from `base` and
/// shared by every setting.
pub fn ablate(base: &RunConfig, sweep: Sweep, log: Log) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let pre = pretrain(base)?;
    let ck = pre.model.to_checkpoint()?;
    let source = make_task(&base.task)?;
    let mut rows = Vec::new();
    for (setting, cfg) in sweep_settings(sweep, base) {
        cfg.validate()?;
        let rf = retrofit(&ck, initial_bank(&cfg, &ck)?, &cfg.mimicry)?;
        let model = ToyMlp::from_bank(&rf.bank)?;
        let (trainable, accuracy) = if sweep == Sweep::Budget {
            let ad = adapt_bank(&cfg, &rf.bank)?;
            (trainable_budget(&model, &cfg.adapt), ad.adapted_test.accuracy)
        } else {
            (rf.bank.factor_params(), evaluate(&model, &source.test)?.accuracy)
        };
        let row = AblationRow {
            sweep: label(&sweep),
            setting,
            r: cfg.factorization.r,
            s: cfg.factorization.s,
            params: rf.bank.total_params(),
            trainable,
            converged: rf.converged(),
            rel_error: rf.max_rel_error(),
            accuracy,
        };
        log(&format!(
            "stage=ablate sweep={} setting={} rel_error={:.6} accuracy={:.4}",
            row.sweep, row.setting, row.rel_error, row.accuracy
        ));
        rows.push(row);
    }
    Ok(rows)
}
