//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crisp::adapter::{adapt, AdaptConfig};
use crisp::bank::{Checkpoint, DenseLayer, FactorBank};
use crisp::compressor::{
    aggregate_coefficients, calibrate, cluster_basis, compress_cluster, distill_compress, distill_loss, importance_scores,
    merge_basis, resolve_coefficients, svd_warm_start, CalibrationConfig, CompressConfig, DistillConfig,
};
use crisp::mimicry::{group_layers, init_factors, retrofit, InitScheme, LayerDescriptor, MimicryConfig};
use crisp::numerics::{cross_entropy, loss_and_grad, matmul, LossConfig, LossKind, Matrix};
use crisp::pipeline::{self, CompressMode, Sweep};
use crisp::recombinator::{
    basis_sharing_weight, gate, generate_weight, layer_backward, param_count, recast_weight, Activation,
    FactorizationConfig, GateConfig, Placement, RecastConfig,
};
use crisp::store::{self, RunConfig};
use crisp::toy::{evaluate, make_task, train, LayerWeight, ParamId, Shift, SyntheticTask, ToyMlp, TrainConfig, TrainMode};

const FD_REL_TOL: f64 = 1e-3;
/// Components where both gradients are below this are treated as zero.
const FD_ZERO_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const FD_PROBES: usize = 24;
const FD_BUDGET: Duration = Duration::from_secs(30);

const RETROFIT_TARGET: f64 = 1e-2;
const RETROFIT_STEPS: usize = 10_000;
const RETROFIT_BUDGET: Duration = Duration::from_secs(60);

const MERGE_TOL: f64 = 1e-5;
const RESOLVE_TOL: f64 = 1e-5;
const RESOLVE_PERTURBATIONS: usize = 1000;
const RESOLVE_PERTURBATION_NORM: f32 = 1e-2;

const ADAPT_GAIN: f64 = 0.15;
const RETENTION: f64 = 0.90;
const RELU_ZERO_FRACTION: f64 = 0.40;
const RELU_GAP: f64 = 0.05;

const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient correctness", gradient_correctness),
        ("exact baseline reduction", exact_baseline_reduction),
        ("retrofit feasibility", retrofit_feasibility),
        ("lossless merge", lossless_merge),
        ("re-solve optimality", resolve_optimality),
        ("adapt freeze and gain", adapt_freeze_and_gain),
        ("compression retention", compression_retention),
        ("svd warm-start direction", svd_warm_start_direction),
        ("relu gate sparsification", relu_sparsification),
        ("s-dominance direction", s_dominance),
        ("parameter accounting", parameter_accounting),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} [{:>2}] {name}: {} ({:.1}s)",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// f64 oracles

fn act64(a: Activation, x: f64) -> f64 {
    match a {
        Activation::SiluGate => x / (1.0 + (-x).exp()),
        Activation::Relu => x.max(0.0),
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
        Activation::None => x,
    }
}

/// Row-major u×s product with the gate applied where the placement says.
fn generate64(b: &[f64], a: &[f64], u: usize, r: usize, s: usize, g: GateConfig) -> Vec<f64> {
    let on = g.placement != Placement::None && g.activation != Activation::None;
    let fb = |v: f64| if on && g.placement == Placement::Temp { act64(g.activation, v) } else { v };
    let fa = |v: f64| if on && g.placement == Placement::Pre { act64(g.activation, v) } else { v };
    let mut out = vec![0.0; u * s];
    for i in 0..u {
        for j in 0..s {
            let mut acc = 0.0;
            for k in 0..r {
                acc += fb(b[i * r + k]) * fa(a[k * s + j]);
            }
            out[i * s + j] = if on && g.placement == Placement::Post { act64(g.activation, acc) } else { acc };
        }
    }
    out
}

fn smooth_l1_mean(pred: &[f64], target: &[f64]) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        })
        .sum();
    total / pred.len() as f64
}

fn to64(m: &Matrix) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

fn rel_gap(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < FD_ZERO_FLOOR {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn central_difference(x: &mut [f64], i: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + FD_STEP;
    let up = f(x);
    x[i] = orig - FD_STEP;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Independent f64 forward pass of a toy model with dense and crisp layers.
struct ToyOracle {
    shared: Vec<Vec<f64>>,
    weights: Vec<OracleWeight>,
    biases: Vec<Vec<f64>>,
    gate: GateConfig,
}

enum OracleWeight {
    Dense { w: Vec<f64>, d_out: usize, d_in: usize },
    Crisp { basis: usize, cfg: FactorizationConfig, mixer: Vec<f64> },
}

impl ToyOracle {
    fn of(m: &ToyMlp) -> Self {
        Self {
            shared: m.shared.iter().map(|s| to64(&s.matrix)).collect(),
            weights: m
                .layers
                .iter()
                .map(|l| match &l.weight {
                    LayerWeight::Dense(w) => OracleWeight::Dense { w: to64(w), d_out: l.d_out, d_in: l.d_in },
                    LayerWeight::Crisp { basis, cfg, mixer } => OracleWeight::Crisp { basis: *basis, cfg: *cfg, mixer: to64(mixer) },
                    _ => panic!("oracle covers dense and crisp layers"),
                })
                .collect(),
            biases: m.layers.iter().map(|l| l.bias.iter().map(|&v| v as f64).collect()).collect(),
            gate: m.gate,
        }
    }

    fn param(&mut self, id: ParamId) -> &mut Vec<f64> {
        match id {
            ParamId::Shared(i) => &mut self.shared[i],
            ParamId::Bias(i) => &mut self.biases[i],
            ParamId::Factor { layer, slot: 0 } => match &mut self.weights[layer] {
                OracleWeight::Dense { w, .. } => w,
                OracleWeight::Crisp { mixer, .. } => mixer,
            },
            other => panic!("no oracle tensor for {other:?}"),
        }
    }

    fn loss(&self, x: &Matrix, y: &[usize]) -> f64 {
        let n = self.weights.len();
        let mut h: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).iter().map(|&v| v as f64).collect()).collect();
        for (li, lw) in self.weights.iter().enumerate() {
            let (w, d_out, d_in) = match lw {
                OracleWeight::Dense { w, d_out, d_in } => (w.clone(), *d_out, *d_in),
                OracleWeight::Crisp { basis, cfg, mixer } => (
                    generate64(&self.shared[*basis], mixer, cfg.u(), cfg.r, cfg.s, self.gate),
                    cfg.d_out,
                    cfg.d_in,
                ),
            };
            h = h
                .iter()
                .map(|row| {
                    (0..d_out)
                        .map(|o| {
                            let z: f64 = (0..d_in).map(|i| w[o * d_in + i] * row[i]).sum::<f64>() + self.biases[li][o];
                            if li + 1 < n {
                                z.max(0.0)
                            } else {
                                z
                            }
                        })
                        .collect()
                })
                .collect();
        }
        let total: f64 = h
            .iter()
            .zip(y)
            .map(|(row, &t)| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum();
        total / y.len() as f64
    }
}

// ---------------------------------------------------------------------------
// shared fixtures

fn dims(input: usize, hidden: usize, layers: usize, classes: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend(std::iter::repeat_n(hidden, layers + 1));
    d.push(classes);
    d
}

/// Factorized toy classifier trained on `task`: one group over the hidden
/// layers, briefly retrofitted to a random dense init and then trained end to end.
fn trained_crisp_model(seed: u64, task: &SyntheticTask, hidden: usize, layers: usize, r: usize, s: usize, gate: GateConfig) -> ToyMlp {
    let splits = make_task(task).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = ToyMlp::dense(&dims(task.dim, hidden, layers, task.classes), &mut rng).unwrap();
    let ck = dense.to_checkpoint().unwrap();
    let descs: Vec<_> = ck
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.name.starts_with("hidden"))
        .map(|(i, l)| LayerDescriptor::of(l, i))
        .collect();
    let plans = group_layers(&descs, layers).unwrap();
    let mcfg = MimicryConfig { seed, max_steps: 500, ..Default::default() };
    let bank = retrofit(&ck, init_factors(&ck, &plans, r, s, gate, &mcfg).unwrap(), &mcfg).unwrap().bank;
    let mut model = ToyMlp::from_bank(&bank).unwrap();
    let cfg = TrainConfig { epochs: 20, lr: 3e-3, seed, ..Default::default() };
    train(&mut model, &splits.train, None, &cfg).unwrap();
    model
}

fn source_task(seed: u64) -> SyntheticTask {
    SyntheticTask::blobs(4, 16, 0.5, 100 + seed)
}

const TARGET_SHIFT: Shift = Shift { rotation: 0.5, label_offset: 1 };

fn random_bank_checkpoint(layers: usize, d: usize, std: f32, seed: u64) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Checkpoint::new(
        (0..layers)
            .map(|i| DenseLayer::new(format!("hidden.{i}"), Matrix::random_normal(d, d, std, &mut rng), vec![0.0; d]))
            .collect(),
    )
}

fn single_group(ck: &Checkpoint, size: usize) -> Vec<crisp::mimicry::GroupPlan> {
    let descs: Vec<_> = ck.layers.iter().enumerate().map(|(i, l)| LayerDescriptor::of(l, i)).collect();
    group_layers(&descs, size).unwrap()
}

// ---------------------------------------------------------------------------
// 1

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut probes = 0usize;
    let cfg = FactorizationConfig::new(6, 6, 3, 4).unwrap();
    let loss_cfg = LossConfig::new(LossKind::SmoothL1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for placement in Placement::ALL {
        for activation in Activation::ALL {
            let g = GateConfig { placement, activation };
            let b = Matrix::random_normal(cfg.u(), cfg.r, 0.8, &mut rng);
            let a = Matrix::random_normal(cfg.r, cfg.s, 0.8, &mut rng);
            let target = Matrix::random_normal(cfg.d_out, cfg.d_in, 1.0, &mut rng);
            let w = generate_weight(&b, &a, &cfg, &g).unwrap();
            let (_, dw) = loss_and_grad(&w, &target, &loss_cfg).unwrap();
            let (db, da) = layer_backward(&dw, &b, &a, &cfg, &g).unwrap();
            let t64 = to64(&target);
            let (b64, a64) = (to64(&b), to64(&a));
            for p in 0..FD_PROBES {
                let (analytic, numeric) = if p % 2 == 0 {
                    let i = rng.random_range(0..b64.len());
                    let mut x = b64.clone();
                    let f = |bb: &[f64]| smooth_l1_mean(&generate64(bb, &a64, cfg.u(), cfg.r, cfg.s, g), &t64);
                    (db.data()[i] as f64, central_difference(&mut x, i, &f))
                } else {
                    let i = rng.random_range(0..a64.len());
                    let mut x = a64.clone();
                    let f = |aa: &[f64]| smooth_l1_mean(&generate64(&b64, aa, cfg.u(), cfg.r, cfg.s, g), &t64);
                    (da.data()[i] as f64, central_difference(&mut x, i, &f))
                };
                worst = worst.max(rel_gap(analytic, numeric));
                probes += 1;
            }
        }
    }

    // toy model: dense embed, two crisp hidden layers sharing a basis, dense head
    let mut toy_worst = 0.0f64;
    let mut toy_probes = 0usize;
    for gate_cfg in [GateConfig::default(), GateConfig::new(Placement::Post, Activation::Gelu)] {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut m = ToyMlp::dense(&[4, 6, 6, 6, 3], &mut rng).unwrap();
        let cfg = FactorizationConfig::new(6, 6, 4, 4).unwrap();
        m.gate = gate_cfg;
        m.shared.push(crisp::toy::SharedBasis { id: 0, kind: "hidden".into(), matrix: Matrix::random_normal(cfg.u(), 4, 0.7, &mut rng) });
        for i in [1, 2] {
            m.layers[i].weight = LayerWeight::Crisp { basis: 0, cfg, mixer: Matrix::random_normal(4, 4, 0.7, &mut rng) };
        }
        for l in &mut m.layers {
            for b in &mut l.bias {
                *b = rng.random_range(-0.2..0.2);
            }
        }
        let x = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let y: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let logits = m.forward_train(&x).unwrap().logits;
        let (_, dl) = cross_entropy(&logits, &y).unwrap();
        let grads = m.backward(&dl, TrainMode::Full).unwrap();
        let ids: Vec<(ParamId, usize)> = m.param_sizes().into_iter().collect();
        let mut oracle = ToyOracle::of(&m);
        for p in 0..FD_PROBES {
            let (id, len) = ids[p % ids.len()];
            let i = rng.random_range(0..len);
            let orig = oracle.param(id)[i];
            oracle.param(id)[i] = orig + FD_STEP;
            let up = oracle.loss(&x, &y);
            oracle.param(id)[i] = orig - FD_STEP;
            let down = oracle.loss(&x, &y);
            oracle.param(id)[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.get(id).map_or(0.0, |g| g[i] as f64);
            toy_worst = toy_worst.max(rel_gap(analytic, numeric));
            toy_probes += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= FD_REL_TOL && toy_worst <= FD_REL_TOL && probes >= 16 * 20 && elapsed < FD_BUDGET,
        format!(
            "16 gate combos x {FD_PROBES} probes worst rel {worst:.2e}; toy {toy_probes} probes worst rel {toy_worst:.2e}; tol {FD_REL_TOL:.0e}, {elapsed:.1?} < {FD_BUDGET:?}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2

fn exact_baseline_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut recast_cases = 0;
    let mut recast_ok = true;
    let mut bs_ok = true;
    for (d_in, d_out, r) in [(4, 3, 2), (8, 8, 5), (16, 9, 7), (1, 1, 1)] {
        for _ in 0..10 {
            let cfg = FactorizationConfig::new(d_in, d_out, r, 1).unwrap();
            let b = Matrix::random_normal(d_in * d_out, r, 1.0, &mut rng);
            let a = Matrix::random_normal(r, 1, 1.0, &mut rng);
            let crisp_w = generate_weight(&b, &a, &cfg, &GateConfig::NONE).unwrap();
            let recast = recast_weight(&b, &RecastConfig::new(vec![a.data().to_vec()]), d_out, d_in).unwrap();
            recast_ok &= bits_equal(&crisp_w, &recast);

            let cfg = FactorizationConfig::new(d_in, d_out, r, d_in).unwrap();
            let b = Matrix::random_normal(d_out, r, 1.0, &mut rng);
            let a = Matrix::random_normal(r, d_in, 1.0, &mut rng);
            let crisp_w = generate_weight(&b, &a, &cfg, &GateConfig::NONE).unwrap();
            bs_ok &= bits_equal(&crisp_w, &basis_sharing_weight(&b, &a).unwrap());
            recast_cases += 1;
        }
    }
    outcome(
        recast_ok && bs_ok,
        format!("{recast_cases} cases each: s=1 vs K=1 recast bit-identical={recast_ok}, s=d_in vs basis sharing bit-identical={bs_ok}"),
    )
}

fn bits_equal(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------------------
// 3

fn retrofit_feasibility() -> Outcome {
    let start = Instant::now();
    let ck = random_bank_checkpoint(2, 8, 0.5, 31);
    let plans = single_group(&ck, 2);
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in LossKind::ALL {
        let mcfg = MimicryConfig {
            loss: LossConfig::new(kind),
            max_steps: RETROFIT_STEPS,
            target_rel_error: RETROFIT_TARGET,
            seed: 3,
            ..Default::default()
        };
        let bank = init_factors(&ck, &plans, 8, 8, GateConfig::default(), &mcfg).unwrap();
        let out = retrofit(&ck, bank, &mcfg).unwrap();
        let err = out.max_rel_error();
        pass &= err < RETROFIT_TARGET;
        parts.push(format!("{}={err:.2e}@{}", pipeline::label(&kind), out.groups[0].steps));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < RETROFIT_BUDGET;
    outcome(pass, format!("{} (target < {RETROFIT_TARGET:.0e} within {RETROFIT_STEPS} steps), {elapsed:.1?}", parts.join(" ")))
}

// ---------------------------------------------------------------------------
// 4

fn lossless_merge() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (u, distinct, copies, s, layers) = (24, 4, 2, 6, 3);
    let r = distinct * copies;
    let cols: Vec<Vec<f32>> = (0..distinct)
        .map(|_| (0..u).map(|_| 10.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng) as f32).collect())
        .collect();
    // column j duplicates distinct column j % distinct
    let b = Matrix::from_fn(u, r, |i, j| cols[j % distinct][i]);
    let mixers: Vec<Matrix> = (0..layers).map(|_| Matrix::random_normal(r, s, 0.1, &mut rng)).collect();
    let refs: Vec<&Matrix> = mixers.iter().collect();
    let w = importance_scores(&b, &refs, 1.0, None).unwrap();
    let clusters = cluster_basis(&b, &refs, &w, distinct, u, 5).unwrap();
    let paired = (0..r).all(|j| clusters.assignments[j] == clusters.assignments[j % distinct]);
    let merged = merge_basis(&b, &clusters.assignments, &w, distinct).unwrap();
    let aggregated = aggregate_coefficients(&refs, &clusters.assignments, distinct).unwrap();
    let mut worst = 0.0f64;
    for (old, new) in mixers.iter().zip(&aggregated) {
        let before = matmul(&b, old).unwrap();
        let after = matmul(&merged, new).unwrap();
        worst = worst.max(after.relative_error(&before));
    }
    outcome(
        paired && worst <= MERGE_TOL,
        format!("{r} columns ({copies} copies of {distinct}) -> {distinct}: duplicates clustered together={paired}, worst pre-gate rel error {worst:.2e} <= {MERGE_TOL:.0e}"),
    )
}

// ---------------------------------------------------------------------------
// 5

/// Least squares `min ‖B·X − T‖` through f64 normal equations.
fn normal_equations(b: &Matrix, t: &Matrix) -> Vec<f64> {
    let (u, r) = b.shape();
    let s = t.cols();
    let mut m = vec![0.0f64; r * (r + s)];
    for i in 0..r {
        for j in 0..r {
            m[i * (r + s) + j] = (0..u).map(|k| b.get(k, i) as f64 * b.get(k, j) as f64).sum();
        }
        for j in 0..s {
            m[i * (r + s) + r + j] = (0..u).map(|k| b.get(k, i) as f64 * t.get(k, j) as f64).sum();
        }
    }
    let width = r + s;
    for col in 0..r {
        let piv = (col..r).max_by(|&a, &b| m[a * width + col].abs().total_cmp(&m[b * width + col].abs())).unwrap();
        for j in 0..width {
            m.swap(col * width + j, piv * width + j);
        }
        let p = m[col * width + col];
        for j in 0..width {
            m[col * width + j] /= p;
        }
        for row in 0..r {
            if row != col {
                let f = m[row * width + col];
                for j in 0..width {
                    m[row * width + j] -= f * m[col * width + j];
                }
            }
        }
    }
    let mut x = vec![0.0; r * s];
    for i in 0..r {
        for j in 0..s {
            x[i * s + j] = m[i * width + r + j];
        }
    }
    x
}

fn residual(b: &Matrix, gated: &Matrix, target: &Matrix) -> f64 {
    let p = matmul(b, gated).unwrap();
    p.data()
        .iter()
        .zip(target.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn resolve_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let cfg = FactorizationConfig::new(8, 8, 5, 2).unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for gate_cfg in [GateConfig::NONE, GateConfig::default()] {
        // basis scaled so the least-squares gated mixer stays inside the gate's range
        let b = Matrix::random_normal(cfg.u(), cfg.r, 4.0, &mut rng);
        let w = Matrix::random_normal(cfg.d_out, cfg.d_in, 1.0, &mut rng);
        let target = w.clone().reshape(cfg.u(), cfg.s).unwrap();
        let solved = resolve_coefficients(&w, &b, &cfg, &gate_cfg).unwrap();
        let gated = gate(&solved.mixer, &gate_cfg).0;
        let ours = residual(&b, &gated, &target);
        let x = normal_equations(&b, &target);
        let oracle_x = Matrix::from_fn(cfg.r, cfg.s, |i, j| x[i * cfg.s + j] as f32);
        let best = residual(&b, &oracle_x, &target);
        let gap = (ours - best).abs() / best.max(f64::MIN_POSITIVE);
        let mut beaten = 0;
        for _ in 0..RESOLVE_PERTURBATIONS {
            let d = Matrix::random_normal(cfg.r, cfg.s, 1.0, &mut rng);
            let d = d.scale(RESOLVE_PERTURBATION_NORM / d.frobenius_norm() as f32);
            let perturbed = solved.mixer.add(&d).unwrap();
            if residual(&b, &gate(&perturbed, &gate_cfg).0, &target) < ours {
                beaten += 1;
            }
        }
        pass &= gap <= RESOLVE_TOL && beaten == 0 && solved.clamped == 0;
        let name = if gate_cfg == GateConfig::NONE { "none" } else { "pre/silu_gate" };
        parts.push(format!("{name}: rel gap to normal equations {gap:.2e}, {beaten}/{RESOLVE_PERTURBATIONS} perturbations better, clamped {}", solved.clamped));
    }
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 6

fn adapt_freeze_and_gain() -> Outcome {
    let mut gains = Vec::new();
    let mut frozen_bases = true;
    for seed in 0..SEEDS {
        let task = source_task(seed);
        let model = trained_crisp_model(seed, &task, 32, 3, 8, 16, GateConfig::default());
        let target = make_task(&task.with_shift(TARGET_SHIFT)).unwrap();
        let cfg = AdaptConfig { train_head: false, seed, ..Default::default() };
        let before = evaluate(&model, &target.test).unwrap().accuracy;
        let out = adapt(&model, &target.train, &target.val, &cfg).unwrap();
        let after = evaluate(&out.model, &target.test).unwrap().accuracy;
        for (x, y) in model.shared.iter().zip(&out.model.shared) {
            frozen_bases &= bits_equal(&x.matrix, &y.matrix);
        }
        gains.push(after - before);
    }
    let hits = gains.iter().filter(|&&g| g >= ADAPT_GAIN).count();
    outcome(
        frozen_bases && hits == SEEDS as usize,
        format!(
            "bases bit-identical={frozen_bases}; mixer-only gains {} (need >= {:.0} points on {SEEDS}/{SEEDS}, got {hits})",
            fmt_points(&gains),
            ADAPT_GAIN * 100.0
        ),
    )
}

fn fmt_points(v: &[f64]) -> String {
    v.iter().map(|g| format!("{:+.1}", g * 100.0)).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// 7

fn compression_retention() -> Outcome {
    let mut ratios = Vec::new();
    for seed in 0..SEEDS {
        let task = source_task(seed);
        let splits = make_task(&task).unwrap();
        let model = trained_crisp_model(seed, &task, 32, 3, 8, 16, GateConfig::default());
        let base = evaluate(&model, &splits.test).unwrap().accuracy;
        let bank = model.to_bank().unwrap();
        let cfg = CompressConfig { default_rate: 0.5, seed, ..Default::default() };
        let stage1 = compress_cluster(&bank, &cfg).unwrap();
        let teacher = bank.to_checkpoint().unwrap();
        let student = ToyMlp::from_bank(&stage1.bank).unwrap();
        let (calibrated, _) = calibrate(student, &teacher, &splits.train, &CalibrationConfig::default(), seed).unwrap();
        let acc = evaluate(&calibrated, &splits.test).unwrap().accuracy;
        ratios.push(acc / base);
    }
    let hits = ratios.iter().filter(|&&x| x >= RETENTION).count();
    outcome(
        hits >= 4,
        format!(
            "retention {} (need >= {RETENTION} on 4/{SEEDS}, got {hits})",
            ratios.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 8

fn svd_warm_start_direction() -> Outcome {
    let mut rows = Vec::new();
    let mut wins = 0;
    for seed in 0..SEEDS {
        let task = source_task(seed);
        let splits = make_task(&task).unwrap();
        let teacher = trained_crisp_model(seed, &task, 32, 3, 8, 16, GateConfig::default());
        let bank = teacher.to_bank().unwrap();
        let warm = svd_warm_start(&bank, 4).unwrap();
        let random = random_orthogonal_like(&warm, seed);
        let dc = DistillConfig { seed, ..Default::default() };
        let (sw, _) = distill_compress(&teacher, ToyMlp::from_bank(&warm).unwrap(), &splits.train, &dc).unwrap();
        let (sr, _) = distill_compress(&teacher, ToyMlp::from_bank(&random).unwrap(), &splits.train, &dc).unwrap();
        let lw = distill_loss(&teacher, &sw, &splits.train, &dc).unwrap().loss;
        let lr = distill_loss(&teacher, &sr, &splits.train, &dc).unwrap().loss;
        wins += (lw < lr) as usize;
        rows.push(format!("{lw:.2}/{lr:.2}"));
    }
    outcome(wins >= 4, format!("final distill loss warm/random {} (need warm lower on 4/{SEEDS}, got {wins})", rows.join(" ")))
}

fn random_orthogonal_like(bank: &FactorBank, seed: u64) -> FactorBank {
    let mut out = bank.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for g in &mut out.groups {
        g.basis = InitScheme::Orthogonal.sample(g.basis.rows(), g.basis.cols(), &mut rng);
        for m in &mut g.members {
            m.mixer = InitScheme::Orthogonal.sample(m.mixer.rows(), m.mixer.cols(), &mut rng);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 9

fn relu_sparsification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let a = Matrix::random_normal(100, 100, 1.0, &mut rng);
    let gated = gate(&a, &GateConfig::new(Placement::Pre, Activation::Relu)).0;
    let zeros = gated.data().iter().filter(|&&v| v == 0.0).count() as f64 / gated.len() as f64;

    // small mixers, where losing half the entries matters
    let mut gaps = Vec::new();
    for seed in 0..SEEDS {
        let task = source_task(seed);
        let target = make_task(&task.with_shift(TARGET_SHIFT)).unwrap();
        let mut acc = Vec::new();
        for act in [Activation::SiluGate, Activation::Relu] {
            let model = trained_crisp_model(seed, &task, 16, 3, 4, 8, GateConfig::new(Placement::Pre, act));
            let cfg = AdaptConfig { train_head: false, seed, ..Default::default() };
            let out = adapt(&model, &target.train, &target.val, &cfg).unwrap();
            acc.push(evaluate(&out.model, &target.test).unwrap().accuracy);
        }
        gaps.push(acc[0] - acc[1]);
    }
    let hits = gaps.iter().filter(|&&g| g >= RELU_GAP).count();
    outcome(
        zeros >= RELU_ZERO_FRACTION && hits >= 4,
        format!(
            "zeroed fraction at n=1e4: {zeros:.3} (need >= {RELU_ZERO_FRACTION}); silu minus relu adapted accuracy {} (need >= {:.0} points on 4/{SEEDS}, got {hits})",
            fmt_points(&gaps),
            RELU_GAP * 100.0
        ),
    )
}

// ---------------------------------------------------------------------------
// 10

fn s_dominance() -> Outcome {
    let (d, layers) = (32, 4);
    let column_rich = (16, 16);
    let row_rich = (4, 2);
    let p_col = param_count(&FactorizationConfig::new(d, d, column_rich.0, column_rich.1).unwrap(), layers, 1).0;
    let p_row = param_count(&FactorizationConfig::new(d, d, row_rich.0, row_rich.1).unwrap(), layers, 1).0;
    let mut rows = Vec::new();
    let mut wins = 0;
    for seed in 0..SEEDS {
        let ck = random_bank_checkpoint(layers, d, 1.0 / (d as f32).sqrt(), seed);
        let plans = single_group(&ck, layers);
        let mcfg = MimicryConfig { seed, max_steps: 3000, loss: LossConfig::new(LossKind::Mse), ..Default::default() };
        let mut errs = Vec::new();
        for (r, s) in [column_rich, row_rich] {
            let bank = init_factors(&ck, &plans, r, s, GateConfig::default(), &mcfg).unwrap();
            errs.push(retrofit(&ck, bank, &mcfg).unwrap().max_rel_error());
        }
        wins += (errs[0] < errs[1]) as usize;
        rows.push(format!("{:.3}/{:.3}", errs[0], errs[1]));
    }
    outcome(
        wins >= 4,
        format!(
            "rel error (r,s)={column_rich:?} [{p_col} params] vs {row_rich:?} [{p_row} params]: {} (need column-rich lower on 4/{SEEDS}, got {wins})",
            rows.join(" ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 11

fn parameter_accounting() -> Outcome {
    let per_layer = param_count(&FactorizationConfig::new(64, 64, 12, 16).unwrap(), 4, 1).1;
    let example = param_count(&FactorizationConfig::new(64, 64, 32, 16).unwrap(), 4, 1).0;

    let mut cfg = RunConfig::default();
    cfg.task.dim = 8;
    cfg.model.hidden_dim = 16;
    cfg.model.hidden_layers = 4;
    cfg.factorization.r = 10;
    cfg.factorization.s = 8;
    cfg.factorization.group_size = 2;
    cfg.mimicry.max_steps = 50;
    cfg.compress.calibration.epochs = 0;
    let ck = random_bank_checkpoint(4, 16, 0.3, 111);
    let bank = retrofit(&ck, pipeline::initial_bank(&cfg, &ck).unwrap(), &cfg.mimicry).unwrap().bank;
    let mut worst_slack = 0.0f64;
    let mut within = true;
    for rate in [0.1, 0.25, 0.3, 0.5, 0.75] {
        cfg.compress.default_rate = rate;
        let out = pipeline::compress(&cfg, &bank, CompressMode::Cluster).unwrap();
        for (t, s) in bank.groups.iter().zip(&out.bank.groups) {
            let column = t.cfg.u() + t.members.len() * t.cfg.s;
            let expected = (1.0 - rate) * t.param_count() as f64;
            let slack = (s.param_count() as f64 - expected).abs() / column as f64;
            worst_slack = worst_slack.max(slack);
            within &= slack <= 1.0;
        }
    }
    outcome(
        per_layer == 192 && example == 10240 && within,
        format!("r=12,s=16 per layer {per_layer} (192); 4x64x64 s=16 r=32 total {example} (10240); worst deviation from the configured rate {worst_slack:.2} columns (<= 1)"),
    )
}

// ---------------------------------------------------------------------------
// 12

fn determinism_and_persistence() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.task = SyntheticTask { train: 96, val: 32, test: 64, ..SyntheticTask::blobs(3, 4, 0.5, 5) };
    cfg.model.hidden_dim = 8;
    cfg.model.hidden_layers = 2;
    cfg.model.pretrain.epochs = 3;
    cfg.factorization.r = 4;
    cfg.factorization.s = 8;
    cfg.mimicry.max_steps = 200;
    cfg.compress.calibration.epochs = 2;
    cfg.adapt.epochs = 3;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline::run_pipeline(&cfg, a.path(), &mut |_| {}).unwrap();
    pipeline::run_pipeline(&cfg, b.path(), &mut |_| {}).unwrap();
    let mut files = 0;
    let mut identical = true;
    for entry in std::fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        identical &= std::fs::read(a.path().join(&name)).unwrap() == std::fs::read(b.path().join(&name)).unwrap();
        files += 1;
    }
    let mut sweep_cfg = cfg.clone();
    sweep_cfg.mimicry.max_steps = 20;
    let s1 = store::csv_bytes(&pipeline::ablate(&sweep_cfg, Sweep::LossFn, &mut |_| {}).unwrap()).unwrap();
    let s2 = store::csv_bytes(&pipeline::ablate(&sweep_cfg, Sweep::LossFn, &mut |_| {}).unwrap()).unwrap();
    identical &= s1 == s2;

    // bit patterns including NaN payloads, signed zero and subnormals
    let mut rng = ChaCha8Rng::seed_from_u64(121);
    let raw: Vec<f32> = (0..512).map(|_| f32::from_bits(rng.random())).collect();
    let tensors = vec![store::Tensor::f32("raw", vec![8, 64], raw.clone()), store::Tensor::f32("zero", vec![2], vec![-0.0, 1e-45])];
    let bytes = store::encode_container(&tensors).unwrap();
    let back = store::decode_container(&bytes).unwrap();
    let round_trip = back[0].as_f32().unwrap().iter().zip(&raw).all(|(x, y)| x.to_bits() == y.to_bits())
        && back[1].as_f32().unwrap().iter().map(|v| v.to_bits()).eq([(-0.0f32).to_bits(), 1e-45f32.to_bits()])
        && store::encode_container(&back).unwrap() == bytes;

    let bank = store::load_bank(&a.path().join("bank.crsp")).unwrap();
    let bank_bytes = store::encode_container(&store::bank_tensors(&bank).unwrap()).unwrap();
    let regenerated = store::bank_from_tensors(store::decode_container(&bank_bytes).unwrap()).unwrap();
    let weights_exact = bank
        .generated_weights()
        .unwrap()
        .iter()
        .zip(regenerated.generated_weights().unwrap())
        .all(|((_, x), (_, y))| bits_equal(x, &y));
    let mut undetected = 0;
    for i in 0..bank_bytes.len() {
        for bit in [0x01u8, 0x80] {
            let mut c = bank_bytes.clone();
            c[i] ^= bit;
            undetected += store::decode_container(&c).is_ok() as usize;
        }
    }
    let truncations = (0..bank_bytes.len()).filter(|&n| store::decode_container(&bank_bytes[..n]).is_ok()).count();
    outcome(
        identical && round_trip && weights_exact && undetected == 0 && truncations == 0,
        format!(
            "pipeline re-run {files} files and sweep CSV byte-identical={identical}; container round trip bit-exact={round_trip}; regenerated weights bit-exact={weights_exact}; {undetected} undetected of {} bit flips, {truncations} accepted truncations",
            bank_bytes.len() * 2
        ),
    )
}
