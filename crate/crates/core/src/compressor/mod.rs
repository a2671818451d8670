//! Shrinking the shared bases of a factor bank.
//!
//! Two routes: a data-free one (importance → cluster → merge → aggregate →
//! least-squares re-solve, then optional calibration) and a distillation one
//! that starts from an SVD of the teacher's bases.

mod distill;

pub use distill::{
    calibrate, calibration_loss, distill_compress, distill_loss, CalibrationConfig, CalibrationRecord, DistillConfig,
    DistillRecord,
};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{FactorBank, LayerGroup};
use crate::error::{Error, Result};
use crate::numerics::{
    default_projection_dim, matmul, pseudo_inverse, random_projection, svd, weighted_kmeans, ClusterResult, Matrix,
    DEFAULT_RCOND,
};
use crate::recombinator::{apply_activation, generate_weight, Activation, FactorizationConfig, GateConfig, Placement};

/// Bisection steps used when inverting the gate element-wise.
pub const GATE_INVERSION_STEPS: usize = 50;

/// `floor(r·(1−ρ))`. A tiny epsilon absorbs binary round-off so that e.g.
/// r=10, ρ=0.3 gives 7 and not 6.
pub fn reduced_rank(r: usize, rho: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("compression rate must be in [0, 1), got {rho}")));
    }
    let k = (r as f64 * (1.0 - rho) + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::Config(format!("rate {rho} leaves no basis columns out of {r}")));
    }
    Ok(k)
}

/// Per-column score `‖B[:,j]‖₂ + λ·Σ_i ‖A_i[j,:]‖₁`, optionally times `(1 + boost_j)`.
pub fn importance_scores(b: &Matrix, mixers: &[&Matrix], lambda: f64, variance_boost: Option<&[f32]>) -> Result<Vec<f32>> {
    let r = b.cols();
    if let Some(m) = mixers.iter().find(|m| m.rows() != r) {
        return Err(Error::shape("importance_scores", format!("basis has {r} columns, mixer has {} rows", m.rows())));
    }
    if variance_boost.is_some_and(|v| v.len() != r) {
        return Err(Error::shape("importance_scores", "variance boost length differs from r"));
    }
    Ok((0..r)
        .map(|j| {
            let col: f64 = (0..b.rows()).map(|i| (b.get(i, j) as f64).powi(2)).sum::<f64>().sqrt();
            let rows: f64 = mixers
                .iter()
                .map(|m| m.row(j).iter().map(|&v| (v as f64).abs()).sum::<f64>())
                .sum();
            let mut w = col + lambda * rows;
            if let Some(boost) = variance_boost {
                w *= 1.0 + boost[j] as f64;
            }
            w as f32
        })
        .collect())
}

/// Clusters the basis columns into `r_prime` groups. Each column's feature is
/// its random projection followed by its rows in every mixer, scaled by its
/// importance; k-means is importance-weighted too (uniform when all scores are zero).
pub fn cluster_basis(
    b: &Matrix,
    mixers: &[&Matrix],
    w: &[f32],
    r_prime: usize,
    proj_dim: usize,
    seed: u64,
) -> Result<ClusterResult> {
    let r = b.cols();
    if r_prime == 0 || r_prime > r {
        return Err(Error::Param(format!("cannot cluster {r} columns into {r_prime}")));
    }
    if w.len() != r {
        return Err(Error::shape("cluster_basis", format!("{} scores for {r} columns", w.len())));
    }
    if let Some(m) = mixers.iter().find(|m| m.rows() != r) {
        return Err(Error::shape("cluster_basis", format!("mixer has {} rows, basis {r} columns", m.rows())));
    }
    let projected = random_projection(&b.transpose(), proj_dim, seed)?;
    let width = proj_dim + mixers.iter().map(|m| m.cols()).sum::<usize>();
    let all_zero = w.iter().all(|&x| x == 0.0);
    let mut features = Matrix::zeros(r, width);
    for j in 0..r {
        let scale = if all_zero { 1.0 } else { w[j] };
        let row = features.row_mut(j);
        let mut k = 0;
        for &v in projected.row(j) {
            row[k] = v * scale;
            k += 1;
        }
        for m in mixers {
            for &v in m.row(j) {
                row[k] = v * scale;
                k += 1;
            }
        }
    }
    let weights: Vec<f32> = if all_zero { vec![1.0; r] } else { w.to_vec() };
    weighted_kmeans(&features, &weights, r_prime, seed, 100)
}

fn check_assignments(assignments: &[usize], r: usize, k: usize) -> Result<()> {
    if assignments.len() != r {
        return Err(Error::shape("merge", format!("{} assignments for {r} columns", assignments.len())));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
        return Err(Error::Param(format!("cluster index {bad} out of range for {k} clusters")));
    }
    Ok(())
}

/// Importance-weighted mean of each cluster's columns, rescaled to the
/// importance-weighted RMS of the members' norms (plain mean and RMS when a
/// cluster's total weight is zero). Empty clusters give zero columns.
pub fn merge_basis(b: &Matrix, assignments: &[usize], w: &[f32], k: usize) -> Result<Matrix> {
    let (u, r) = b.shape();
    check_assignments(assignments, r, k)?;
    if w.len() != r {
        return Err(Error::shape("merge_basis", format!("{} scores for {r} columns", w.len())));
    }
    let mut out = Matrix::zeros(u, k);
    for c in 0..k {
        let members: Vec<usize> = (0..r).filter(|&j| assignments[j] == c).collect();
        if members.is_empty() {
            continue;
        }
        let mass: f64 = members.iter().map(|&j| w[j] as f64).sum();
        let weight = |j: usize| if mass > 0.0 { w[j] as f64 / mass } else { 1.0 / members.len() as f64 };
        let mut col = vec![0.0f64; u];
        let mut sq_norm = 0.0;
        for &j in &members {
            let wj = weight(j);
            let mut n2 = 0.0;
            for (i, acc) in col.iter_mut().enumerate() {
                let v = b.get(i, j) as f64;
                *acc += wj * v;
                n2 += v * v;
            }
            sq_norm += wj * n2;
        }
        let target = sq_norm.sqrt();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { target / norm } else { 1.0 };
        for (i, v) in col.iter().enumerate() {
            out.set(i, c, (v * scale) as f32);
        }
    }
    Ok(out)
}

/// Row `c` of each new mixer is the sum of the old rows assigned to cluster `c`.
pub fn aggregate_coefficients(mixers: &[&Matrix], assignments: &[usize], k: usize) -> Result<Vec<Matrix>> {
    mixers
        .iter()
        .map(|m| {
            check_assignments(assignments, m.rows(), k)?;
            let mut acc = vec![0.0f64; k * m.cols()];
            for (j, &c) in assignments.iter().enumerate() {
                for (s, &v) in m.row(j).iter().enumerate() {
                    acc[c * m.cols() + s] += v as f64;
                }
            }
            Ok(Matrix::from_f64(k, m.cols(), &acc))
        })
        .collect()
}

/// Mixer fitted by least squares, plus how many entries had to be clamped
/// while inverting the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub mixer: Matrix,
    pub clamped: usize,
}

impl Resolved {
    pub fn warning(&self) -> bool {
        self.clamped > 0
    }
}

fn invert_gate(m: &Matrix, act: Activation) -> (Matrix, usize) {
    let mut clamped = 0;
    let mut out = m.clone();
    for v in out.data_mut() {
        let (x, c) = act.invert(*v as f64, GATE_INVERSION_STEPS);
        clamped += c as usize;
        *v = x as f32;
    }
    (out, clamped)
}

/// Least-squares mixer for `w_teacher` (d_out×d_in) against basis `b`.
///
/// PRE solves for the gated mixer and inverts the gate element-wise; POST
/// inverts the gate on the teacher first; TEMP solves against the gated basis.
pub fn resolve_coefficients(
    w_teacher: &Matrix,
    b: &Matrix,
    cfg: &FactorizationConfig,
    gate: &GateConfig,
) -> Result<Resolved> {
    cfg.validate()?;
    if w_teacher.shape() != (cfg.d_out, cfg.d_in) || b.shape() != cfg.basis_shape() {
        return Err(Error::shape(
            "resolve_coefficients",
            format!("teacher {:?}, basis {:?} for {:?}", w_teacher.shape(), b.shape(), cfg),
        ));
    }
    let target = w_teacher.clone().reshape(cfg.u(), cfg.s)?;
    let solve = |basis: &Matrix, t: &Matrix| -> Result<Matrix> { matmul(&pseudo_inverse(basis, DEFAULT_RCOND)?, t) };
    match (gate.placement, gate.effective()) {
        (_, None) => Ok(Resolved { mixer: solve(b, &target)?, clamped: 0 }),
        (Placement::Pre, Some(act)) => {
            let gated = solve(b, &target)?;
            let (mixer, clamped) = invert_gate(&gated, act);
            Ok(Resolved { mixer, clamped })
        }
        (Placement::Post, Some(act)) => {
            let (pre, clamped) = invert_gate(&target, act);
            Ok(Resolved { mixer: solve(b, &pre)?, clamped })
        }
        (Placement::Temp, Some(act)) => {
            let gated_b = apply_activation(b, act).0;
            Ok(Resolved { mixer: solve(&gated_b, &target)?, clamped: 0 })
        }
        (Placement::None, Some(_)) => unreachable!("effective() is None without a placement"),
    }
}

/// Smallest entry the gate can produce, with a safety margin, or `None` when
/// any value is reachable.
fn gate_floor(gate: &GateConfig) -> Option<f64> {
    match (gate.placement, gate.effective()) {
        (Placement::Pre, Some(act @ (Activation::SiluGate | Activation::Gelu))) => Some(0.9 * act.monotone_branch().1),
        _ => None,
    }
}

/// Student bank with `r_target` basis columns per group: basis from the top
/// singular directions of each teacher basis (`U_k·diag(S_k)`), mixers re-solved
/// against the teacher's regenerated weights.
///
/// Under PRE gating with a bounded-below gate, the basis is scaled up just
/// enough that the least-squares gated mixers stay inside the gate's range.
pub fn svd_warm_start(teacher: &FactorBank, r_target: usize) -> Result<FactorBank> {
    teacher.validate()?;
    let gate = teacher.gate;
    let groups: Vec<Result<LayerGroup>> = teacher
        .groups
        .par_iter()
        .map(|g| {
            if r_target == 0 || r_target > g.cfg.r {
                return Err(Error::Param(format!("target rank {r_target} outside 1..={} for group {}", g.cfg.r, g.id)));
            }
            let d = svd(&g.basis)?;
            let cfg = g.cfg.with_rank(r_target);
            let mut basis = Matrix::from_fn(g.cfg.u(), r_target, |i, j| d.u.get(i, j) * d.s[j]);
            let targets: Vec<Matrix> = (0..g.members.len()).map(|m| g.weight(m, &gate)).collect::<Result<_>>()?;
            if let Some(floor) = gate_floor(&gate) {
                let pinv = pseudo_inverse(&basis, DEFAULT_RCOND)?;
                let mut lowest = 0.0f64;
                for w in &targets {
                    let gated = matmul(&pinv, &w.clone().reshape(cfg.u(), cfg.s)?)?;
                    lowest = gated.data().iter().fold(lowest, |m, &v| m.min(v as f64));
                }
                if lowest < floor {
                    basis = basis.scale((lowest / floor) as f32);
                }
            }
            let mut members = Vec::with_capacity(g.members.len());
            for (m, w) in g.members.iter().zip(&targets) {
                let resolved = resolve_coefficients(w, &basis, &cfg, &gate)?;
                members.push(crate::bank::GroupMember {
                    name: m.name.clone(),
                    mixer: resolved.mixer,
                    bias: m.bias.clone(),
                });
            }
            Ok(LayerGroup {
                id: g.id,
                kind: g.kind.clone(),
                cfg,
                basis,
                members,
            })
        })
        .collect();
    let mut student = teacher.clone();
    student.groups = groups.into_iter().collect::<Result<_>>()?;
    student.provenance.notes.push(format!("svd warm start to rank {r_target}"));
    Ok(student)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressConfig {
    /// Rate per module kind; kinds not listed use `default_rate`.
    #[serde(default)]
    pub rates: BTreeMap<String, f64>,
    #[serde(default = "default_rate")]
    pub default_rate: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Random-projection width; `None` means `min(64, u)`.
    #[serde(default)]
    pub proj_dim: Option<usize>,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_rate() -> f64 {
    0.5
}
fn default_lambda() -> f64 {
    1.0
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            rates: BTreeMap::new(),
            default_rate: default_rate(),
            lambda: default_lambda(),
            proj_dim: None,
            calibration: CalibrationConfig::default(),
            seed: 0,
        }
    }
}

impl CompressConfig {
    pub fn rate_for(&self, kind: &str) -> f64 {
        self.rates.get(kind).copied().unwrap_or(self.default_rate)
    }

    pub fn validate(&self) -> Result<()> {
        for rate in self.rates.values().chain(std::iter::once(&self.default_rate)) {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::Config(format!("compression rate must be in [0, 1), got {rate}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("importance lambda must be non-negative, got {}", self.lambda)));
        }
        if self.proj_dim == Some(0) {
            return Err(Error::Config("projection dimension must be positive".into()));
        }
        self.calibration.validate()
    }
}

/// One row of the per-stage compression metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetric {
    pub stage: String,
    pub group: usize,
    pub rel_error: f64,
    pub params_before: usize,
    pub params_after: usize,
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub bank: FactorBank,
    pub metrics: Vec<StageMetric>,
    /// Gate-inversion clamps during re-solve, summed over layers.
    pub clamped: usize,
}

fn worst_rel_error(group: &LayerGroup, targets: &[Matrix], gate: &GateConfig) -> Result<f64> {
    let mut worst = 0.0f64;
    for (m, w) in targets.iter().enumerate() {
        worst = worst.max(group.weight(m, gate)?.relative_error(w));
    }
    Ok(worst)
}

/// Data-free basis reduction of every group.
///
/// Per group: importance scores, clustering of the basis columns, merge and
/// aggregate, then a least-squares re-solve of each mixer against the teacher
/// weight. A layer keeps whichever of the aggregated or re-solved mixer
/// reconstructs its teacher better. Groups whose rank does not change are
/// copied untouched.
pub fn compress_cluster(teacher: &FactorBank, cfg: &CompressConfig) -> Result<ClusterOutcome> {
    cfg.validate()?;
    teacher.validate()?;
    let gate = teacher.gate;
    let results: Vec<Result<(LayerGroup, Vec<StageMetric>, usize)>> = teacher
        .groups
        .par_iter()
        .map(|g| {
            let targets: Vec<Matrix> = (0..g.members.len()).map(|m| g.weight(m, &gate)).collect::<Result<_>>()?;
            let before = g.param_count();
            let k = reduced_rank(g.cfg.r, cfg.rate_for(&g.kind))?;
            if k == g.cfg.r {
                let metric = StageMetric {
                    stage: "unchanged".into(),
                    group: g.id,
                    rel_error: worst_rel_error(g, &targets, &gate)?,
                    params_before: before,
                    params_after: before,
                };
                return Ok((g.clone(), vec![metric], 0));
            }
            let mixers: Vec<&Matrix> = g.members.iter().map(|m| &m.mixer).collect();
            let w = importance_scores(&g.basis, &mixers, cfg.lambda, None)?;
            let proj = cfg.proj_dim.unwrap_or_else(|| default_projection_dim(g.cfg.u()));
            let seed = cfg.seed.wrapping_add(g.id as u64);
            let clusters = cluster_basis(&g.basis, &mixers, &w, k, proj, seed)?;
            let basis = merge_basis(&g.basis, &clusters.assignments, &w, k)?;
            let aggregated = aggregate_coefficients(&mixers, &clusters.assignments, k)?;
            let new_cfg = g.cfg.with_rank(k);
            let mut merged = LayerGroup {
                id: g.id,
                kind: g.kind.clone(),
                cfg: new_cfg,
                basis,
                members: g
                    .members
                    .iter()
                    .zip(aggregated)
                    .map(|(m, a)| crate::bank::GroupMember {
                        name: m.name.clone(),
                        mixer: a,
                        bias: m.bias.clone(),
                    })
                    .collect(),
            };
            let after = merged.param_count();
            let merged_err = worst_rel_error(&merged, &targets, &gate)?;
            let mut clamped = 0;
            for (mi, w_t) in targets.iter().enumerate() {
                let resolved = resolve_coefficients(w_t, &merged.basis, &new_cfg, &gate)?;
                clamped += resolved.clamped;
                let current = merged.weight(mi, &gate)?.relative_error(w_t);
                let candidate = generate_weight(&merged.basis, &resolved.mixer, &new_cfg, &gate)?.relative_error(w_t);
                if candidate.is_finite() && candidate <= current {
                    merged.members[mi].mixer = resolved.mixer;
                }
            }
            let resolved_err = worst_rel_error(&merged, &targets, &gate)?;
            let metrics = vec![
                StageMetric {
                    stage: "merge".into(),
                    group: g.id,
                    rel_error: merged_err,
                    params_before: before,
                    params_after: after,
                },
                StageMetric {
                    stage: "resolve".into(),
                    group: g.id,
                    rel_error: resolved_err,
                    params_before: before,
                    params_after: after,
                },
            ];
            Ok((merged, metrics, clamped))
        })
        .collect();
    let mut bank = teacher.clone();
    bank.groups.clear();
    let mut metrics = Vec::new();
    let mut clamped = 0;
    for r in results {
        let (g, m, c) = r?;
        bank.groups.push(g);
        metrics.extend(m);
        clamped += c;
    }
    bank.provenance.notes.push("cluster compression".into());
    Ok(ClusterOutcome { bank, metrics, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul_tn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reduced_ranks() {
        for r in [8usize, 16, 64] {
            for rho in [0.0, 0.3, 0.5, 0.75] {
                let want = (r as f64 * (1.0 - rho)).floor() as usize;
                // exact decimal arithmetic: r·(1−ρ) with ρ in hundredths
                let exact = (r * (100 - (rho * 100.0).round() as usize)) / 100;
                assert_eq!(reduced_rank(r, rho).unwrap(), exact, "r={r} rho={rho}");
                assert!(want == exact || want + 1 == exact);
            }
        }
        assert_eq!(reduced_rank(10, 0.3).unwrap(), 7);
        assert!(reduced_rank(8, 1.0).is_err());
        assert!(reduced_rank(1, 0.5).is_err());
    }

    #[test]
    fn importance_examples() {
        let b = Matrix::from_rows(&[[2.0, 0.0, 3.0], [0.0, 0.0, 4.0]]);
        let a = Matrix::from_rows(&[[1.0, -2.0], [0.0, 0.0], [0.5, 0.5]]);
        let w0 = importance_scores(&b, &[&a], 0.0, None).unwrap();
        assert_eq!(w0, vec![2.0, 0.0, 5.0]);
        let w = importance_scores(&b, &[&a], 0.5, None).unwrap();
        assert_eq!(w[0], 3.5);
        assert_eq!(w[1], 0.0);
        let boosted = importance_scores(&b, &[&a], 0.5, Some(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(boosted[0], 7.0);
    }

    #[test]
    fn merge_examples() {
        let b = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let m = merge_basis(&b, &[0, 0], &[1.0, 1.0], 1).unwrap();
        assert!((m.get(0, 0) - 0.70710677).abs() < 1e-6);
        assert!((m.get(1, 0) - 0.70710677).abs() < 1e-6);
        assert_eq!(merge_basis(&b, &[0, 1], &[1.0, 2.0], 2).unwrap(), b);
        let dup = Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0]]);
        let merged = merge_basis(&dup, &[0, 0], &[0.0, 0.0], 1).unwrap();
        assert!((merged.get(0, 0) - 1.0).abs() < 1e-6 && (merged.get(1, 0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn aggregate_sums_rows() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let out = aggregate_coefficients(&[&a], &[0, 0, 0], 1).unwrap();
        assert_eq!(out[0], Matrix::from_rows(&[[9.0, 12.0]]));
        assert_eq!(aggregate_coefficients(&[&a], &[0, 1, 2], 3).unwrap()[0], a);
    }

    #[test]
    fn duplicated_columns_cluster_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..10 {
            let mut b = Matrix::random_normal(12, 5, 1.0, &mut rng);
            let mut a = Matrix::random_normal(5, 4, 1.0, &mut rng);
            let (i, j) = (rng.random_range(0..5), rng.random_range(0..5));
            if i == j {
                continue;
            }
            for r in 0..12 {
                b.set(r, j, b.get(r, i));
            }
            let row = a.row(i).to_vec();
            a.row_mut(j).copy_from_slice(&row);
            let w = importance_scores(&b, &[&a], 1.0, None).unwrap();
            let c = cluster_basis(&b, &[&a], &w, 4, 8, trial).unwrap();
            assert_eq!(c.assignments[i], c.assignments[j], "trial {trial}");
        }
    }

    #[test]
    fn resolve_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = FactorizationConfig::new(6, 4, 3, 4).unwrap();
        let q = crate::numerics::random_orthogonal(6, 3, &mut rng);
        let a = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let w = matmul(&q, &a).unwrap().reshape(4, 6).unwrap();
        let r = resolve_coefficients(&w, &q, &cfg, &GateConfig::NONE).unwrap();
        let closed = matmul_tn(&q, &w.clone().reshape(6, 4).unwrap()).unwrap();
        assert!(r.mixer.relative_error(&closed) < 1e-5);
        assert!(r.mixer.relative_error(&a) < 1e-5);
        // PRE gating recovers the original mixer
        let gate = GateConfig::default();
        let wg = generate_weight(&q, &a, &cfg, &gate).unwrap();
        let rg = resolve_coefficients(&wg, &q, &cfg, &gate).unwrap();
        assert_eq!(rg.clamped, 0);
        assert!(generate_weight(&q, &rg.mixer, &cfg, &gate).unwrap().relative_error(&wg) < 1e-4);
    }

    #[test]
    fn svd_warm_start_full_rank_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = FactorizationConfig::new(8, 8, 4, 8).unwrap();
        for gate in [GateConfig::default(), GateConfig::NONE] {
            let bank = FactorBank {
                groups: vec![LayerGroup {
                    id: 0,
                    kind: "f".into(),
                    cfg,
                    basis: Matrix::random_normal(8, 4, 1.0, &mut rng),
                    members: (0..2)
                        .map(|i| crate::bank::GroupMember {
                            name: format!("f.{i}"),
                            mixer: Matrix::random_normal(4, 8, 1.0, &mut rng),
                            bias: vec![0.0; 8],
                        })
                        .collect(),
                }],
                passthrough: vec![],
                layer_order: vec!["f.0".into(), "f.1".into()],
                gate,
                provenance: Default::default(),
            };
            let student = svd_warm_start(&bank, 4).unwrap();
            for (t, s) in bank.generated_weights().unwrap().iter().zip(student.generated_weights().unwrap()) {
                assert!(s.1.relative_error(&t.1) < 1e-4, "{gate:?}: {}", s.1.relative_error(&t.1));
            }
        }
    }
}
