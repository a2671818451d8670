//! The coefficient-gated layer transform and the baseline transforms it generalizes.
//!
//! Layout convention, used everywhere including file formats: the product
//! `B · Ã` (u×s) is reinterpreted row-major as the (d_out, d_in) weight.

mod gate;

pub use gate::{apply_activation, gate, Activation, GateConfig, Placement};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, svd, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizationConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// Basis columns / mixer rows.
    pub r: usize,
    /// Mixer columns.
    pub s: usize,
}

impl FactorizationConfig {
    pub fn new(d_in: usize, d_out: usize, r: usize, s: usize) -> Result<Self> {
        let cfg = Self { d_in, d_out, r, s };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.s == 0 {
            return Err(Error::Config(format!("r and s must be at least 1 (r={}, s={})", self.r, self.s)));
        }
        if self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Config("layer dimensions must be non-zero".into()));
        }
        if (self.d_in * self.d_out) % self.s != 0 {
            return Err(Error::Config(format!(
                "s={} does not divide d_in*d_out={}",
                self.s,
                self.d_in * self.d_out
            )));
        }
        Ok(())
    }

    /// Basis rows: `d_in · d_out / s`.
    pub fn u(&self) -> usize {
        self.d_in * self.d_out / self.s
    }

    pub fn basis_shape(&self) -> (usize, usize) {
        (self.u(), self.r)
    }

    pub fn mixer_shape(&self) -> (usize, usize) {
        (self.r, self.s)
    }

    pub fn with_rank(&self, r: usize) -> Self {
        Self { r, ..*self }
    }
}

fn check_factors(op: &'static str, b: &Matrix, a: &Matrix, cfg: &FactorizationConfig) -> Result<()> {
    cfg.validate()?;
    if b.shape() != cfg.basis_shape() {
        return Err(Error::shape(
            op,
            format!("basis is {:?}, config wants {:?}", b.shape(), cfg.basis_shape()),
        ));
    }
    if a.shape() != cfg.mixer_shape() {
        return Err(Error::shape(
            op,
            format!("mixer is {:?}, config wants {:?}", a.shape(), cfg.mixer_shape()),
        ));
    }
    Ok(())
}

/// Weight generated by one layer: PRE `B·φ(A)`, POST `φ(B·A)`, TEMP `φ(B)·A`,
/// plain `B·A` when the gate is off; reshaped row-major to (d_out, d_in).
pub fn generate_weight(b: &Matrix, a: &Matrix, cfg: &FactorizationConfig, gate_cfg: &GateConfig) -> Result<Matrix> {
    check_factors("generate_weight", b, a, cfg)?;
    let product = match (gate_cfg.placement, gate_cfg.effective()) {
        (_, None) => matmul(b, a)?,
        (Placement::Pre, Some(act)) => matmul(b, &apply_activation(a, act).0)?,
        (Placement::Post, Some(act)) => apply_activation(&matmul(b, a)?, act).0,
        (Placement::Temp, Some(act)) => matmul(&apply_activation(b, act).0, a)?,
        (Placement::None, Some(_)) => unreachable!("effective() is None without a placement"),
    };
    product.reshape(cfg.d_out, cfg.d_in)
}

/// Pre-activation product `B·A` reshaped to (d_out, d_in); equals the generated
/// weight when the gate is off.
pub fn linear_product(b: &Matrix, a: &Matrix, cfg: &FactorizationConfig) -> Result<Matrix> {
    check_factors("linear_product", b, a, cfg)?;
    matmul(b, a)?.reshape(cfg.d_out, cfg.d_in)
}

/// Gradients of a scalar loss with respect to the basis and mixer, given `dL/dW`.
pub fn layer_backward(
    dl_dw: &Matrix,
    b: &Matrix,
    a: &Matrix,
    cfg: &FactorizationConfig,
    gate_cfg: &GateConfig,
) -> Result<(Matrix, Matrix)> {
    check_factors("layer_backward", b, a, cfg)?;
    if dl_dw.shape() != (cfg.d_out, cfg.d_in) {
        return Err(Error::shape(
            "layer_backward",
            format!("dL/dW is {:?}, expected {:?}", dl_dw.shape(), (cfg.d_out, cfg.d_in)),
        ));
    }
    let g = dl_dw.clone().reshape(cfg.u(), cfg.s)?;
    match (gate_cfg.placement, gate_cfg.effective()) {
        (_, None) => Ok((matmul_nt(&g, a)?, matmul_tn(b, &g)?)),
        (Placement::Pre, Some(act)) => {
            let (gated, deriv) = apply_activation(a, act);
            let db = matmul_nt(&g, &gated)?;
            let da = matmul_tn(b, &g)?.hadamard(&deriv)?;
            Ok((db, da))
        }
        (Placement::Post, Some(act)) => {
            let (_, deriv) = apply_activation(&matmul(b, a)?, act);
            let gp = g.hadamard(&deriv)?;
            Ok((matmul_nt(&gp, a)?, matmul_tn(b, &gp)?))
        }
        (Placement::Temp, Some(act)) => {
            let (gated_b, deriv) = apply_activation(b, act);
            let db = matmul_nt(&g, a)?.hadamard(&deriv)?;
            let da = matmul_tn(&gated_b, &g)?;
            Ok((db, da))
        }
        (Placement::None, Some(_)) => unreachable!("effective() is None without a placement"),
    }
}

/// Low-rank update on top of a frozen weight: `B·A + W_p`.
pub fn lora_weight(w_p: &Matrix, b: &Matrix, a: &Matrix) -> Result<Matrix> {
    let delta = matmul(b, a)?;
    if delta.shape() != w_p.shape() {
        return Err(Error::shape(
            "lora_weight",
            format!("B·A is {:?}, W_p is {:?}", delta.shape(), w_p.shape()),
        ));
    }
    delta.add(w_p)
}

/// Shared-basis product `B·A` with `B` (d_out×r) and `A` (r×d_in).
pub fn basis_sharing_weight(b: &Matrix, a: &Matrix) -> Result<Matrix> {
    matmul(b, a)
}

/// Set of K coefficient vectors of length r averaged by [`recast_weight`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecastConfig {
    pub coefficients: Vec<Vec<f32>>,
}

impl RecastConfig {
    pub fn new(coefficients: Vec<Vec<f32>>) -> Self {
        Self { coefficients }
    }

    pub fn k(&self) -> usize {
        self.coefficients.len()
    }
}

/// `(1/K) Σ_j B*·a_j` reshaped to (d_out, d_in); `b_star` is (d_in·d_out)×r.
pub fn recast_weight(b_star: &Matrix, coeffs: &RecastConfig, d_out: usize, d_in: usize) -> Result<Matrix> {
    if coeffs.k() == 0 {
        return Err(Error::Param("recast needs at least one coefficient vector".into()));
    }
    if b_star.rows() != d_in * d_out {
        return Err(Error::shape(
            "recast_weight",
            format!("basis has {} rows, layer needs {}", b_star.rows(), d_in * d_out),
        ));
    }
    let r = b_star.cols();
    let k = coeffs.k();
    let mut terms = Vec::with_capacity(k);
    for a in &coeffs.coefficients {
        if a.len() != r {
            return Err(Error::shape("recast_weight", format!("coefficient length {} != r={r}", a.len())));
        }
        terms.push(matmul(b_star, &Matrix::from_vec(r, 1, a.clone())?)?);
    }
    let out = if k == 1 {
        terms.pop().expect("one term")
    } else {
        let mut acc = vec![0.0f64; d_in * d_out];
        for t in &terms {
            for (s, &v) in acc.iter_mut().zip(t.data()) {
                *s += v as f64;
            }
        }
        Matrix::from_vec(d_in * d_out, 1, acc.iter().map(|&v| (v / k as f64) as f32).collect())?
    };
    out.reshape(d_out, d_in)
}

/// Rank-k truncation `(U_k, s_k, V_k)` with `W ≈ U_k·diag(s_k)·V_kᵀ`.
pub fn svd_truncate(w: &Matrix, k: usize) -> Result<(Matrix, Vec<f32>, Matrix)> {
    let full = w.rows().min(w.cols());
    if k == 0 || k > full {
        return Err(Error::Param(format!("truncation rank {k} outside 1..={full}")));
    }
    let d = svd(w)?;
    Ok((d.u.columns(0, k), d.s[..k].to_vec(), d.v.columns(0, k)))
}

/// `U·diag(s)·Vᵀ`.
pub fn svd_weight(u: &Matrix, s: &[f32], v: &Matrix) -> Result<Matrix> {
    if u.cols() != s.len() || v.cols() != s.len() {
        return Err(Error::shape(
            "svd_weight",
            format!("U {:?}, {} values, V {:?}", u.shape(), s.len(), v.shape()),
        ));
    }
    let us = Matrix::from_fn(u.rows(), u.cols(), |i, j| u.get(i, j) * s[j]);
    matmul_nt(&us, v)
}

/// Stored parameters for `num_groups` groups of `layers_per_group` layers, and the
/// mixer size per layer. Biases are not included.
pub fn param_count(cfg: &FactorizationConfig, layers_per_group: usize, num_groups: usize) -> (usize, usize) {
    let per_layer = cfg.r * cfg.s;
    let total = num_groups * cfg.u() * cfg.r + num_groups * layers_per_group * per_layer;
    (total, per_layer)
}
