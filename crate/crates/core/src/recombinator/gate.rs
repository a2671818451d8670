use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

/// Where the element-wise constraint sits in the weight generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// On the mixer: `B · φ(A)`.
    Pre,
    /// On the reconstructed weight: `φ(B · A)`.
    Post,
    /// On the basis: `φ(B) · A`.
    Temp,
    /// Plain `B · A`.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x · sigmoid(x)`
    SiluGate,
    Relu,
    /// tanh approximation
    Gelu,
    None,
}

impl Placement {
    pub const ALL: [Placement; 4] = [Placement::Pre, Placement::Post, Placement::Temp, Placement::None];
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::SiluGate,
        Activation::Relu,
        Activation::Gelu,
        Activation::None,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub placement: Placement,
    pub activation: Activation,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            placement: Placement::Pre,
            activation: Activation::SiluGate,
        }
    }
}

impl GateConfig {
    pub const NONE: GateConfig = GateConfig {
        placement: Placement::None,
        activation: Activation::None,
    };

    pub fn new(placement: Placement, activation: Activation) -> Self {
        Self { placement, activation }
    }

    /// The activation actually applied, or `None` when the transform is linear.
    pub fn effective(&self) -> Option<Activation> {
        match (self.placement, self.activation) {
            (Placement::None, _) | (_, Activation::None) => None,
            (_, act) => Some(act),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    /// Value and derivative at `x`.
    #[inline]
    pub fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Activation::SiluGate => {
                let s = sigmoid(x);
                (x * s, s * (1.0 + x * (1.0 - s)))
            }
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Gelu => {
                let inner = GELU_C * (x + GELU_A * x * x * x);
                let t = inner.tanh();
                let value = 0.5 * x * (1.0 + t);
                let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                (value, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
            }
            Activation::None => (x, 1.0),
        }
    }

    pub fn value(self, x: f64) -> f64 {
        self.eval(x).0
    }

    /// Start of the increasing branch and the function's minimum there.
    /// Below `x*` the activation is not invertible.
    pub fn monotone_branch(self) -> (f64, f64) {
        match self {
            Activation::None => (f64::NEG_INFINITY, f64::NEG_INFINITY),
            Activation::Relu => (0.0, 0.0),
            Activation::SiluGate | Activation::Gelu => {
                // ternary search for the unique minimum on [-4, 0]
                let (mut lo, mut hi) = (-4.0f64, 0.0f64);
                for _ in 0..200 {
                    let m1 = lo + (hi - lo) / 3.0;
                    let m2 = hi - (hi - lo) / 3.0;
                    if self.value(m1) < self.value(m2) {
                        hi = m2;
                    } else {
                        lo = m1;
                    }
                }
                let x = 0.5 * (lo + hi);
                (x, self.value(x))
            }
        }
    }

    /// Solves `φ(x) = y` on the increasing branch by bisection.
    /// Returns `(x, clamped)`; targets below the branch minimum clamp to its start.
    pub fn invert(self, y: f64, steps: usize) -> (f64, bool) {
        match self {
            Activation::None => (y, false),
            Activation::Relu => {
                if y >= 0.0 {
                    (y, false)
                } else {
                    (0.0, true)
                }
            }
            Activation::SiluGate | Activation::Gelu => {
                let (x_star, y_min) = self.monotone_branch();
                if y <= y_min {
                    return (x_star, y < y_min);
                }
                // φ(y⁺ + 2) > y for both activations
                let (mut lo, mut hi) = (x_star, y.max(0.0) + 2.0);
                for _ in 0..steps {
                    let mid = 0.5 * (lo + hi);
                    if self.value(mid) < y {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (0.5 * (lo + hi), false)
            }
        }
    }
}

/// Element-wise activation of `m` and its element-wise derivative.
pub fn apply_activation(m: &Matrix, act: Activation) -> (Matrix, Matrix) {
    let mut value = Matrix::zeros(m.rows(), m.cols());
    let mut deriv = Matrix::zeros(m.rows(), m.cols());
    for ((v, d), &x) in value
        .data_mut()
        .iter_mut()
        .zip(deriv.data_mut().iter_mut())
        .zip(m.data())
    {
        let (fv, fd) = act.eval(x as f64);
        *v = fv as f32;
        *d = fd as f32;
    }
    (value, deriv)
}

/// Gated mixer `Ã` and `dÃ/dA`, using the configured activation
/// (identity with all-ones derivative when the gate is disabled).
pub fn gate(a: &Matrix, cfg: &GateConfig) -> (Matrix, Matrix) {
    match cfg.effective() {
        Some(act) => apply_activation(a, act),
        None => (a.clone(), Matrix::filled(a.rows(), a.cols(), 1.0)),
    }
}
