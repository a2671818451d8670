//! Dense kernels, decompositions, clustering and losses.
//!
//! Storage is `f32`; products and reductions accumulate in `f64`. Everything
//! here is a pure function of its inputs plus an explicit seed.

mod kmeans;
mod linalg;
mod loss;
mod matrix;
mod projection;

pub use kmeans::{weighted_kmeans, ClusterResult};
pub use linalg::{
    pseudo_inverse, random_orthogonal, svd, SvdResult, DEFAULT_RCOND, JACOBI_MAX_SWEEPS,
    JACOBI_TOLERANCE,
};
pub use loss::{cross_entropy, kl_divergence, loss_and_grad, mse, softmax, LossConfig, LossKind};
pub use matrix::{matmul, matmul_nt, matmul_tn, Matrix};
pub use projection::{default_projection_dim, random_projection};
