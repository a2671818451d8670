use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{matmul, Matrix};
use crate::error::{Error, Result};

/// Default projection width: `min(64, cols)`.
pub fn default_projection_dim(cols: usize) -> usize {
    cols.clamp(1, 64)
}

/// Seeded Gaussian sketch `m · G / sqrt(d_out)` with `G` of shape cols×d_out.
pub fn random_projection(m: &Matrix, d_out: usize, seed: u64) -> Result<Matrix> {
    if d_out == 0 {
        return Err(Error::Param("projection dimension must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Matrix::random_normal(m.cols(), d_out, 1.0, &mut rng);
    let scale = 1.0 / (d_out as f32).sqrt();
    Ok(matmul(m, &g)?.scale(scale))
}
