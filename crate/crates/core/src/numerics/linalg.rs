//! Thin SVD and Moore–Penrose pseudo-inverse.
//!
//! The SVD eigendecomposes the Gram matrix of the smaller dimension with
//! cyclic Jacobi rotations, all in `f64`. Singular values are recomputed as
//! `‖A·v‖` rather than `sqrt(λ)` to keep small ones accurate, and the left
//! vectors are re-orthonormalized (and completed for null directions) with
//! modified Gram–Schmidt.

use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};

pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_RCOND: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m×k, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative; length k = min(m, n).
    pub s: Vec<f32>,
    /// n×k, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, k) = self.u.shape();
        let n = self.v.rows();
        Matrix::from_fn(m, n, |i, j| {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += self.u.get(i, p) as f64 * self.s[p] as f64 * self.v.get(j, p) as f64;
            }
            acc as f32
        })
    }
}

/// Column-major-free f64 working form used internally.
pub(crate) struct Svd64 {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// m×k row-major
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    /// n×k row-major
    pub v: Vec<f64>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric n×n matrix (row-major).
/// Returns (eigenvalues, eigenvectors as columns of an n×n row-major matrix).
fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    s += a[p * n + q] * a[p * n + q];
                }
            }
        }
        s.sqrt()
    };
    let threshold = JACOBI_TOLERANCE * total;
    let mut residual = off(&a);
    let mut sweeps = 0;
    while residual > threshold {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: if total > 0.0 { residual / total } else { residual },
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // f64::signum(0.0) is 1.0, so theta == 0 gives a 45° rotation
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        residual = off(&a);
    }
    let eig = (0..n).map(|i| a[i * n + i]).collect();
    Ok((eig, v))
}

/// Orthonormalizes `col` against the first `count` columns of `basis` (m×k row-major)
/// twice over and returns its remaining norm before normalization.
fn orthonormalize_against(col: &mut [f64], basis: &[f64], m: usize, k: usize, count: usize) -> f64 {
    for _ in 0..2 {
        for j in 0..count {
            let dot: f64 = (0..m).map(|i| basis[i * k + j] * col[i]).sum();
            for (i, c) in col.iter_mut().enumerate() {
                *c -= dot * basis[i * k + j];
            }
        }
    }
    let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        col.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// The unit vector e_i whose projection off the first `count` basis columns is
/// largest, orthonormalized. Some e_i always keeps norm ≥ sqrt((m-count)/m).
fn best_unit_completion(basis: &[f64], m: usize, k: usize, count: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..m {
        let mut col = vec![0.0; m];
        col[i] = 1.0;
        let norm = orthonormalize_against(&mut col, basis, m, k, count);
        if best.as_ref().is_none_or(|(b, _)| norm > *b + 1e-12) {
            best = Some((norm, col));
        }
    }
    best.map(|(_, c)| c).unwrap_or_default()
}

/// SVD of a tall-or-square m×n (m ≥ n) matrix in f64.
fn svd_tall(a: &[f64], m: usize, n: usize) -> Result<Svd64> {
    let mut gram = vec![0.0f64; n * n];
    for r in 0..m {
        let row = &a[r * n..(r + 1) * n];
        for i in 0..n {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..n {
                gram[i * n + j] += ri * row[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            gram[i * n + j] = gram[j * n + i];
        }
    }
    let (_, vecs) = symmetric_eigen(gram, n)?;

    // A·v_j and its norm for every eigenvector
    let mut av = vec![0.0f64; m * n];
    let mut norms = vec![0.0f64; n];
    for j in 0..n {
        let mut sq = 0.0;
        for r in 0..m {
            let row = &a[r * n..(r + 1) * n];
            let x: f64 = (0..n).map(|p| row[p] * vecs[p * n + j]).sum();
            av[r * n + j] = x;
            sq += x * x;
        }
        norms[j] = sq.sqrt();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let k = n;
    let s_max = norms[order[0]];
    let mut u = vec![0.0f64; m * k];
    let mut v = vec![0.0f64; n * k];
    let mut s = vec![0.0f64; k];
    for (dst, &src) in order.iter().enumerate() {
        for p in 0..n {
            v[p * k + dst] = vecs[p * n + src];
        }
        let sj = norms[src];
        let mut col: Vec<f64> = if s_max > 0.0 && sj > s_max * 1e-12 {
            s[dst] = sj;
            (0..m).map(|r| av[r * n + src] / sj).collect()
        } else {
            vec![0.0; m]
        };
        let norm = orthonormalize_against(&mut col, &u, m, k, dst);
        if norm < 0.5 {
            // null direction: complete the basis
            col = best_unit_completion(&u, m, k, dst);
        }
        for r in 0..m {
            u[r * k + dst] = col[r];
        }
    }
    Ok(Svd64 { m, n, k, u, s, v })
}

pub(crate) fn svd64(m: &Matrix) -> Result<Svd64> {
    if m.is_empty() {
        return Err(Error::Param("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::Param("svd input contains non-finite entries".into()));
    }
    let (rows, cols) = m.shape();
    let mut out = if rows >= cols {
        svd_tall(&m.to_f64(), rows, cols)?
    } else {
        let t = svd_tall(&m.transpose().to_f64(), cols, rows)?;
        Svd64 {
            m: rows,
            n: cols,
            k: t.k,
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    // sign convention: largest-magnitude entry of each u column is positive
    let k = out.k;
    for j in 0..k {
        let mut best = 0usize;
        for i in 0..out.m {
            if out.u[i * k + j].abs() > out.u[best * k + j].abs() {
                best = i;
            }
        }
        if out.u[best * k + j] < 0.0 {
            for i in 0..out.m {
                out.u[i * k + j] = -out.u[i * k + j];
            }
            for i in 0..out.n {
                out.v[i * k + j] = -out.v[i * k + j];
            }
        }
    }
    Ok(out)
}

/// Thin singular value decomposition.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    let d = svd64(m)?;
    Ok(SvdResult {
        u: Matrix::from_f64(d.m, d.k, &d.u),
        s: d.s.iter().map(|&x| x as f32).collect(),
        v: Matrix::from_f64(d.n, d.k, &d.v),
    })
}

/// Moore–Penrose pseudo-inverse; singular values below `rcond · s_max` count as zero.
pub fn pseudo_inverse(m: &Matrix, rcond: f64) -> Result<Matrix> {
    let d = svd64(m)?;
    let s_max = d.s.first().copied().unwrap_or(0.0);
    let cutoff = rcond * s_max;
    let inv: Vec<f64> = d
        .s
        .iter()
        .map(|&s| if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    // pinv = V · diag(inv) · Uᵀ, shape n×m
    let mut out = vec![0.0f64; d.n * d.m];
    for i in 0..d.n {
        for j in 0..d.m {
            let mut acc = 0.0;
            for p in 0..d.k {
                if inv[p] != 0.0 {
                    acc += d.v[i * d.k + p] * inv[p] * d.u[j * d.k + p];
                }
            }
            out[i * d.m + j] = acc;
        }
    }
    Ok(Matrix::from_f64(d.n, d.m, &out))
}

/// Random matrix with orthonormal rows (rows ≤ cols) or orthonormal columns (rows > cols).
pub fn random_orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let tall = rows > cols;
    let (m, k) = if tall { (rows, cols) } else { (cols, rows) };
    let g = Matrix::random_normal(m, k, 1.0, rng).to_f64();
    let mut q = vec![0.0f64; m * k];
    for j in 0..k {
        let mut col: Vec<f64> = (0..m).map(|i| g[i * k + j]).collect();
        if orthonormalize_against(&mut col, &q, m, k, j) < 1e-6 {
            col = best_unit_completion(&q, m, k, j);
        }
        for i in 0..m {
            q[i * k + j] = col[i];
        }
    }
    let q = Matrix::from_f64(m, k, &q);
    if tall {
        q
    } else {
        q.transpose()
    }
}
