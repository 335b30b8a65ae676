use rand_distr::{Distribution, StandardNormal};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Semi-orthogonal `rows×cols` matrix.
///
/// A standard-normal sample is orthonormalized along its shorter dimension
/// with modified Gram-Schmidt, run twice for numerical stability. This is
/// the Q factor of a QR factorization whose R has a positive diagonal, so
/// the result is fully determined by the seed. When `rows ≤ cols` the rows
/// are orthonormal (`M Mᵀ = I`), otherwise the columns are (`Mᵀ M = I`).
pub fn orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!(
            "orthogonal init needs positive dims, got {rows}×{cols}"
        )));
    }
    let (count, dim) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    // `count` vectors of length `dim`, each a row (or column) of the result.
    let mut vecs: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for i in 0..count {
        for _pass in 0..2 {
            for j in 0..i {
                let (done, rest) = vecs.split_at_mut(i);
                let proj: f64 = done[j].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                for (x, q) in rest[0].iter_mut().zip(&done[j]) {
                    *x -= proj * q;
                }
            }
        }
        let norm = vecs[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::NonFinite("orthogonal init (degenerate sample)".into()));
        }
        for x in &mut vecs[i] {
            *x /= norm;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (i, v) in vecs.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            if rows <= cols {
                out[i * cols + j] = x;
            } else {
                out[j * cols + i] = x;
            }
        }
    }
    Ok(out)
}

pub fn orthogonal_init<T: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    Tensor::from_f64(&[rows, cols], &orthogonal(rows, cols, rng)?)
}

/// Largest absolute deviation of the Gram matrix on the shorter side from I.
pub fn gram_deviation(rows: usize, cols: usize, m: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    if rows <= cols {
        for i in 0..rows {
            for j in 0..rows {
                let d: f64 = (0..cols).map(|k| m[i * cols + k] * m[j * cols + k]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
    } else {
        for i in 0..cols {
            for j in 0..cols {
                let d: f64 = (0..rows).map(|k| m[k * cols + i] * m[k * cols + j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
    }
    worst
}
