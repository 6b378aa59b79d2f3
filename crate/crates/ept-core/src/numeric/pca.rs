//! Two-component PCA by power iteration with deflation.

use crate::error::{EptError, Result};
use crate::numeric::Matrix;

const MAX_ITERS: usize = 200;
const CONVERGENCE: f64 = 1e-10;

/// Project `points` (one row per point) onto the top two principal axes of
/// their sample covariance. Each eigenvector's first non-negligible
/// coordinate is made positive so the output is sign-deterministic.
pub fn pca2d(points: &Matrix) -> Result<Matrix> {
    let n = points.rows();
    let d = points.cols();
    if n < 3 {
        return Err(EptError::Parameter(format!("pca2d: need >= 3 points, got {n}")));
    }
    if d < 2 {
        return Err(EptError::Parameter(format!("pca2d: need dimensionality >= 2, got {d}")));
    }
    let mean: Vec<f64> = (0..d)
        .map(|c| (0..n).map(|r| points.get(r, c)).sum::<f64>() / n as f64)
        .collect();
    let centered = Matrix::from_fn(n, d, |r, c| points.get(r, c) - mean[c]);
    let denom = (n - 1) as f64;
    let mut cov = Matrix::from_fn(d, d, |i, j| {
        let mut acc = 0.0;
        for r in 0..n {
            acc += centered.get(r, i) * centered.get(r, j);
        }
        acc / denom
    });
    if cov.as_slice().iter().all(|&v| v == 0.0) {
        return Err(EptError::Degenerate("pca2d: all points identical".into()));
    }

    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(2);
    for _ in 0..2 {
        let (vec, val) = dominant_eigenvector(&cov, &axes);
        // deflate: cov -= lambda * v v^T
        for i in 0..d {
            for j in 0..d {
                cov.add_at(i, j, -val * vec[i] * vec[j]);
            }
        }
        axes.push(vec);
    }

    Ok(Matrix::from_fn(n, 2, |r, c| {
        let axis = &axes[c];
        let mut acc = 0.0;
        for j in 0..d {
            acc += centered.get(r, j) * axis[j];
        }
        acc
    }))
}

fn dominant_eigenvector(cov: &Matrix, prev_axes: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let d = cov.rows();
    // Deterministic quasi-random start, kept orthogonal to the axes already
    // found so deflation dust cannot pull the iterate back toward them.
    let mut v: Vec<f64> = (0..d).map(|j| (0.7 + j as f64 * 1.3).sin()).collect();
    orthogonalize(&mut v, prev_axes);
    if normalize(&mut v) == 0.0 {
        // start vector lay in the span of the previous axes; fall back to
        // the first basis vector with an orthogonal component
        for j in 0..d {
            v.iter_mut().for_each(|x| *x = 0.0);
            v[j] = 1.0;
            orthogonalize(&mut v, prev_axes);
            if normalize(&mut v) > 0.0 {
                break;
            }
        }
    }
    let mut next = vec![0.0; d];
    for _ in 0..MAX_ITERS {
        for (i, slot) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..d {
                acc += cov.get(i, j) * v[j];
            }
            *slot = acc;
        }
        orthogonalize(&mut next, prev_axes);
        let len = normalize(&mut next);
        if len == 0.0 {
            // iterate fell into the null space; the eigenvalue is zero and
            // the current (orthogonalized) direction serves as the axis
            break;
        }
        let delta: f64 = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        std::mem::swap(&mut v, &mut next);
        if delta < CONVERGENCE {
            break;
        }
    }
    // Rayleigh quotient (v already unit length).
    let mut val = 0.0;
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += cov.get(i, j) * v[j];
        }
        val += v[i] * acc;
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
    (v, val)
}

fn orthogonalize(v: &mut [f64], axes: &[Vec<f64>]) {
    for axis in axes {
        let dot: f64 = v.iter().zip(axis).map(|(a, b)| a * b).sum();
        for (x, a) in v.iter_mut().zip(axis) {
            *x -= dot * a;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if len > 0.0 {
        for x in v.iter_mut() {
            *x /= len;
        }
    }
    len
}
