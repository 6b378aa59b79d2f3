//! Dense numeric kernels: matrix product, transposed convolution,
//! temperature softmax, cross entropy.
//!
//! Summation order is fixed (ascending index) in every kernel so results
//! are bitwise reproducible run to run. The rayon paths partition work so
//! that each output element is still produced by the identical sequential
//! inner loop, which keeps the parallel and sequential builds bit-for-bit
//! equal.

use crate::error::{EptError, Result};
use crate::numeric::Matrix;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Matrix product `a * b` with ascending-index inner summation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(EptError::Shape(format!(
            "matmul: {}x{} incompatible with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    #[cfg(feature = "parallel")]
    {
        Ok(matmul_par(a, b))
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(matmul_seq(a, b))
    }
}

fn matmul_row(a: &Matrix, b: &Matrix, r: usize, out_row: &mut [f64]) {
    let inner = a.cols();
    let a_row = a.row(r);
    for (c, out) in out_row.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..inner {
            acc += a_row[i] * b.get(i, c);
        }
        *out = acc;
    }
}

/// Sequential matrix product; also the fallback build and the benchmark baseline.
pub fn matmul_seq(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    let cols = out.cols();
    for r in 0..a.rows() {
        let row = &mut out.as_mut_slice()[r * cols..(r + 1) * cols];
        matmul_row(a, b, r, row);
    }
    out
}

/// Row-parallel matrix product; bitwise identical to [`matmul_seq`].
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    let cols = out.cols();
    out.as_mut_slice()
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(r, row)| matmul_row(a, b, r, row));
    out
}

/// Transposed 2-D convolution: each input element `z[a][b]` scatters
/// `z[a][b] * k` into the output block anchored at `(a*stride, b*stride)`,
/// overlaps summed. Output shape is
/// `((z.rows-1)*stride + s) x ((z.cols-1)*stride + s)` for an `s x s` kernel.
pub fn transposed_conv2d(z: &Matrix, k: &Matrix, stride: usize) -> Result<Matrix> {
    if k.rows() != k.cols() {
        return Err(EptError::Shape(format!(
            "transposed_conv2d: kernel must be square, got {}x{}",
            k.rows(),
            k.cols()
        )));
    }
    if stride == 0 {
        return Err(EptError::Parameter("transposed_conv2d: stride must be >= 1".into()));
    }
    let s = k.rows();
    let out_rows = (z.rows() - 1) * stride + s;
    let out_cols = (z.cols() - 1) * stride + s;
    let mut out = Matrix::zeros(out_rows, out_cols);

    if stride >= s {
        // Non-overlapping: every output cell receives at most one contribution,
        // so input rows can be processed independently.
        #[cfg(feature = "parallel")]
        {
            let bands: Vec<Vec<f64>> = (0..z.rows())
                .into_par_iter()
                .map(|a| deconv_band(z, k, stride, a, out_cols))
                .collect();
            for (a, band) in bands.into_iter().enumerate() {
                let start = a * stride * out_cols;
                out.as_mut_slice()[start..start + band.len()].copy_from_slice(&band);
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            for a in 0..z.rows() {
                let band = deconv_band(z, k, stride, a, out_cols);
                let start = a * stride * out_cols;
                out.as_mut_slice()[start..start + band.len()].copy_from_slice(&band);
            }
        }
    } else {
        // Overlapping blocks: plain scatter in ascending (a, b, p, q) order.
        for a in 0..z.rows() {
            for b in 0..z.cols() {
                let zv = z.get(a, b);
                for p in 0..s {
                    for q in 0..s {
                        out.add_at(a * stride + p, b * stride + q, zv * k.get(p, q));
                    }
                }
            }
        }
    }
    Ok(out)
}

// One input row's scatter band (rows a*stride .. a*stride+s) for the
// non-overlapping case, in the same ascending (b, p, q) order as the
// sequential scatter.
fn deconv_band(z: &Matrix, k: &Matrix, stride: usize, a: usize, out_cols: usize) -> Vec<f64> {
    let s = k.rows();
    let mut band = vec![0.0; s * out_cols];
    for b in 0..z.cols() {
        let zv = z.get(a, b);
        for p in 0..s {
            for q in 0..s {
                band[p * out_cols + b * stride + q] += zv * k.get(p, q);
            }
        }
    }
    band
}

/// Gradient of `transposed_conv2d` w.r.t. the input seed.
pub(crate) fn transposed_conv2d_grad_input(g: &Matrix, k: &Matrix, stride: usize, z_shape: (usize, usize)) -> Matrix {
    let s = k.rows();
    Matrix::from_fn(z_shape.0, z_shape.1, |a, b| {
        let mut acc = 0.0;
        for p in 0..s {
            for q in 0..s {
                acc += g.get(a * stride + p, b * stride + q) * k.get(p, q);
            }
        }
        acc
    })
}

/// Gradient of `transposed_conv2d` w.r.t. the kernel.
pub(crate) fn transposed_conv2d_grad_kernel(g: &Matrix, z: &Matrix, stride: usize, s: usize) -> Matrix {
    Matrix::from_fn(s, s, |p, q| {
        let mut acc = 0.0;
        for a in 0..z.rows() {
            for b in 0..z.cols() {
                acc += z.get(a, b) * g.get(a * stride + p, b * stride + q);
            }
        }
        acc
    })
}

/// Temperature softmax over a vector: `p_i = exp(v_i/tau) / sum_j exp(v_j/tau)`.
/// The maximum logit over tau is subtracted before exponentiation.
pub fn softmax_temp(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(EptError::Parameter("softmax_temp: empty input".into()));
    }
    if !(tau > 0.0) {
        return Err(EptError::Parameter(format!(
            "softmax_temp: temperature must be > 0, got {tau}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EptError::Numeric("softmax_temp: non-finite input logit".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shift = max / tau;
    let exps: Vec<f64> = v.iter().map(|&x| (x / tau - shift).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Negative log softmax probability of the target class.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(EptError::Index(format!(
            "cross_entropy: target {target} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(-(logits[target] - max - log_sum))
}

/// Softmax gradient helper shared by the tape: given the raw logits, the
/// target index and the upstream scalar gradient, accumulates
/// `g * (softmax - onehot)` into `d_logits`.
pub(crate) fn cross_entropy_backward(logits: &[f64], target: usize, g: f64, d_logits: &mut [f64]) {
    let probs = softmax_temp(logits, 1.0).expect("finite logits already validated");
    for (i, p) in probs.iter().enumerate() {
        let indicator = if i == target { 1.0 } else { 0.0 };
        d_logits[i] += g * (p - indicator);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    #[test]
    fn matmul_identity() {
        let x = Matrix::from_fn(3, 5, |r, c| (r * 5 + c) as f64 - 7.0);
        let i = Matrix::identity(3);
        assert!(matmul(&i, &x).unwrap().bits_eq(&x));
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle_exactly() {
        let mut rng = crate::testrng(11);
        let a = Matrix::from_fn(5, 4, |_, _| rng.next() - 0.5);
        let b = Matrix::from_fn(4, 3, |_, _| rng.next() - 0.5);
        let got = matmul(&a, &b).unwrap();
        assert!(got.bits_eq(&reference::matmul_naive(&a, &b)));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn matmul_parallel_matches_sequential_bitwise() {
        let mut rng = crate::testrng(5);
        let a = Matrix::from_fn(37, 23, |_, _| rng.next() - 0.5);
        let b = Matrix::from_fn(23, 41, |_, _| rng.next() - 0.5);
        assert!(matmul_par(&a, &b).bits_eq(&matmul_seq(&a, &b)));
    }

    #[test]
    fn deconv_hand_case() {
        let z = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let k = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let out = transposed_conv2d(&z, &k, 2).unwrap();
        let want = Matrix::from_rows(&[
            &[1.0, 0.0, 2.0, 0.0],
            &[0.0, 2.0, 0.0, 4.0],
            &[3.0, 0.0, 4.0, 0.0],
            &[0.0, 6.0, 0.0, 8.0],
        ]);
        assert!(out.bits_eq(&want));
    }

    #[test]
    fn deconv_zero_kernel_gives_zero_output() {
        let z = Matrix::from_fn(3, 4, |r, c| (r + c) as f64);
        let k = Matrix::zeros(3, 3);
        let out = transposed_conv2d(&z, &k, 2).unwrap();
        assert_eq!(out.shape(), (7, 9));
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_matches_scatter_oracle_overlapping_and_not() {
        let mut rng = crate::testrng(3);
        for &(zr, zc, s, stride) in &[(2, 3, 3, 1), (3, 3, 2, 2), (4, 2, 3, 2), (2, 2, 4, 4), (3, 3, 1, 2)] {
            let z = Matrix::from_fn(zr, zc, |_, _| rng.next() - 0.5);
            let k = Matrix::from_fn(s, s, |_, _| rng.next() - 0.5);
            let got = transposed_conv2d(&z, &k, stride).unwrap();
            let want = reference::deconv_scatter(&z, &k, stride);
            assert!(got.bits_eq(&want), "mismatch at z{zr}x{zc} k{s} stride{stride}");
        }
    }

    #[test]
    fn deconv_stride_equals_kernel_is_kronecker() {
        let mut rng = crate::testrng(9);
        let z = Matrix::from_fn(3, 2, |_, _| rng.next() - 0.5);
        let k = Matrix::from_fn(3, 3, |_, _| rng.next() - 0.5);
        let got = transposed_conv2d(&z, &k, 3).unwrap();
        assert!(got.bits_eq(&reference::kronecker(&z, &k)));
    }

    #[test]
    fn deconv_rejects_bad_kernel_and_stride() {
        let z = Matrix::zeros(2, 2);
        assert!(matches!(
            transposed_conv2d(&z, &Matrix::zeros(2, 3), 1),
            Err(EptError::Shape(_))
        ));
        assert!(matches!(
            transposed_conv2d(&z, &Matrix::zeros(2, 2), 0),
            Err(EptError::Parameter(_))
        ));
    }

    #[test]
    fn softmax_symmetry_and_known_values() {
        let p = softmax_temp(&[0.3, 0.3, 0.3], 2.5).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_temp(&[2.0, 1.0], 1.0).unwrap();
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
        let p = softmax_temp(&[2.0, 1.0], 1e-6).unwrap();
        assert!(p[0] > 1.0 - 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert!(matches!(softmax_temp(&[1.0], 0.0), Err(EptError::Parameter(_))));
        assert!(matches!(softmax_temp(&[1.0], -1.0), Err(EptError::Parameter(_))));
        assert!(matches!(
            softmax_temp(&[f64::NAN, 1.0], 1.0),
            Err(EptError::Numeric(_))
        ));
        assert!(matches!(softmax_temp(&[], 1.0), Err(EptError::Parameter(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        for c in [2usize, 5, 9] {
            let logits = vec![0.7; c];
            let l = cross_entropy(&logits, c - 1).unwrap();
            assert!((l - (c as f64).ln()).abs() < 1e-12);
        }
        assert!(cross_entropy(&[10.0, -10.0], 0).unwrap() < 1e-4);
        assert!(matches!(cross_entropy(&[1.0, 2.0], 2), Err(EptError::Index(_))));
    }

    #[test]
    fn cross_entropy_matches_explicit_normalization() {
        let mut rng = crate::testrng(21);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..6).map(|_| 4.0 * (rng.next() - 0.5)).collect();
            let target = (rng.next() * 6.0) as usize % 6;
            let got = cross_entropy(&logits, target).unwrap();
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            let want = -(logits[target].exp() / z).ln();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            assert!(got >= 0.0);
        }
    }
}
