//! Straightforward reference implementations used to cross-check the main
//! kernels in tests. Everything here is written independently of the code
//! it verifies: plain loops, no shared helpers, no shortcuts.

use crate::numeric::Matrix;

/// Naive triple-loop matrix product, ascending inner index.
pub fn matmul_naive(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for r in 0..a.cols() {
                acc += a.get(i, r) * b.get(r, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Scatter-accumulate transposed convolution: place `z[a][b] * k` at
/// `(a*stride, b*stride)`, summing overlaps, in ascending (a, b, p, q) order.
pub fn deconv_scatter(z: &Matrix, k: &Matrix, stride: usize) -> Matrix {
    assert_eq!(k.rows(), k.cols());
    assert!(stride >= 1);
    let s = k.rows();
    let mut out = Matrix::zeros((z.rows() - 1) * stride + s, (z.cols() - 1) * stride + s);
    for a in 0..z.rows() {
        for b in 0..z.cols() {
            for p in 0..s {
                for q in 0..s {
                    out.add_at(a * stride + p, b * stride + q, z.get(a, b) * k.get(p, q));
                }
            }
        }
    }
    out
}

/// Kronecker product `a (x) b`.
pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows() * b.rows(), a.cols() * b.cols(), |r, c| {
        a.get(r / b.rows(), c / b.cols()) * b.get(r % b.rows(), c % b.cols())
    })
}

/// Numerical rank by Gaussian elimination with partial pivoting.
pub fn rank(m: &Matrix, tol: f64) -> usize {
    let mut a = m.clone();
    let (rows, cols) = a.shape();
    let mut rank = 0;
    let mut pivot_row = 0;
    for col in 0..cols {
        if pivot_row >= rows {
            break;
        }
        let mut best = pivot_row;
        for r in pivot_row + 1..rows {
            if a.get(r, col).abs() > a.get(best, col).abs() {
                best = r;
            }
        }
        if a.get(best, col).abs() <= tol {
            continue;
        }
        if best != pivot_row {
            for c in 0..cols {
                let tmp = a.get(pivot_row, c);
                a.set(pivot_row, c, a.get(best, c));
                a.set(best, c, tmp);
            }
        }
        for r in pivot_row + 1..rows {
            let factor = a.get(r, col) / a.get(pivot_row, col);
            for c in col..cols {
                a.add_at(r, c, -factor * a.get(pivot_row, c));
            }
        }
        rank += 1;
        pivot_row += 1;
    }
    rank
}

/// Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi
/// rotations, sorted by descending eigenvalue. Returns (values, vectors);
/// vectors are the columns of the second matrix.
pub fn jacobi_eigen(sym: &Matrix) -> (Vec<f64>, Matrix) {
    assert_eq!(sym.rows(), sym.cols());
    let n = sym.rows();
    let mut a = sym.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q, s * aip + c * aiq);
                }
                for i in 0..n {
                    let api = a.get(p, i);
                    let aqi = a.get(q, i);
                    a.set(p, i, c * api - s * aqi);
                    a.set(q, i, s * api + c * aqi);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap());
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    (values, vectors)
}

/// Least-squares solution of `a * x = b` via normal equations with a tiny
/// ridge for conditioning; used as the label-recovery probe.
pub fn least_squares(a: &Matrix, b: &Matrix) -> Matrix {
    let at = a.transposed();
    let mut ata = matmul_naive(&at, a);
    for i in 0..ata.rows() {
        ata.add_at(i, i, 1e-10);
    }
    let atb = matmul_naive(&at, b);
    solve(&ata, &atb)
}

/// Dense linear solve by Gaussian elimination with partial pivoting.
pub fn solve(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), a.cols());
    assert_eq!(a.rows(), b.rows());
    let n = a.rows();
    let m = b.cols();
    let mut aug = Matrix::from_fn(n, n + m, |r, c| {
        if c < n {
            a.get(r, c)
        } else {
            b.get(r, c - n)
        }
    });
    for col in 0..n {
        let mut best = col;
        for r in col + 1..n {
            if aug.get(r, col).abs() > aug.get(best, col).abs() {
                best = r;
            }
        }
        if best != col {
            for c in 0..n + m {
                let tmp = aug.get(col, c);
                aug.set(col, c, aug.get(best, c));
                aug.set(best, c, tmp);
            }
        }
        let pivot = aug.get(col, col);
        assert!(pivot.abs() > 1e-300, "singular system");
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = aug.get(r, col) / pivot;
            for c in col..n + m {
                aug.add_at(r, c, -factor * aug.get(col, c));
            }
        }
    }
    Matrix::from_fn(n, m, |r, c| aug.get(r, n + c) / aug.get(r, r))
}
