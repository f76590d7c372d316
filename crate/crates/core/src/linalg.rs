//! Small dense complex linear algebra for per-frequency spatial processing.
//!
//! The matrices here are tiny (channel count, or channel count times filter
//! taps), so plain elimination on owned buffers beats pulling in LAPACK.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

/// Sum of the diagonal.
pub fn trace(a: &Array2<Complex64>) -> Complex64 {
    a.diag().iter().sum()
}

/// Whether `a` is square and Hermitian within `rel_tol` of its largest entry.
pub fn is_hermitian(a: &Array2<Complex64>, rel_tol: f64) -> bool {
    let n = a.nrows();
    if a.ncols() != n {
        return false;
    }
    let scale = a.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
    let tol = rel_tol * scale.max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in i..n {
            if (a[(i, j)] - a[(j, i)].conj()).norm() > tol {
                return false;
            }
        }
    }
    true
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot is exactly zero.
pub fn solve(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Option<Array2<Complex64>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "solve: matrix must be square");
    assert_eq!(b.nrows(), n, "solve: right-hand side row mismatch");
    let m = b.ncols();
    let mut lu = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&p, &q| lu[(p, col)].norm().total_cmp(&lu[(q, col)].norm()))
            .unwrap_or(col);
        let pivot = lu[(pivot_row, col)];
        if pivot.norm() == 0.0 || !pivot.is_finite() {
            return None;
        }
        if pivot_row != col {
            for k in 0..n {
                lu.swap((col, k), (pivot_row, k));
            }
            for k in 0..m {
                x.swap((col, k), (pivot_row, k));
            }
        }
        let inv = pivot.inv();
        for row in col + 1..n {
            let factor = lu[(row, col)] * inv;
            if factor == Complex64::new(0.0, 0.0) {
                continue;
            }
            for k in col..n {
                let v = lu[(col, k)];
                lu[(row, k)] -= factor * v;
            }
            for k in 0..m {
                let v = x[(col, k)];
                x[(row, k)] -= factor * v;
            }
        }
    }

    for col in (0..n).rev() {
        let inv = lu[(col, col)].inv();
        for k in 0..m {
            let mut acc = x[(col, k)];
            for j in col + 1..n {
                acc -= lu[(col, j)] * x[(j, k)];
            }
            x[(col, k)] = acc * inv;
        }
    }
    Some(x)
}

/// In-place Cholesky solve of a Hermitian positive definite system.
///
/// `a` is `n x n` row-major and is overwritten by its factor; `b` is `n x m`
/// row-major and is overwritten by the solution. Returns `false` if a pivot
/// is not strictly positive.
pub fn cholesky_solve_in_place(a: &mut [Complex64], n: usize, b: &mut [Complex64], m: usize) -> bool {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n * m);
    // Lower factor L stored in the lower triangle, a = L L^H.
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for k in 0..j {
            d -= a[j * n + k].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let ljj = d.sqrt();
        a[j * n + j] = Complex64::new(ljj, 0.0);
        let inv = 1.0 / ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k].conj();
            }
            a[i * n + j] = s * inv;
        }
    }
    // Forward: L y = b.
    for i in 0..n {
        let inv = 1.0 / a[i * n + i].re;
        for c in 0..m {
            let mut s = b[i * m + c];
            for k in 0..i {
                s -= a[i * n + k] * b[k * m + c];
            }
            b[i * m + c] = s * inv;
        }
    }
    // Backward: L^H x = y.
    for i in (0..n).rev() {
        let inv = 1.0 / a[i * n + i].re;
        for c in 0..m {
            let mut s = b[i * m + c];
            for k in i + 1..n {
                s -= a[k * n + i].conj() * b[k * m + c];
            }
            b[i * m + c] = s * inv;
        }
    }
    true
}

/// Unit-norm eigenvector of the largest eigenvalue of a Hermitian PSD matrix,
/// by power iteration. The phase is fixed so the largest-magnitude entry is
/// real and positive.
pub fn principal_eigenvector(a: &Array2<Complex64>, iterations: usize) -> Array1<Complex64> {
    let n = a.nrows();
    // Start from the column with the largest diagonal entry.
    let start = (0..n)
        .max_by(|&p, &q| a[(p, p)].re.total_cmp(&a[(q, q)].re))
        .unwrap_or(0);
    let mut v: Array1<Complex64> = a.column(start).to_owned();
    if v.iter().all(|z| z.norm() == 0.0) {
        v = Array1::from_elem(n, Complex64::new(1.0, 0.0));
    }
    normalize(&mut v);
    for _ in 0..iterations {
        let next = a.dot(&v);
        let norm = next.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        v = next.mapv(|z| z / norm);
    }
    let anchor = v
        .iter()
        .copied()
        .max_by(|p, q| p.norm().total_cmp(&q.norm()))
        .unwrap_or(Complex64::new(1.0, 0.0));
    if anchor.norm() > 0.0 {
        let phase = anchor.conj() / anchor.norm();
        v.mapv_inplace(|z| z * phase);
    }
    v
}

fn normalize(v: &mut Array1<Complex64>) {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.mapv_inplace(|z| z / norm);
    }
}
