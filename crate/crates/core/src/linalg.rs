//! Dense linear-algebra helpers shared by the GP and flow code.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// `C = alpha * A * B + beta * C` on strided row/column layouts.
///
/// Strides are in elements. Panics if any addressed element falls outside the
/// provided slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(c.len() > last(m, n, rsc, csc), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(a.len() > last(m, k, rsa, csa), "gemm: A out of bounds");
    assert!(b.len() > last(k, n, rsb, csb), "gemm: B out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `C (m x n) = A (m x k) * B (k x n)` plus `beta * C`.
pub(crate) fn matmul_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    gemm(m, k, n, 1.0, a, k, 1, b, n, 1, beta, c, n, 1);
}

/// Lower Cholesky factor, failing (not regularising) on indefinite input.
pub(crate) fn cholesky(mat: DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    mat.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: context.to_string(),
        })
}

/// Cholesky with diagonal jitter escalation: `base`, then x10 up to `tries`
/// times. Returns the factor and the jitter that was finally used.
pub(crate) fn cholesky_escalating(
    mat: &DMatrix<f64>,
    base: f64,
    tries: usize,
    context: &str,
) -> Result<(DMatrix<f64>, f64)> {
    let scale = mat.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
    let mut jitter = base;
    for _ in 0..tries.max(1) {
        let mut m = mat.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c.l(), jitter));
        }
        jitter = if jitter == 0.0 { 1e-10 * scale } else { jitter * 10.0 };
    }
    Err(Error::NotPositiveDefinite {
        context: format!("{context} (jitter escalated to {jitter:.3e})"),
    })
}

/// `log |det A|` from a Cholesky factor of `A`.
pub(crate) fn chol_logdet(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse of a lower-triangular matrix.
pub(crate) fn lower_inverse(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub(crate) fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Principal square root of a symmetric PSD matrix, negative eigenvalues
/// clipped to zero.
pub(crate) fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let n = m.nrows();
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    let mut out = &scaled * q.transpose();
    symmetrize(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![1.0; m * n];
        matmul_into(m, k, n, &a, &b, 2.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = 2.0 + (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sqrt_of_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0, -1e-12]));
        let s = sym_sqrt(&m);
        assert!((s[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((s[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(s[(2, 2)].abs() < 1e-12);
    }

    #[test]
    fn escalation_recovers_rank_deficient() {
        let m = DMatrix::from_element(2, 2, 1.0);
        assert!(cholesky(m.clone(), "t").is_err());
        let (_, jitter) = cholesky_escalating(&m, 0.0, 8, "t").unwrap();
        assert!(jitter > 0.0);
    }
}
