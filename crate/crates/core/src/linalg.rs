//! Small dense helpers shared by the energy modules.

use nalgebra::{DMatrix, DVector, Matrix2, SMatrix, Vector2};

/// Closed-form eigendecomposition of a symmetric 2x2 matrix.
///
/// Eigenvalues are returned ascending with unit eigenvectors.
pub fn sym_eigen2(m: &Matrix2<f64>) -> ([f64; 2], [Vector2<f64>; 2]) {
    let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
    let mean = 0.5 * (a + c);
    let half = 0.5 * (a - c);
    let r = half.hypot(b);
    let lo = mean - r;
    let hi = mean + r;
    if r == 0.0 {
        return ([lo, hi], [Vector2::x(), Vector2::y()]);
    }
    // eigenvector of hi: pick the better-conditioned of the two row forms
    let v_hi = if half >= 0.0 {
        Vector2::new(half + r, b)
    } else {
        Vector2::new(b, r - half)
    }
    .normalize();
    let v_lo = Vector2::new(-v_hi.y, v_hi.x);
    ([lo, hi], [v_lo, v_hi])
}

/// Clamps negative eigenvalues of a symmetric 2x2 matrix to zero.
pub fn project_psd2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let (vals, vecs) = sym_eigen2(m);
    let mut out = Matrix2::zeros();
    for k in 0..2 {
        if vals[k] > 0.0 {
            out += vals[k] * vecs[k] * vecs[k].transpose();
        }
    }
    out
}

/// Numeric PSD projection of a symmetric matrix by eigendecomposition.
pub fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| l.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// As [`project_psd`] for the 9x9 stress-derivative blocks.
pub fn project_psd9(m: &SMatrix<f64, 9, 9>) -> SMatrix<f64, 9, 9> {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let mut out = SMatrix::<f64, 9, 9>::zeros();
    for k in 0..9 {
        let l = eig.eigenvalues[k];
        if l > 0.0 {
            let q = eig.eigenvectors.column(k);
            out += l * q * q.transpose();
        }
    }
    out
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
