//! Independent reference computations used by tests and the acceptance suite.
//!
//! Nothing here is on a production path. Brute-force distances, the explicit
//! `E Ebar^-1` contact Jacobian, the full mollified `J`-space Hessian built by
//! the generic chain rule, and finite differences.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::barrier::BarrierParams;
use crate::mollifier::{mollified_partials, Mat9, MollifiedEigenSystem, Vec9, SLOT_G, SLOT_GAMMA};
use crate::proximity::ContactKind;
use crate::Vec3;

fn refine2<F: Fn(f64, f64) -> Option<f64>>(f: F, n: usize) -> f64 {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=n {
        for j in 0..=n {
            let (a, b) = (i as f64 / n as f64, j as f64 / n as f64);
            if let Some(v) = f(a, b) {
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
    }
    // local zoom around the best sample
    let mut h = 1.0 / n as f64;
    for _ in 0..4 {
        let (_, a0, b0) = best;
        for i in -10..=10 {
            for j in -10..=10 {
                let (a, b) = (a0 + i as f64 * h / 10.0, b0 + j as f64 * h / 10.0);
                if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
                    continue;
                }
                if let Some(v) = f(a, b) {
                    if v < best.0 {
                        best = (v, a, b);
                    }
                }
            }
        }
        h /= 10.0;
    }
    best.0
}

/// Squared point-triangle distance by sampling barycentric coordinates.
pub fn grid_point_triangle_d2(p: &Vec3, t1: &Vec3, t2: &Vec3, t3: &Vec3, n: usize) -> f64 {
    refine2(
        |a, b| {
            if a + b > 1.0 {
                None
            } else {
                Some((p - (t1 + (t2 - t1) * a + (t3 - t1) * b)).norm_squared())
            }
        },
        n,
    )
}

/// Squared segment-segment distance by sampling both parameters.
pub fn grid_edge_edge_d2(a1: &Vec3, a2: &Vec3, b1: &Vec3, b2: &Vec3, n: usize) -> f64 {
    refine2(
        |s, t| Some(((a1 + (a2 - a1) * s) - (b1 + (b2 - b1) * t)).norm_squared()),
        n,
    )
}

/// Reflection-style rotation taking unit `n` to `+y`.
pub fn align_to_y(n: &Vec3) -> Matrix3<f64> {
    let b = Vec3::y();
    let s = n + b;
    if s.norm_squared() < 1e-24 {
        Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0))
    } else {
        2.0 * s * s.transpose() / s.norm_squared() - Matrix3::identity()
    }
}

/// `F = E Ebar^-1` built from explicit current and ideal simplex shapes.
///
/// The ideal shape pushes the first primitive along the contact normal until
/// the gap is `d_hat`. Vertex order follows the stencil: the point (or first
/// edge) first. Returns `Err` when `Ebar` is singular.
pub fn explicit_jacobian(kind: ContactKind, x: &[Vec3], d_hat: f64) -> Result<DMatrix<f64>, String> {
    match kind.base() {
        ContactKind::PointTriangle => {
            let mut n = (x[2] - x[1]).cross(&(x[3] - x[1])).normalize();
            let mut d = (x[0] - x[1]).dot(&n);
            if d < 0.0 {
                n = -n;
                d = -d;
            }
            let xb0 = x[0] + n * (d_hat - d);
            let e = Matrix3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]);
            let eb = Matrix3::from_columns(&[x[1] - xb0, x[2] - xb0, x[3] - xb0]);
            let inv = eb.try_inverse().ok_or("singular ideal shape")?;
            Ok(DMatrix::from_column_slice(3, 3, (e * inv).as_slice()))
        }
        ContactKind::EdgeEdge => {
            let mut n = (x[1] - x[0]).cross(&(x[3] - x[2])).normalize();
            let mut d = (x[2] - x[0]).dot(&n);
            if d < 0.0 {
                n = -n;
                d = -d;
            }
            let (xb2, xb3) = (x[2] + n * (d_hat - d), x[3] + n * (d_hat - d));
            let e = Matrix3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]);
            let eb = Matrix3::from_columns(&[x[1] - x[0], xb2 - x[0], xb3 - x[0]]);
            let inv = eb.try_inverse().ok_or("singular ideal shape")?;
            Ok(DMatrix::from_column_slice(3, 3, (e * inv).as_slice()))
        }
        ContactKind::PointEdge => {
            let nt = (x[1] - x[0]).cross(&(x[2] - x[0])).normalize();
            let mut ne = (x[1] - x[2]).cross(&nt).normalize();
            let mut d = (x[0] - x[1]).dot(&ne);
            if d < 0.0 {
                ne = -ne;
                d = -d;
            }
            let h = align_to_y(&nt);
            let k = |v: Vec3| {
                let r = h * v;
                nalgebra::Vector2::new(r.x, r.z)
            };
            let xb0 = k(x[0] + ne * (d_hat - d));
            let (xb1, xb2) = (k(x[1]), k(x[2]));
            let eb = nalgebra::Matrix2::from_columns(&[xb1 - xb0, xb2 - xb0]);
            let inv = eb.try_inverse().ok_or("singular ideal shape")?;
            let e = nalgebra::Matrix3x2::from_columns(&[x[1] - x[0], x[2] - x[0]]);
            Ok(DMatrix::from_column_slice(3, 2, (e * inv).as_slice()))
        }
        ContactKind::PointPoint => {
            let v = x[1] - x[0];
            let d = v.norm();
            let n = v / d;
            let h = align_to_y(&n);
            let xb0 = (h * (x[0] - n * (d_hat - d))).y;
            let xb1 = (h * x[1]).y;
            let eb = xb1 - xb0;
            if eb.abs() < 1e-300 {
                return Err("singular ideal shape".into());
            }
            Ok(DMatrix::from_column_slice(3, 1, (v / eb).as_slice()))
        }
        _ => unreachable!(),
    }
}

/// Product of singular values, `sqrt(det(F^T F))`.
pub fn singular_value_product(f: &DMatrix<f64>) -> f64 {
    if f.nrows() == f.ncols() {
        f.determinant().abs()
    } else {
        (f.transpose() * f).determinant().sqrt()
    }
}

/// The complete mollified Hessian with respect to `vec(J)` at
/// `J = diag(1, sqrt c, f)`, from the generic chain rule on
/// `gamma = |J e2|^2` and `g = |J e3|^2`. Uses the unfiltered barrier.
pub fn mollified_full_hessian(g: f64, c: f64, p: &BarrierParams, eps_x: f64) -> Mat9 {
    let [b_gam, b_g, b_gamgam, b_gg, b_gamg] = mollified_partials(g, c, p, eps_x);
    let j = Matrix3::from_diagonal(&Vector3::new(1.0, c.sqrt(), g.sqrt()));
    let grad_of = |n: &Vec3| {
        let m = 2.0 * j * n * n.transpose();
        Vec9::from_column_slice(m.as_slice())
    };
    // d^2 |J n|^2 / dJ_ij dJ_kl = 2 delta_ik n_j n_l
    let hess_of = |n: &Vec3| {
        let mut h = Mat9::zeros();
        for i in 0..3 {
            for jj in 0..3 {
                for l in 0..3 {
                    h[(i + 3 * jj, i + 3 * l)] = 2.0 * n[jj] * n[l];
                }
            }
        }
        h
    };
    let (ng, nn) = (Vec3::y(), Vec3::z());
    let (gg, gn) = (grad_of(&ng), grad_of(&nn));
    hess_of(&ng) * b_gam
        + gg * gg.transpose() * b_gamgam
        + hess_of(&nn) * b_g
        + gn * gn.transpose() * b_gg
        + (gn * gg.transpose() + gg * gn.transpose()) * b_gamg
}

/// Auxiliary matrix: the coupled `2x2` block on the `(sqrt c, f)` slots.
pub fn auxiliary_matrix(es: &MollifiedEigenSystem) -> Mat9 {
    let mut m = Mat9::zeros();
    m[(SLOT_GAMMA, SLOT_GAMMA)] = es.lambda_gamma[0];
    m[(SLOT_G, SLOT_G)] = es.lambda_g[0];
    m[(SLOT_GAMMA, SLOT_G)] = 4.0 * es.t;
    m[(SLOT_G, SLOT_GAMMA)] = 4.0 * es.t;
    m
}

/// `a b` as an unevaluated sum `hi + lo`.
fn two_prod(a: f64, b: f64) -> [f64; 2] {
    let hi = a * b;
    [hi, a.mul_add(b, -hi)]
}

/// Neumaier summation. The expanded forms below cancel to `O(1 - g)` near
/// `g = 1`, so their terms are summed with compensation.
fn compensated_sum(terms: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &t in terms {
        let u = s + t;
        c += if s.abs() >= t.abs() { (s - u) + t } else { (t - u) + s };
        s = u;
    }
    s + c
}

/// Expanded `lambda1` of the plain log barrier (`kappa = 1`).
pub fn log_lambda1_expanded(g: f64, d_hat: f64) -> f64 {
    let l = g.ln();
    // 6g + 2g ln g - 7g^2 - 6g^2 ln g + 1
    let gg = two_prod(g, g);
    let [a0, a1] = two_prod(6.0, g);
    let [b0, b1] = two_prod(-7.0, gg[0]);
    let [c0, c1] = two_prod(-7.0, gg[1]);
    let n = compensated_sum(&[a0, a1, 2.0 * g * l, b0, b1, c0, c1, -6.0 * gg[0] * l, -6.0 * gg[1] * l, 1.0]);
    2.0 * d_hat.powi(4) * n / g
}

/// Expanded `lambda2,3` of the plain log barrier as printed (denominator `g^2`).
pub fn log_lambda23_expanded_printed(g: f64, d_hat: f64) -> f64 {
    log_lambda23_expanded(g, d_hat) / g
}

/// Expanded `lambda2,3` with the denominator that agrees with `2 db/dg`.
pub fn log_lambda23_expanded(g: f64, d_hat: f64) -> f64 {
    let [p0, p1] = two_prod(2.0 * g, g.ln());
    -2.0 * d_hat.powi(4) * (g - 1.0) * compensated_sum(&[g, p0, p1, -1.0]) / g
}

/// Central-difference gradient of `f` over `verts` of `x`.
pub fn fd_gradient<F: Fn(&[Vec3]) -> f64>(f: F, x: &[Vec3], verts: &[usize], h: f64) -> DVector<f64> {
    let mut y = x.to_vec();
    let mut out = DVector::zeros(3 * verts.len());
    for (k, &v) in verts.iter().enumerate() {
        for c in 0..3 {
            let x0 = y[v][c];
            y[v][c] = x0 + h;
            let up = f(&y);
            y[v][c] = x0 - h;
            let dn = f(&y);
            y[v][c] = x0;
            out[3 * k + c] = (up - dn) / (2.0 * h);
        }
    }
    out
}

/// Numeric eigenpairs of a symmetric `2x2`, ascending, via the dense solver.
pub fn numeric_eigen2(a: f64, b: f64, d: f64) -> ([f64; 2], [nalgebra::Vector2<f64>; 2]) {
    let m = DMatrix::from_row_slice(2, 2, &[a, b, b, d]);
    let e = m.symmetric_eigen();
    let (i0, i1) = if e.eigenvalues[0] <= e.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let col = |i: usize| nalgebra::Vector2::new(e.eigenvectors[(0, i)], e.eigenvectors[(1, i)]);
    ([e.eigenvalues[i0], e.eigenvalues[i1]], [col(i0), col(i1)])
}
