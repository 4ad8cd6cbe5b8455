//! Stable neo-Hookean tetrahedra.

use nalgebra::{Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::linalg::project_psd9;
use crate::Vec3;

pub type Vec9 = SVector<f64, 9>;
pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Vec12 = SVector<f64, 12>;
pub type Mat12 = SMatrix<f64, 12, 12>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticMaterial {
    pub youngs_e: f64,
    pub poisson_nu: f64,
    pub lame_mu: f64,
    pub lame_lambda: f64,
}

impl ElasticMaterial {
    pub fn new(youngs_e: f64, poisson_nu: f64) -> Self {
        assert!(youngs_e > 0.0, "Young's modulus must be positive");
        assert!(poisson_nu > 0.0 && poisson_nu < 0.5, "Poisson ratio must lie in (0, 0.5)");
        let mu = youngs_e / (2.0 * (1.0 + poisson_nu));
        let lambda = youngs_e * poisson_nu / ((1.0 + poisson_nu) * (1.0 - 2.0 * poisson_nu));
        ElasticMaterial {
            youngs_e,
            poisson_nu,
            lame_mu: mu,
            lame_lambda: lambda,
        }
    }
}

fn cross_matrix(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `Psi(F) = mu/2 (|F|^2 - 3) - mu (J - 1) + lambda/2 (J - 1)^2`.
pub fn psi(f: &Matrix3<f64>, m: &ElasticMaterial) -> f64 {
    let j = f.determinant();
    0.5 * m.lame_mu * (f.norm_squared() - 3.0) - m.lame_mu * (j - 1.0) + 0.5 * m.lame_lambda * (j - 1.0).powi(2)
}

/// First Piola stress, vectorized column-major.
pub fn pk1(f: &Matrix3<f64>, m: &ElasticMaterial) -> Vec9 {
    let j = f.determinant();
    let gj = cofactor(f);
    let p = f * m.lame_mu + gj * (m.lame_lambda * (j - 1.0) - m.lame_mu);
    Vec9::from_column_slice(p.as_slice())
}

/// `dJ/dF`.
fn cofactor(f: &Matrix3<f64>) -> Matrix3<f64> {
    let (f0, f1, f2) = (f.column(0).into_owned(), f.column(1).into_owned(), f.column(2).into_owned());
    Matrix3::from_columns(&[f1.cross(&f2), f2.cross(&f0), f0.cross(&f1)])
}

/// Unprojected `d^2 Psi / dF^2` (column-major vectorization).
pub fn psi_hessian(f: &Matrix3<f64>, m: &ElasticMaterial) -> Mat9 {
    let j = f.determinant();
    let gj = cofactor(f);
    let g = Vec9::from_column_slice(gj.as_slice());
    let cols: Vec<Vec3> = (0..3).map(|k| f.column(k).into_owned()).collect();
    let mut hj = Mat9::zeros();
    let (x0, x1, x2) = (cross_matrix(&cols[0]), cross_matrix(&cols[1]), cross_matrix(&cols[2]));
    hj.fixed_view_mut::<3, 3>(0, 3).copy_from(&-x2);
    hj.fixed_view_mut::<3, 3>(0, 6).copy_from(&x1);
    hj.fixed_view_mut::<3, 3>(3, 0).copy_from(&x2);
    hj.fixed_view_mut::<3, 3>(3, 6).copy_from(&-x0);
    hj.fixed_view_mut::<3, 3>(6, 0).copy_from(&-x1);
    hj.fixed_view_mut::<3, 3>(6, 3).copy_from(&x0);
    Mat9::identity() * m.lame_mu + g * g.transpose() * m.lame_lambda + hj * (m.lame_lambda * (j - 1.0) - m.lame_mu)
}

/// `d vec(F) / d x` for `F = Ds Dm^-1`, with `x` the four stacked corners.
pub fn deformation_jacobian(rest_inv: &Matrix3<f64>) -> SMatrix<f64, 9, 12> {
    let mut p = SMatrix::<f64, 9, 12>::zeros();
    for jcol in 0..3 {
        let s: f64 = (0..3).map(|k| rest_inv[(k, jcol)]).sum();
        for i in 0..3 {
            let row = i + 3 * jcol;
            p[(row, i)] = -s;
            for a in 1..4 {
                p[(row, 3 * a + i)] = rest_inv[(a - 1, jcol)];
            }
        }
    }
    p
}

pub fn deformation_gradient(rest_inv: &Matrix3<f64>, x: &[Vec3; 4]) -> Matrix3<f64> {
    let ds = Matrix3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]);
    ds * rest_inv
}

/// Energy, gradient and PSD-projected Hessian of one tet, all scaled by its rest volume.
pub fn tet_energy_grad_hess(
    rest_inv: &Matrix3<f64>,
    rest_volume: f64,
    x: &[Vec3; 4],
    m: &ElasticMaterial,
) -> (f64, Vec12, Mat12) {
    let f = deformation_gradient(rest_inv, x);
    let p = deformation_jacobian(rest_inv);
    let h = project_psd9(&psi_hessian(&f, m));
    (
        rest_volume * psi(&f, m),
        p.transpose() * pk1(&f, m) * rest_volume,
        p.transpose() * h * p * rest_volume,
    )
}

pub fn tet_energy(rest_inv: &Matrix3<f64>, rest_volume: f64, x: &[Vec3; 4], m: &ElasticMaterial) -> f64 {
    rest_volume * psi(&deformation_gradient(rest_inv, x), m)
}

/// Gradient only, without the Hessian work.
pub fn tet_gradient(rest_inv: &Matrix3<f64>, rest_volume: f64, x: &[Vec3; 4], m: &ElasticMaterial) -> Vec12 {
    let f = deformation_gradient(rest_inv, x);
    deformation_jacobian(rest_inv).transpose() * pk1(&f, m) * rest_volume
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use nalgebra::{DMatrix, Rotation3, Unit};
    use proptest::prelude::*;

    fn rest() -> ([Vec3; 4], Matrix3<f64>, f64) {
        let x = [
            Vec3::zeros(),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        (x, Matrix3::identity(), 1.0 / 6.0)
    }

    fn mat() -> ElasticMaterial {
        ElasticMaterial::new(1e5, 0.4)
    }

    #[test]
    fn rest_is_stationary() {
        let (x, dm, v) = rest();
        let (e, g, _) = tet_energy_grad_hess(&dm, v, &x, &mat());
        assert!(e.abs() < 1e-10);
        assert!(g.norm() < 1e-9);
    }

    #[test]
    fn scaled_gradient_matches_fd() {
        let (x0, dm, v) = rest();
        let x = x0.map(|p| p * 1.1);
        let m = mat();
        let g = tet_gradient(&dm, v, &x, &m);
        let h = 1e-6;
        for i in 0..4 {
            for k in 0..3 {
                let (mut a, mut b) = (x, x);
                a[i][k] += h;
                b[i][k] -= h;
                let fd = (tet_energy(&dm, v, &a, &m) - tet_energy(&dm, v, &b, &m)) / (2.0 * h);
                assert!((fd - g[3 * i + k]).abs() < 1e-6 * g.norm());
            }
        }
    }

    #[test]
    fn lame_parameters() {
        let m = ElasticMaterial::new(1.0, 0.25);
        assert!((m.lame_mu - 0.4).abs() < 1e-15);
        assert!((m.lame_lambda - 0.4).abs() < 1e-15);
    }

    fn pt3() -> impl Strategy<Value = Vec3> {
        (-0.3..0.3f64, -0.3..0.3f64, -0.3..0.3f64).prop_map(|(a, b, c)| Vec3::new(a, b, c))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn hessian_matches_fd_and_projects(d0 in pt3(), d1 in pt3(), d2 in pt3(), d3 in pt3()) {
            let (x0, dm, v) = rest();
            let x = [x0[0] + d0, x0[1] + d1, x0[2] + d2, x0[3] + d3];
            let m = mat();
            let f = deformation_gradient(&dm, &x);
            let hf = psi_hessian(&f, &m);
            let h = 1e-6;
            for c in 0..9 {
                let mut a = f;
                let mut b = f;
                a[c] += h;
                b[c] -= h;
                let fd = (pk1(&a, &m) - pk1(&b, &m)) / (2.0 * h);
                prop_assert!((fd - hf.column(c)).norm() < 1e-6 * hf.norm());
            }
            let (_, _, hp) = tet_energy_grad_hess(&dm, v, &x, &m);
            let dh = DMatrix::from_column_slice(12, 12, hp.as_slice());
            prop_assert!(min_eigenvalue(&dh) >= -1e-9 * dh.norm());
        }

        #[test]
        fn rotation_invariance(d0 in pt3(), d1 in pt3(), axis in pt3(), angle in -3.0..3.0f64) {
            prop_assume!(axis.norm() > 0.05);
            let (x0, dm, v) = rest();
            let x = [x0[0] + d0, x0[1] + d1, x0[2], x0[3]];
            let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
            let y = x.map(|p| r * p);
            let m = mat();
            let (ea, eb) = (tet_energy(&dm, v, &x, &m), tet_energy(&dm, v, &y, &m));
            prop_assert!((ea - eb).abs() < 1e-9 * (1.0 + ea.abs()));
            let (ga, gb) = (tet_gradient(&dm, v, &x, &m), tet_gradient(&dm, v, &y, &m));
            for i in 0..4 {
                let a = Vec3::new(ga[3 * i], ga[3 * i + 1], ga[3 * i + 2]);
                let b = Vec3::new(gb[3 * i], gb[3 * i + 1], gb[3 * i + 2]);
                prop_assert!((r * a - b).norm() < 1e-7 * (1.0 + ga.norm()));
            }
        }
    }
}
