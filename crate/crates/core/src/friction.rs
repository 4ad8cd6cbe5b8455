//! Lagged smooth friction.
//!
//! The normal force magnitude and the sliding basis are frozen at the start
//! of a time step; the resulting potential is smooth in the tangential
//! displacement `u` and its Hessian reduces to a 2x2 core.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3x2, Vector2};

use crate::barrier::{barrier_dg, ipc_barrier_d, reference_kappa, BarrierParams, LocalQuadratic};
use crate::gap::{build_diagonal_jacobian, gap_function};
use crate::linalg::project_psd2;
use crate::mollifier::mollifier_eval;
use crate::proximity::{ContactKind, ContactStencil};
use crate::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct FrictionDatum {
    pub stencil: ContactStencil,
    /// Barycentric weights producing the relative displacement from the stencil vertices.
    pub weights: Vec<f64>,
    /// Orthonormal tangent-plane basis.
    pub tangent: Matrix3x2<f64>,
    pub lambda_n: f64,
    pub mu: f64,
    pub eps_v: f64,
    pub dt: f64,
}

impl FrictionDatum {
    pub fn verts(&self) -> &[usize] {
        &self.stencil.verts
    }

    /// `T = weights (x) tangent`, of size `3s x 2`.
    pub fn basis_t(&self) -> DMatrix<f64> {
        let s = self.weights.len();
        let mut t = DMatrix::zeros(3 * s, 2);
        for (k, w) in self.weights.iter().enumerate() {
            t.view_mut((3 * k, 0), (3, 2)).copy_from(&(self.tangent * *w));
        }
        t
    }

    /// `u = T^T (x - x_prev)` over the stencil vertices.
    pub fn tangential_displacement(&self, x: &[Vec3], x_prev: &[Vec3]) -> Vector2<f64> {
        let rel = self
            .verts()
            .iter()
            .zip(&self.weights)
            .fold(Vec3::zeros(), |a, (&i, w)| a + (x[i] - x_prev[i]) * *w);
        self.tangent.transpose() * rel
    }

    fn eps(&self) -> f64 {
        self.eps_v * self.dt
    }
}

/// `(f0, f1, f1')` at `u_norm`, with transition width `eps_v * dt`.
pub fn f0_f1(u_norm: f64, eps_v: f64, dt: f64) -> (f64, f64, f64) {
    let e = eps_v * dt;
    if u_norm < e {
        let u = u_norm;
        (
            -u * u * u / (3.0 * e * e) + u * u / e + e / 3.0,
            -u * u / (e * e) + 2.0 * u / e,
            -2.0 * u / (e * e) + 2.0 / e,
        )
    } else {
        (u_norm, 1.0, 0.0)
    }
}

pub fn friction_potential(datum: &FrictionDatum, u: &Vector2<f64>) -> f64 {
    datum.mu * datum.lambda_n * f0_f1(u.norm(), datum.eps_v, datum.dt).0
}

/// `-mu lambda T f1(|u|) u / |u|`, zero at `u = 0`.
pub fn friction_force(datum: &FrictionDatum, u: &Vector2<f64>) -> DVector<f64> {
    let n = u.norm();
    if n == 0.0 {
        return DVector::zeros(3 * datum.weights.len());
    }
    let (_, f1, _) = f0_f1(n, datum.eps_v, datum.dt);
    datum.basis_t() * (u * (-datum.mu * datum.lambda_n * f1 / n))
}

/// The 2x2 core of the friction Hessian before projection.
pub fn friction_core(datum: &FrictionDatum, u: &Vector2<f64>) -> Matrix2<f64> {
    let n = u.norm();
    let (_, f1, f1p) = f0_f1(n, datum.eps_v, datum.dt);
    if n == 0.0 {
        return Matrix2::identity() * (2.0 / datum.eps());
    }
    u * u.transpose() * ((f1p * n - f1) / (n * n * n)) + Matrix2::identity() * (f1 / n)
}

/// Potential gradient and projected Hessian `mu lambda T A+ T^T`.
pub fn friction_hessian_psd(datum: &FrictionDatum, u: &Vector2<f64>) -> LocalQuadratic {
    let t = datum.basis_t();
    let a = project_psd2(&friction_core(datum, u));
    let a = DMatrix::from_column_slice(2, 2, a.as_slice());
    LocalQuadratic {
        vert_ids: datum.verts().to_vec(),
        grad: -friction_force(datum, u),
        hess: &t * a * t.transpose() * (datum.mu * datum.lambda_n),
    }
}

/// Two orthonormal vectors spanning the plane normal to `n`.
pub fn tangent_basis(n: &Vec3) -> Matrix3x2<f64> {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = n.cross(&helper).normalize();
    let t2 = n.cross(&t1);
    Matrix3x2::from_columns(&[t1, t2])
}

/// Relative-displacement weights from witness coordinates.
pub fn witness_weights(kind: ContactKind, w: [f64; 2]) -> Vec<f64> {
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    match kind.base() {
        ContactKind::PointPoint => vec![1.0, -1.0],
        ContactKind::PointEdge => {
            let t = clamp(w[0]);
            vec![1.0, -(1.0 - t), -t]
        }
        ContactKind::PointTriangle => vec![1.0, -(1.0 - w[0] - w[1]), -w[0], -w[1]],
        ContactKind::EdgeEdge => {
            let (a, b) = (clamp(w[0]), clamp(w[1]));
            vec![1.0 - a, a, -(1.0 - b), -b]
        }
        _ => unreachable!(),
    }
}

/// Normal force magnitude `|d b / d d|` of one stencil (mollified when parallel).
pub fn normal_force_magnitude(
    stencil: &ContactStencil,
    x: &[Vec3],
    params: &BarrierParams,
    reference: bool,
) -> Option<f64> {
    let j = build_diagonal_jacobian(stencil, x, params.d_hat).ok()?;
    let e = match (j.c(), j.eps_x) {
        (Some(c), Some(eps)) => mollifier_eval(c, eps).e_k,
        _ => 1.0,
    };
    let db_dd = if reference {
        ipc_barrier_d(j.d(), params.d_hat, reference_kappa(params)).1
    } else {
        barrier_dg(gap_function(&j).g, params) * 2.0 * j.f / params.d_hat
    };
    Some((e * db_dd).abs())
}

/// Freezes normal force and sliding basis for each current contact.
pub fn update_friction_state(
    stencils: &[ContactStencil],
    x: &[Vec3],
    params: &BarrierParams,
    reference: bool,
    mu: f64,
    eps_v: f64,
    dt: f64,
) -> Vec<FrictionDatum> {
    if mu <= 0.0 {
        return Vec::new();
    }
    stencils
        .iter()
        .filter_map(|s| {
            let lambda_n = normal_force_magnitude(s, x, params, reference)?;
            let j = build_diagonal_jacobian(s, x, params.d_hat).ok()?;
            let mut plain = s.clone();
            plain.kind = s.kind.base();
            plain.edge_pair = None;
            plain.eps_x = None;
            Some(FrictionDatum {
                weights: witness_weights(s.kind, j.witness),
                tangent: tangent_basis(&j.normal),
                stencil: plain,
                lambda_n,
                mu,
                eps_v,
                dt,
            })
        })
        .collect()
}
