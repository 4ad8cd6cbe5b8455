//! Mollified barrier for nearly parallel edge-edge contacts.
//!
//! With `J = diag(1, sqrt c, f)` the energy `e(c) b(g)` depends on two
//! diagonal entries. Its `J`-space Hessian has two twist pairs per channel
//! and a coupled 2x2 block on slots `(2,2)` and `(3,3)`; all eigenpairs are
//! closed form. Vectorization is column-major: slot `(i,j)` (1-based) is
//! index `(i-1) + 3(j-1)`.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};

use crate::barrier::{
    barrier_d2g, barrier_dg, barrier_value, filtered_lambda1, ipc_barrier_d, lambda1, reference_kappa,
    BarrierParams, LocalQuadratic,
};
use crate::gap::{gap_function, DiagonalJacobian};
use crate::linalg::project_psd;
use crate::proximity::{edge_cross_measure, stencil_distance, ContactStencil};
use crate::Vec3;

pub type Vec9 = SVector<f64, 9>;
pub type Mat9 = SMatrix<f64, 9, 9>;

/// Index of slot `(2,2)`, the `sqrt c` entry.
pub const SLOT_GAMMA: usize = 4;
/// Index of slot `(3,3)`, the `f` entry.
pub const SLOT_G: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MollifierState {
    pub c: f64,
    pub eps_x: f64,
    pub e_k: f64,
    pub de_dgamma: f64,
    pub d2e_dgamma2: f64,
}

pub fn mollifier_eval(c: f64, eps_x: f64) -> MollifierState {
    let (e_k, de, d2e) = if c < eps_x {
        let s = c / eps_x;
        (
            -s * s + 2.0 * s,
            -2.0 * c / (eps_x * eps_x) + 2.0 / eps_x,
            -2.0 / (eps_x * eps_x),
        )
    } else {
        (1.0, 0.0, 0.0)
    };
    MollifierState {
        c,
        eps_x,
        e_k,
        de_dgamma: de,
        d2e_dgamma2: d2e,
    }
}

pub fn mollified_barrier_value(g: f64, c: f64, p: &BarrierParams, eps_x: f64) -> f64 {
    mollifier_eval(c, eps_x).e_k * barrier_value(g, p)
}

fn stack(v: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(3 * v.len(), v.iter().flat_map(|g| [g.x, g.y, g.z]))
}

fn channels(j: &DiagonalJacobian) -> (f64, f64, f64, Vec<Vec3>) {
    let sc = j.sqrt_c.expect("parallel stencil carries sqrt(c)");
    let gsc = j.grad_sqrt_c.clone().expect("parallel stencil carries grad sqrt(c)");
    let eps = j.eps_x.expect("parallel stencil carries eps_x");
    (sc, eps, gap_function(j).g, gsc)
}

/// `(db/dgamma) 2 sqrt(c) grad sqrt(c) + (db/dg) 2 f grad f` over the four edge vertices.
pub fn mollified_gradient(_stencil: &ContactStencil, j: &DiagonalJacobian, p: &BarrierParams) -> DVector<f64> {
    let (sc, eps, g, gsc) = channels(j);
    let m = mollifier_eval(sc * sc, eps);
    let db_dgamma = m.de_dgamma * barrier_value(g, p);
    let db_dg = m.e_k * barrier_dg(g, p);
    stack(&gsc) * (db_dgamma * 2.0 * sc) + stack(&j.grad_f) * (db_dg * 2.0 * j.f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MollifiedEigenSystem {
    pub lambda_gamma: [f64; 3],
    pub lambda_g: [f64; 3],
    pub t: f64,
    pub p: f64,
    pub lambda7p: f64,
    pub lambda8p: f64,
    /// `k2` of `Q8'`; `None` in the decoupled `t = 0` limit.
    pub k2: Option<f64>,
    pub q_gamma2: Vec9,
    pub q_gamma3: Vec9,
    pub q_g2: Vec9,
    pub q_g3: Vec9,
    pub q7p: Vec9,
    pub q8p: Vec9,
}

fn unit9(i: usize) -> Vec9 {
    let mut q = Vec9::zeros();
    q[i] = 1.0;
    q
}

/// Slot `(i,j)`, 1-based, to column-major index.
pub fn slot(i: usize, j: usize) -> usize {
    (i - 1) + 3 * (j - 1)
}

fn eigensystem(g: f64, c: f64, p: &BarrierParams, eps_x: f64, filtered: bool) -> MollifiedEigenSystem {
    let m = mollifier_eval(c, eps_x);
    let (b, bg) = (barrier_value(g, p), barrier_dg(g, p));
    let bt_gamma = m.de_dgamma * b;
    let bt_gamma2 = m.d2e_dgamma2 * b;
    let bt_g = m.e_k * bg;
    let bt_gammag = m.de_dgamma * bg;

    let lg1 = 2.0 * (bt_gamma + 2.0 * c * bt_gamma2);
    let lgg1 = m.e_k * if filtered { filtered_lambda1(g, p) } else { lambda1(g, p) };
    let t = bt_gammag * c.sqrt() * g.sqrt();
    let delta = lg1 - lgg1;
    let pp = 0.5 * (delta * delta + 64.0 * t * t).sqrt();
    let mean = 0.5 * (lg1 + lgg1);

    let (k2, q8, q7) = if (8.0 * t).abs() <= 1e-12 * (lg1.abs() + lgg1.abs()) || t == 0.0 {
        if lg1 >= lgg1 {
            (None, unit9(SLOT_GAMMA), unit9(SLOT_G))
        } else {
            (None, unit9(SLOT_G), unit9(SLOT_GAMMA))
        }
    } else {
        // (2p + delta)(2p - delta) = 64 t^2; pick the form without cancellation
        let k2 = if delta >= 0.0 {
            (delta + 2.0 * pp) / (8.0 * t)
        } else {
            8.0 * t / (2.0 * pp - delta)
        };
        let mut q8 = Vec9::zeros();
        q8[SLOT_GAMMA] = k2;
        q8[SLOT_G] = 1.0;
        let q8 = q8.normalize();
        // k1 k2 = -1
        let mut q7 = Vec9::zeros();
        q7[SLOT_GAMMA] = -q8[SLOT_G];
        q7[SLOT_G] = q8[SLOT_GAMMA];
        (Some(k2), q8, q7)
    };

    MollifiedEigenSystem {
        lambda_gamma: [lg1, 2.0 * bt_gamma, 2.0 * bt_gamma],
        lambda_g: [lgg1, 2.0 * bt_g, 2.0 * bt_g],
        t,
        p: pp,
        lambda7p: mean - pp,
        lambda8p: mean + pp,
        k2,
        q_gamma2: -unit9(slot(3, 2)),
        q_gamma3: unit9(slot(1, 2)),
        q_g2: unit9(slot(2, 3)),
        q_g3: unit9(slot(1, 3)),
        q7p: q7,
        q8p: q8,
    }
}

/// Closed-form eigensystem of the mollified `J`-space Hessian (unfiltered `lambda1`).
pub fn mollified_eigensystem(g: f64, c: f64, p: &BarrierParams, eps_x: f64) -> MollifiedEigenSystem {
    eigensystem(g, c, p, eps_x, false)
}

/// As [`mollified_eigensystem`], with the `g` channel using the filtered `lambda1`
/// when `p.filter` is set.
pub fn filtered_mollified_eigensystem(g: f64, c: f64, p: &BarrierParams, eps_x: f64) -> MollifiedEigenSystem {
    eigensystem(g, c, p, eps_x, true)
}

impl MollifiedEigenSystem {
    /// Analytic PSD projection in `J` space: every pair with its eigenvalue
    /// clamped at zero. `lambda_g2,3` never contribute and `lambda7'` only
    /// does in the small-`c`, small-`g` corner.
    pub fn projected_matrix(&self) -> Mat9 {
        let mut h = Mat9::zeros();
        for (l, q) in self.retained() {
            h += l * q * q.transpose();
        }
        h
    }

    fn retained(&self) -> [(f64, &Vec9); 4] {
        [
            (self.lambda_gamma[1].max(0.0), &self.q_gamma2),
            (self.lambda_gamma[2].max(0.0), &self.q_gamma3),
            (self.lambda7p.max(0.0), &self.q7p),
            (self.lambda8p.max(0.0), &self.q8p),
        ]
    }
}

/// Maps a `J`-space eigenmatrix to position space through the reduced
/// change of basis: slot `(2,2)` to `grad sqrt c`, slot `(3,3)` to `grad f`,
/// every other slot to zero.
fn map_to_positions(q: &Vec9, gsc: &DVector<f64>, gf: &DVector<f64>) -> DVector<f64> {
    gsc * q[SLOT_GAMMA] + gf * q[SLOT_G]
}

/// Gradient and analytically projected Hessian over the four edge vertices.
pub fn build_mollified_local_quadratic(
    stencil: &ContactStencil,
    j: &DiagonalJacobian,
    p: &BarrierParams,
) -> LocalQuadratic {
    let (sc, eps, g, gsc) = channels(j);
    let es = filtered_mollified_eigensystem(g, sc * sc, p, eps);
    let (gsc, gf) = (stack(&gsc), stack(&j.grad_f));
    let n = gf.len();
    let mut hess = DMatrix::zeros(n, n);
    for (l, q) in es.retained() {
        if l > 0.0 {
            let w = map_to_positions(q, &gsc, &gf);
            hess += (&w * w.transpose()) * l;
        }
    }
    LocalQuadratic {
        vert_ids: j.verts.clone(),
        grad: mollified_gradient(stencil, j, p),
        hess,
    }
}

/// Mollified distance barrier `e(c) b(d)` over the stencil's dof vertices.
pub fn reference_mollified_energy(stencil: &ContactStencil, x: &[Vec3], p: &BarrierParams) -> f64 {
    let (e, d) = mollified_parts(stencil, x);
    mollifier_eval(e.0, stencil.eps_x.unwrap_or(0.0)).e_k * ipc_barrier_d(d.0, p.d_hat, reference_kappa(p)).0
}

type Channel = (f64, Vec<Vec3>);

/// `(c, grad c)` and `(d, grad d)`, both over the dof vertices.
fn mollified_parts(stencil: &ContactStencil, x: &[Vec3]) -> (Channel, Channel) {
    let dof = stencil.dof_vertices();
    let e = stencil.edge_pair.expect("parallel stencil");
    let (c, gc) = edge_cross_measure(&x[e[0]], &x[e[1]], &x[e[2]], &x[e[3]]);
    let pts: Vec<Vec3> = stencil.verts.iter().map(|&i| x[i]).collect();
    let r = stencil_distance(stencil.kind, &pts);
    let d = r.d2.sqrt();
    let mut gd = vec![Vec3::zeros(); dof.len()];
    for (k, &v) in stencil.verts.iter().enumerate() {
        let s = dof.iter().position(|&u| u == v).expect("reduced vertex in dof set");
        gd[s] += r.grad_d2[k] / (2.0 * d);
    }
    ((c, gc.to_vec()), (d, gd))
}

fn reference_mollified_gradient(stencil: &ContactStencil, x: &[Vec3], p: &BarrierParams) -> DVector<f64> {
    let ((c, gc), (d, gd)) = mollified_parts(stencil, x);
    let m = mollifier_eval(c, stencil.eps_x.unwrap_or(0.0));
    let (b, b1, _) = ipc_barrier_d(d, p.d_hat, reference_kappa(p));
    stack(&gc) * (m.de_dgamma * b) + stack(&gd) * (m.e_k * b1)
}

/// Reference-mode mollified block: exact gradient, Hessian by central
/// differences of that gradient at step `h`, then numerically projected.
pub fn reference_mollified_local_quadratic(
    stencil: &ContactStencil,
    x: &[Vec3],
    p: &BarrierParams,
    h: f64,
) -> LocalQuadratic {
    let dof = stencil.dof_vertices();
    let grad = reference_mollified_gradient(stencil, x, p);
    let n = grad.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut y = x.to_vec();
    for (k, &vi) in dof.iter().enumerate() {
        for c in 0..3 {
            let x0 = y[vi][c];
            y[vi][c] = x0 + h;
            let up = reference_mollified_gradient(stencil, &y, p);
            y[vi][c] = x0 - h;
            let dn = reference_mollified_gradient(stencil, &y, p);
            y[vi][c] = x0;
            hess.set_column(3 * k + c, &((up - dn) / (2.0 * h)));
        }
    }
    let hess = 0.5 * (&hess + hess.transpose());
    LocalQuadratic {
        vert_ids: dof,
        grad,
        hess: project_psd(&hess),
    }
}

/// Gradient and second derivatives of the mollified energy with respect to
/// `(gamma, g)`: `(b_gamma, b_g, b_gamma_gamma, b_g_g, b_gamma_g)`.
pub fn mollified_partials(g: f64, c: f64, p: &BarrierParams, eps_x: f64) -> [f64; 5] {
    let m = mollifier_eval(c, eps_x);
    let (b, bg, bgg) = (barrier_value(g, p), barrier_dg(g, p), barrier_d2g(g, p));
    [
        m.de_dgamma * b,
        m.e_k * bg,
        m.d2e_dgamma2 * b,
        m.e_k * bgg,
        m.de_dgamma * bg,
    ]
}
