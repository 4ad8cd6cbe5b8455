//! Diagonal constraint Jacobian and gap function.
//!
//! Only the reduced quantities are formed: `f = d / d_hat`, its gradient and,
//! for parallel edge-edge stencils, `sqrt(c)` and its gradient. These are the
//! two position-dependent diagonal entries of `J`.

use thiserror::Error;

use crate::proximity::{edge_cross_measure, stencil_distance, ContactStencil};
use crate::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GapError {
    #[error("barrier inactive: d^2 = {d2:e} >= d_hat^2 = {d_hat2:e}")]
    Inactive { d2: f64, d_hat2: f64 },
    #[error("zero distance on stencil {0:?}")]
    Penetration(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalJacobian {
    /// Simplex dimension: 3 for point-triangle and edge-edge, 2 for point-edge, 1 for point-point.
    pub m: usize,
    pub f: f64,
    pub d_hat: f64,
    /// Global ids of the vertices the gradients below refer to.
    pub verts: Vec<usize>,
    pub grad_f: Vec<Vec3>,
    pub sqrt_c: Option<f64>,
    pub grad_sqrt_c: Option<Vec<Vec3>>,
    pub eps_x: Option<f64>,
    /// Witness coordinates of the reduced stencil.
    pub witness: [f64; 2],
    /// Unit contact normal, pointing from the second primitive toward the first.
    pub normal: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapValue {
    pub g: f64,
    pub gamma: Option<f64>,
}

impl DiagonalJacobian {
    pub fn d(&self) -> f64 {
        self.f * self.d_hat
    }

    pub fn c(&self) -> Option<f64> {
        self.sqrt_c.map(|s| s * s)
    }

    /// The diagonal of `J`: `(1, 1, f)`, `(1, f)`, `(f)` or `(1, sqrt c, f)`.
    pub fn diagonal(&self) -> Vec<f64> {
        match self.sqrt_c {
            Some(s) => vec![1.0, s, self.f],
            None => {
                let mut d = vec![1.0; self.m];
                d[self.m - 1] = self.f;
                d
            }
        }
    }
}

pub fn build_diagonal_jacobian(
    stencil: &ContactStencil,
    x: &[Vec3],
    d_hat: f64,
) -> Result<DiagonalJacobian, GapError> {
    let pts: Vec<Vec3> = stencil.verts.iter().map(|&i| x[i]).collect();
    let dist = stencil_distance(stencil.kind, &pts);
    let d_hat2 = d_hat * d_hat;
    if dist.d2 >= d_hat2 {
        return Err(GapError::Inactive { d2: dist.d2, d_hat2 });
    }
    if !(dist.d2 > 0.0) {
        return Err(GapError::Penetration(stencil.verts.clone()));
    }
    let d = dist.d2.sqrt();
    let verts = stencil.dof_vertices();
    let mut grad_f = vec![Vec3::zeros(); verts.len()];
    for (k, &v) in stencil.verts.iter().enumerate() {
        let slot = verts.iter().position(|&u| u == v).expect("reduced vertex in dof set");
        grad_f[slot] += dist.grad_d2[k] / (2.0 * d * d_hat);
    }
    let first_side = if stencil.kind.base() == crate::ContactKind::EdgeEdge { 2 } else { 1 };
    let normal = dist.grad_d2[..first_side].iter().sum::<Vec3>().normalize();

    let (sqrt_c, grad_sqrt_c) = match stencil.edge_pair {
        Some(e) if stencil.kind.is_parallel() => {
            let (c, gc) = edge_cross_measure(&x[e[0]], &x[e[1]], &x[e[2]], &x[e[3]]);
            let s = c.sqrt();
            // c = 0 exactly: the channel gradient is undefined and set to zero
            let g = if s > 0.0 {
                gc.iter().map(|g| g / (2.0 * s)).collect()
            } else {
                vec![Vec3::zeros(); 4]
            };
            (Some(s), Some(g))
        }
        _ => (None, None),
    };
    Ok(DiagonalJacobian {
        m: stencil.kind.simplex_dim(),
        f: d / d_hat,
        d_hat,
        verts,
        grad_f,
        sqrt_c,
        grad_sqrt_c,
        eps_x: stencil.eps_x,
        witness: dist.witness,
        normal,
    })
}

pub fn gap_function(j: &DiagonalJacobian) -> GapValue {
    GapValue {
        g: j.f * j.f,
        gamma: j.sqrt_c.map(|s| s * s),
    }
}
