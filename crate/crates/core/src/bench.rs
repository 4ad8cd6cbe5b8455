//! Timing of the analytic barrier projection against a numeric
//! eigendecomposition of the same Hessian.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Rotation3, SymmetricEigen, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{barrier_d2g, barrier_dg, build_local_quadratic, BarrierParams};
use crate::gap::build_diagonal_jacobian;
use crate::proximity::{ContactKind, ContactStencil};
use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("need at least one sample")]
    EmptyBatch,
    #[error("unsupported stencil dimension {0}, expected 6, 9 or 12")]
    Dimension(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub count: usize,
    pub dim: usize,
    pub analytic_ms: f64,
    pub numeric_ms: f64,
    pub speedup: f64,
    /// Largest Frobenius norm of the difference between the two projected Hessians.
    pub max_frobenius_diff: f64,
}

fn kind_for_dim(dim: usize) -> Result<ContactKind, BenchError> {
    match dim {
        6 => Ok(ContactKind::PointPoint),
        9 => Ok(ContactKind::PointEdge),
        12 => Ok(ContactKind::PointTriangle),
        d => Err(BenchError::Dimension(d)),
    }
}

/// A random stencil of `kind` at distance in `(0.1, 0.95) d_hat`, `d_hat = 1`,
/// with the closest point strictly inside the primitive.
fn random_stencil(kind: ContactKind, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let d = rng.random_range(0.1..0.95);
    let a = rng.random_range(-0.3..0.3);
    let b = rng.random_range(-0.3..0.3);
    let local = match kind {
        ContactKind::PointPoint => vec![Vec3::new(0.0, d, 0.0), Vec3::zeros()],
        ContactKind::PointEdge => {
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            vec![
                Vec3::new(a, d * th.cos(), d * th.sin()),
                Vec3::new(-1.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
            ]
        }
        _ => vec![
            Vec3::new(a, d, b),
            Vec3::new(-1.0, 0.0, -1.0),
            Vec3::new(1.5, 0.0, -0.5),
            Vec3::new(-0.5, 0.0, 1.5),
        ],
    };
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
    let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(-3.0..3.0));
    let t = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
    local.into_iter().map(|p| r * p + t).collect()
}

/// Baseline: the barrier Hessian in `J` space, pulled back to positions, then
/// projected by a full symmetric eigendecomposition.
fn numeric_projection(grad_f: &DVector<f64>, f: f64, m: usize, p: &BarrierParams) -> DMatrix<f64> {
    let g = f * f;
    let (bg, bgg) = (barrier_dg(g, p), barrier_d2g(g, p));
    let n = m * m;
    let col = |i: usize| i + m * (m - 1);
    // g = |J e_m|^2 over a diagonal J, so only column m of J enters
    let mut hj = DMatrix::zeros(n, n);
    for i in 0..m {
        hj[(col(i), col(i))] += 2.0 * bg;
    }
    hj[(col(m - 1), col(m - 1))] += bgg * 4.0 * f * f;
    // d vec(J) / dx: only slot (m, m) varies, with gradient grad_f
    let mut dj = DMatrix::zeros(n, grad_f.len());
    dj.row_mut(col(m - 1)).copy_from(&grad_f.transpose());
    let h = dj.transpose() * hj * dj;
    let eig = SymmetricEigen::new(h);
    let mut out = DMatrix::zeros(grad_f.len(), grad_f.len());
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > 0.0 {
            let q = eig.eigenvectors.column(k);
            out += l * q * q.transpose();
        }
    }
    out
}

pub fn bench_projection(count: usize, dim: usize, seed: u64) -> Result<BenchResult, BenchError> {
    if count == 0 {
        return Err(BenchError::EmptyBatch);
    }
    let kind = kind_for_dim(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = BarrierParams::new(1.0, 1.0);
    let stencil = ContactStencil::new(kind, (0..kind.num_verts()).collect());
    let configs: Vec<Vec<Vec3>> = (0..count).map(|_| random_stencil(kind, &mut rng)).collect();
    let jacobians: Vec<_> = configs
        .iter()
        .map(|x| build_diagonal_jacobian(&stencil, x, p.d_hat).expect("sampled inside d_hat"))
        .collect();

    let t0 = Instant::now();
    let analytic: Vec<DMatrix<f64>> = jacobians
        .iter()
        .map(|j| build_local_quadratic(&stencil, j, &p).hess)
        .collect();
    let analytic_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let numeric: Vec<DMatrix<f64>> = jacobians
        .iter()
        .map(|j| {
            let u = DVector::from_iterator(dim, j.grad_f.iter().flat_map(|g| [g.x, g.y, g.z]));
            numeric_projection(&u, j.f, j.m, &p)
        })
        .collect();
    let numeric_ms = t1.elapsed().as_secs_f64() * 1e3;

    let max_frobenius_diff = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).norm() / a.norm().max(1.0))
        .fold(0.0, f64::max);
    Ok(BenchResult {
        count,
        dim,
        analytic_ms,
        numeric_ms,
        speedup: numeric_ms / analytic_ms.max(1e-9),
        max_frobenius_diff,
    })
}
