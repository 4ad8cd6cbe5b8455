//! Barrier energy in the gap variable `g = (d / d_hat)^2`, its derivatives,
//! the one-eigenpair PSD Hessian, and the distance-based reference barrier.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gap::{gap_function, DiagonalJacobian};
use crate::linalg::project_psd;
use crate::proximity::{stencil_distance, ContactStencil};
use crate::Vec3;

/// Which energy `b(g)` to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BarrierForm {
    /// `kappa (d_hat^2 - d_hat^2 g)^2 ln^2 g`
    Stiffened,
    /// `-kappa d_hat^4 (1 - g)^2 ln g`
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    pub d_hat: f64,
    pub kappa: f64,
    pub d_thr: f64,
    pub eps_g: f64,
    /// Freeze `lambda1` below `eps_g`.
    pub filter: bool,
    pub form: BarrierForm,
}

impl BarrierParams {
    pub fn new(d_hat: f64, kappa: f64) -> Self {
        Self::with_threshold(d_hat, kappa, 0.1)
    }

    pub fn with_threshold(d_hat: f64, kappa: f64, d_thr_ratio: f64) -> Self {
        assert!(d_hat > 0.0 && kappa > 0.0, "d_hat and kappa must be positive");
        assert!(d_thr_ratio > 0.0 && d_thr_ratio < 1.0, "d_thr must lie in (0, d_hat)");
        BarrierParams {
            d_hat,
            kappa,
            d_thr: d_thr_ratio * d_hat,
            eps_g: d_thr_ratio * d_thr_ratio,
            filter: true,
            form: BarrierForm::Stiffened,
        }
    }

    fn scale(&self) -> f64 {
        self.kappa * self.d_hat.powi(4)
    }
}

/// `(lambda, q)` pairs in vectorized (column-major) `J` space.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEigenSystem {
    pub pairs: Vec<(f64, DVector<f64>)>,
}

/// Gradient and PSD Hessian block of one energy term over `vert_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalQuadratic {
    pub vert_ids: Vec<usize>,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl LocalQuadratic {
    pub fn zeros(vert_ids: Vec<usize>) -> Self {
        let n = 3 * vert_ids.len();
        LocalQuadratic {
            vert_ids,
            grad: DVector::zeros(n),
            hess: DMatrix::zeros(n, n),
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.grad *= s;
        self.hess *= s;
        self
    }
}

pub fn barrier_value(g: f64, p: &BarrierParams) -> f64 {
    let (a, l) = (1.0 - g, g.ln());
    match p.form {
        BarrierForm::Stiffened => p.scale() * a * a * l * l,
        BarrierForm::Log => -p.scale() * a * a * l,
    }
}

pub fn barrier_dg(g: f64, p: &BarrierParams) -> f64 {
    let (a, l) = (1.0 - g, g.ln());
    p.scale()
        * match p.form {
            BarrierForm::Stiffened => -2.0 * a * l * l + 2.0 * a * a * l / g,
            BarrierForm::Log => 2.0 * a * l - a * a / g,
        }
}

pub fn barrier_d2g(g: f64, p: &BarrierParams) -> f64 {
    let (a, l) = (1.0 - g, g.ln());
    p.scale()
        * match p.form {
            BarrierForm::Stiffened => {
                2.0 * l * l - 8.0 * a * l / g + 2.0 * a * a * (1.0 - l) / (g * g)
            }
            BarrierForm::Log => -2.0 * l + 4.0 * a / g + a * a / (g * g),
        }
}

pub fn lambda1(g: f64, p: &BarrierParams) -> f64 {
    4.0 * g * barrier_d2g(g, p) + 2.0 * barrier_dg(g, p)
}

pub fn lambda23(g: f64, p: &BarrierParams) -> f64 {
    2.0 * barrier_dg(g, p)
}

/// `lambda1` frozen at `eps_g` below the proximal limit (when filtering is on).
pub fn filtered_lambda1(g: f64, p: &BarrierParams) -> f64 {
    if p.filter && g < p.eps_g {
        lambda1(p.eps_g, p)
    } else {
        lambda1(g, p)
    }
}

/// Eigensystem of `d^2 b / dJ^2` for a non-parallel stencil of dimension `m`.
///
/// `lambda1` sits at slot `(m, m)`; the `m - 1` slots `(i, m)` carry `lambda23`.
pub fn barrier_eigensystem(g: f64, m: usize, p: &BarrierParams) -> LocalEigenSystem {
    let unit = |i: usize, j: usize| {
        let mut q = DVector::zeros(m * m);
        q[i + m * j] = 1.0;
        q
    };
    let mut pairs = vec![(lambda1(g, p), unit(m - 1, m - 1))];
    for i in 0..m - 1 {
        pairs.push((lambda23(g, p), unit(i, m - 1)));
    }
    LocalEigenSystem { pairs }
}

fn stack(v: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(3 * v.len(), v.iter().flat_map(|g| [g.x, g.y, g.z]))
}

/// Gradient `b_g 2 f grad_f` and Hessian `lambda1_filtered u u^T` with `u = grad_f`.
pub fn build_local_quadratic(
    _stencil: &ContactStencil,
    j: &DiagonalJacobian,
    p: &BarrierParams,
) -> LocalQuadratic {
    let g = gap_function(j).g;
    let u = stack(&j.grad_f);
    let grad = &u * (barrier_dg(g, p) * 2.0 * j.f);
    let hess = (&u * u.transpose()) * filtered_lambda1(g, p);
    LocalQuadratic {
        vert_ids: j.verts.clone(),
        grad,
        hess,
    }
}

/// Classic distance barrier `-kappa (d_hat - d)^2 ln(d / d_hat)` and its first two derivatives in `d`.
pub fn ipc_barrier_d(d: f64, d_hat: f64, kappa: f64) -> (f64, f64, f64) {
    if d >= d_hat {
        return (0.0, 0.0, 0.0);
    }
    let (a, l) = (d - d_hat, (d / d_hat).ln());
    (
        -kappa * a * a * l,
        kappa * (-2.0 * a * l - a * a / d),
        kappa * (-2.0 * l - 4.0 * a / d + a * a / (d * d)),
    )
}

/// Stiffness that makes the reference barrier dimensionally match the
/// `d_hat^4`-scaled gap barrier.
pub fn reference_kappa(p: &BarrierParams) -> f64 {
    p.kappa * p.d_hat * p.d_hat
}

/// `grad d` over the stencil's reduced vertices.
fn grad_distance(stencil: &ContactStencil, x: &[Vec3]) -> (f64, Vec<Vec3>) {
    let pts: Vec<Vec3> = stencil.verts.iter().map(|&i| x[i]).collect();
    let r = stencil_distance(stencil.kind, &pts);
    let d = r.d2.sqrt();
    (d, r.grad_d2.iter().map(|g| g / (2.0 * d)).collect())
}

/// Reference barrier block: exact gradient, Hessian `b'' grad d grad d^T + b' hess d`
/// with `hess d` by central differences of `grad d` at step `h`, then numerically
/// projected. Non-parallel stencils only.
pub fn reference_ipc_local_quadratic(
    stencil: &ContactStencil,
    x: &[Vec3],
    p: &BarrierParams,
    h: f64,
) -> LocalQuadratic {
    let (d, gd) = grad_distance(stencil, x);
    let (_, b1, b2) = ipc_barrier_d(d, p.d_hat, reference_kappa(p));
    let n = 3 * stencil.verts.len();
    let u = stack(&gd);
    let mut hd = DMatrix::zeros(n, n);
    let mut y = x.to_vec();
    for (k, &vi) in stencil.verts.iter().enumerate() {
        for c in 0..3 {
            let x0 = y[vi][c];
            y[vi][c] = x0 + h;
            let up = stack(&grad_distance(stencil, &y).1);
            y[vi][c] = x0 - h;
            let dn = stack(&grad_distance(stencil, &y).1);
            y[vi][c] = x0;
            hd.set_column(3 * k + c, &((up - dn) / (2.0 * h)));
        }
    }
    let hd = 0.5 * (&hd + hd.transpose());
    let full = (&u * u.transpose()) * b2 + hd * b1;
    LocalQuadratic {
        vert_ids: stencil.verts.clone(),
        grad: u * b1,
        hess: project_psd(&full),
    }
}

/// Scalar curvature of the gap Gauss-Newton model and of the classic
/// Gauss-Newton model along the normal, for the distance barrier.
pub fn gn_scalar_comparison(d: f64, p: &BarrierParams) -> (f64, f64) {
    let (_, b1, b2) = ipc_barrier_d(d, p.d_hat, p.kappa);
    (b2 + b1 / (2.0 * d), b2)
}

/// `(|grad|, |hess|, ratio)` with `|grad| = -2 sqrt(g) b_g` and `|hess| = lambda1`.
pub fn norm_diagnostics(g: f64, p: &BarrierParams) -> (f64, f64, f64) {
    let gn = -2.0 * g.sqrt() * barrier_dg(g, p);
    let hn = lambda1(g, p);
    (gn, hn, gn / hn)
}

/// As [`norm_diagnostics`] but with the filtered `lambda1`.
pub fn filtered_norm_ratio(g: f64, p: &BarrierParams) -> f64 {
    -2.0 * g.sqrt() * barrier_dg(g, p) / filtered_lambda1(g, p)
}
