//! Projected-Newton time stepping over the incremental potential.
//!
//! Each step minimizes inertia plus `dt^2` times elastic, barrier and lagged
//! friction energy. The linear system is never assembled on the production
//! path; local blocks are gathered/scattered in a fixed order so runs are
//! reproducible.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{
    barrier_value, build_local_quadratic, ipc_barrier_d, reference_ipc_local_quadratic, reference_kappa,
    BarrierParams, LocalQuadratic,
};
use crate::elasticity::{tet_energy, tet_energy_grad_hess};
use crate::friction::{friction_hessian_psd, friction_potential, update_friction_state, FrictionDatum};
use crate::gap::{build_diagonal_jacobian, gap_function, GapError};
use crate::mollifier::{
    build_mollified_local_quadratic, mollified_barrier_value, reference_mollified_energy,
    reference_mollified_local_quadratic,
};
use crate::proximity::{
    ccd_candidates, find_contact_pairs_with, global_ccd_filter, min_primitive_distance, ContactStencil,
    ProximityError, ACCD_DEFAULT_SLACK,
};
use crate::scene::Scene;
use crate::Vec3;

/// Smallest line-search step before the iteration is rejected.
pub const ALPHA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    /// Gap-based barrier with analytic eigensystems.
    Gipc,
    /// Distance barrier with numerically projected Hessians.
    ReferenceIpc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearSolver {
    Pcg,
    /// Dense Cholesky; small systems only.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub dt: f64,
    /// Newton stops when `|d|_inf / (l dt) <= eps_d`.
    pub eps_d: f64,
    pub pcg_rel_tol: f64,
    pub pcg_max_iters: usize,
    pub newton_max_iters: usize,
    pub barrier: BarrierParams,
    pub friction_mu: f64,
    /// Absolute velocity bound.
    pub friction_eps_v: f64,
    pub mode: SolverMode,
    pub linear_solver: LinearSolver,
    /// Promote nearly parallel edge-edge pairs to mollified stencils.
    pub mollify: bool,
    pub ccd_slack: f64,
    /// Check exact minimum distance at every line-search candidate (slow).
    pub check_candidates: bool,
}

impl SolverConfig {
    /// Defaults relative to the scene: `d_hat = 1e-3 l`, `eps_d = 1e-2`, and
    /// the stiffness from [`suggested_kappa`] with `kappa_rel = 1`.
    pub fn for_scene(scene: &Scene, dt: f64) -> Self {
        let d_hat = 1e-3 * scene.bbox_diagonal;
        SolverConfig {
            dt,
            eps_d: 1e-2,
            pcg_rel_tol: 1e-4,
            pcg_max_iters: 10_000,
            newton_max_iters: 200,
            barrier: BarrierParams::new(d_hat, suggested_kappa(scene, d_hat, 1.0)),
            friction_mu: 0.0,
            friction_eps_v: 1e-3 * scene.bbox_diagonal,
            mode: SolverMode::Gipc,
            linear_solver: LinearSolver::Pcg,
            mollify: true,
            ccd_slack: ACCD_DEFAULT_SLACK,
            check_candidates: false,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let ok = self.dt > 0.0
            && self.eps_d > 0.0
            && self.pcg_rel_tol > 0.0
            && self.pcg_max_iters > 0
            && self.newton_max_iters > 0
            && self.friction_mu >= 0.0
            && self.friction_eps_v > 0.0
            && self.ccd_slack > 0.0
            && self.ccd_slack < 1.0;
        if ok {
            Ok(())
        } else {
            Err(SolverError::Config(format!("{self:?}")))
        }
    }
}

/// `kappa = kappa_rel * m * max(|g|, 1) / d_hat^3` with `m` the mean free
/// vertex mass: the barrier force at moderate gaps is of the order of one
/// vertex weight.
pub fn suggested_kappa(scene: &Scene, d_hat: f64, kappa_rel: f64) -> f64 {
    let m = scene.mean_free_mass().max(f64::MIN_POSITIVE);
    kappa_rel * m * scene.gravity.norm().max(1.0) / d_hat.powi(3)
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Gap(#[from] GapError),
    #[error(transparent)]
    Proximity(#[from] ProximityError),
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("prescribed motion of fixed vertices would cause contact (CCD bound {0:e})")]
    PrescribedMotion(f64),
    #[error("state has {got} vertices, scene has {want}")]
    Dimension { got: usize, want: usize },
}

/// Per-step solver record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub newton_iters: usize,
    pub pcg_iters_total: usize,
    /// Minimum contact distance over `l` at the end of the step (`inf` when none is near).
    pub min_distance_rel: f64,
    pub energy: f64,
    pub alpha_min: f64,
    pub wall_ms: f64,
    pub converged: bool,
    /// The line search hit [`ALPHA_FLOOR`].
    pub line_search_failed: bool,
    pub num_contacts: usize,
    /// Smallest exact distance seen at any candidate (only with `check_candidates`).
    pub min_candidate_distance: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SimState {
    pub x: Vec<Vec3>,
    /// Velocities; for fixed vertices this is the prescribed velocity.
    pub v: Vec<Vec3>,
    pub time: f64,
    pub step: usize,
    pub friction: Vec<FrictionDatum>,
}

impl SimState {
    pub fn new(scene: &Scene, config: &SolverConfig) -> Result<Self, SolverError> {
        Self::with_velocities(scene, config, vec![Vec3::zeros(); scene.num_vertices()])
    }

    pub fn with_velocities(scene: &Scene, config: &SolverConfig, v: Vec<Vec3>) -> Result<Self, SolverError> {
        let x = scene.initial_positions();
        if v.len() != x.len() {
            return Err(SolverError::Dimension {
                got: v.len(),
                want: x.len(),
            });
        }
        let contacts = detect(scene, &x, config);
        let friction = refresh_friction(&contacts, &x, config);
        Ok(SimState {
            x,
            v,
            time: 0.0,
            step: 0,
            friction,
        })
    }
}

fn detect(scene: &Scene, x: &[Vec3], config: &SolverConfig) -> Vec<ContactStencil> {
    find_contact_pairs_with(scene, x, config.barrier.d_hat, config.mollify)
}

fn refresh_friction(contacts: &[ContactStencil], x: &[Vec3], config: &SolverConfig) -> Vec<FrictionDatum> {
    update_friction_state(
        contacts,
        x,
        &config.barrier,
        config.mode == SolverMode::ReferenceIpc,
        config.friction_mu,
        config.friction_eps_v,
        config.dt,
    )
}

/// The per-step objective.
pub struct IncrementalPotential<'a> {
    pub scene: &'a Scene,
    pub config: &'a SolverConfig,
    pub x_start: &'a [Vec3],
    pub x_tilde: Vec<Vec3>,
    pub friction: &'a [FrictionDatum],
}

impl<'a> IncrementalPotential<'a> {
    pub fn new(scene: &'a Scene, config: &'a SolverConfig, state: &'a SimState) -> Self {
        let dt = config.dt;
        let x_tilde = state
            .x
            .iter()
            .zip(&state.v)
            .zip(&scene.topo.is_fixed)
            .map(|((x, v), &fixed)| {
                if fixed {
                    x + v * dt
                } else {
                    x + v * dt + scene.gravity * (dt * dt)
                }
            })
            .collect();
        IncrementalPotential {
            scene,
            config,
            x_start: &state.x,
            x_tilde,
            friction: &state.friction,
        }
    }

    fn inertia(&self, x: &[Vec3]) -> f64 {
        let topo = &self.scene.topo;
        (0..x.len())
            .filter(|&i| !topo.is_fixed[i])
            .map(|i| 0.5 * topo.mass[i] * (x[i] - self.x_tilde[i]).norm_squared())
            .sum()
    }

    fn elastic(&self, x: &[Vec3]) -> f64 {
        let topo = &self.scene.topo;
        let per: Vec<f64> = (0..topo.tets.len())
            .into_par_iter()
            .map(|t| match self.scene.material_of_tet(t) {
                Some(m) => {
                    let c = topo.tets[t].map(|i| x[i]);
                    tet_energy(&topo.tet_rest_inv[t], topo.tet_volume[t], &c, m)
                }
                None => 0.0,
            })
            .collect();
        per.iter().sum()
    }

    fn friction_energy(&self, x: &[Vec3]) -> f64 {
        self.friction
            .iter()
            .map(|f| friction_potential(f, &f.tangential_displacement(x, self.x_start)))
            .sum()
    }

    /// Total energy with contacts detected at `x`.
    pub fn energy(&self, x: &[Vec3]) -> Result<f64, SolverError> {
        let contacts = detect(self.scene, x, self.config);
        self.energy_with(x, &contacts)
    }

    pub fn energy_with(&self, x: &[Vec3], contacts: &[ContactStencil]) -> Result<f64, SolverError> {
        let b = barrier_energy(contacts, x, self.config)?;
        let dt2 = self.config.dt * self.config.dt;
        Ok(self.inertia(x) + dt2 * (self.elastic(x) + b + self.friction_energy(x)))
    }

    /// Gradient and the PSD system at `x` for a frozen contact set.
    pub fn system(&self, x: &[Vec3], contacts: &[ContactStencil]) -> Result<(DVector<f64>, SystemBlocks), SolverError> {
        let topo = &self.scene.topo;
        let n = x.len();
        let blocks = assemble_local_quadratics(self.scene, self.config, x, self.x_start, contacts, self.friction)?;
        let mut grad = DVector::zeros(3 * n);
        for i in 0..n {
            if !topo.is_fixed[i] {
                let r = (x[i] - self.x_tilde[i]) * topo.mass[i];
                grad.fixed_rows_mut::<3>(3 * i).copy_from(&r);
            }
        }
        for b in &blocks {
            for (k, &v) in b.vert_ids.iter().enumerate() {
                let mut seg = grad.fixed_rows_mut::<3>(3 * v);
                seg += b.grad.fixed_rows::<3>(3 * k);
            }
        }
        for i in 0..n {
            if topo.is_fixed[i] {
                grad.fixed_rows_mut::<3>(3 * i).fill(0.0);
            }
        }
        let sys = SystemBlocks {
            mass: topo.mass.clone(),
            fixed: topo.is_fixed.clone(),
            blocks,
        };
        Ok((grad, sys))
    }
}

/// Barrier sum over `contacts`; pairs at or beyond `d_hat` contribute nothing.
pub fn barrier_energy(contacts: &[ContactStencil], x: &[Vec3], config: &SolverConfig) -> Result<f64, SolverError> {
    let p = &config.barrier;
    let per: Result<Vec<f64>, SolverError> = contacts
        .par_iter()
        .map(|s| {
            let j = match build_diagonal_jacobian(s, x, p.d_hat) {
                Ok(j) => j,
                Err(GapError::Inactive { .. }) => return Ok(0.0),
                Err(e) => return Err(e.into()),
            };
            let g = gap_function(&j);
            Ok(match (config.mode, g.gamma) {
                (SolverMode::Gipc, None) => barrier_value(g.g, p),
                (SolverMode::Gipc, Some(c)) => mollified_barrier_value(g.g, c, p, j.eps_x.unwrap_or(0.0)),
                (SolverMode::ReferenceIpc, None) => ipc_barrier_d(j.d(), p.d_hat, reference_kappa(p)).0,
                (SolverMode::ReferenceIpc, Some(_)) => reference_mollified_energy(s, x, p),
            })
        })
        .collect();
    Ok(per?.iter().sum())
}

/// Elastic, barrier and friction blocks, each scaled by `dt^2`. Mass is kept separately.
pub fn assemble_local_quadratics(
    scene: &Scene,
    config: &SolverConfig,
    x: &[Vec3],
    x_start: &[Vec3],
    contacts: &[ContactStencil],
    friction: &[FrictionDatum],
) -> Result<Vec<LocalQuadratic>, SolverError> {
    let topo = &scene.topo;
    let dt2 = config.dt * config.dt;
    let mut out: Vec<LocalQuadratic> = (0..topo.tets.len())
        .into_par_iter()
        .filter_map(|t| {
            let m = scene.material_of_tet(t)?;
            let ids = topo.tets[t];
            let c = ids.map(|i| x[i]);
            let (_, g, h) = tet_energy_grad_hess(&topo.tet_rest_inv[t], topo.tet_volume[t], &c, m);
            Some(LocalQuadratic {
                vert_ids: ids.to_vec(),
                grad: DVector::from_column_slice(g.as_slice()) * dt2,
                hess: DMatrix::from_column_slice(12, 12, h.as_slice()) * dt2,
            })
        })
        .collect();
    let p = &config.barrier;
    let fd_h = 1e-6 * scene.bbox_diagonal;
    let contact_blocks: Result<Vec<Option<LocalQuadratic>>, SolverError> = contacts
        .par_iter()
        .map(|s| {
            let j = match build_diagonal_jacobian(s, x, p.d_hat) {
                Ok(j) => j,
                Err(GapError::Inactive { .. }) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            let parallel = j.sqrt_c.is_some();
            let q = match (config.mode, parallel) {
                (SolverMode::Gipc, false) => build_local_quadratic(s, &j, p),
                (SolverMode::Gipc, true) => build_mollified_local_quadratic(s, &j, p),
                (SolverMode::ReferenceIpc, false) => reference_ipc_local_quadratic(s, x, p, fd_h),
                (SolverMode::ReferenceIpc, true) => reference_mollified_local_quadratic(s, x, p, fd_h),
            };
            Ok(Some(q.scaled(dt2)))
        })
        .collect();
    out.extend(contact_blocks?.into_iter().flatten());
    out.extend(
        friction
            .iter()
            .map(|f| friction_hessian_psd(f, &f.tangential_displacement(x, x_start)).scaled(dt2)),
    );
    Ok(out)
}

/// The global operator `M + sum_blocks`, kept as local blocks.
#[derive(Clone, Debug)]
pub struct SystemBlocks {
    pub mass: Vec<f64>,
    pub fixed: Vec<bool>,
    pub blocks: Vec<LocalQuadratic>,
}

impl SystemBlocks {
    pub fn dim(&self) -> usize {
        3 * self.mass.len()
    }

    fn mask(&self, v: &mut DVector<f64>) {
        for (i, &f) in self.fixed.iter().enumerate() {
            if f {
                v.fixed_rows_mut::<3>(3 * i).fill(0.0);
            }
        }
    }
}

/// `y = A v` without assembling `A`. Fixed rows and columns act as identity.
pub fn matvec_matrix_free(sys: &SystemBlocks, v: &DVector<f64>) -> DVector<f64> {
    assert_eq!(v.len(), sys.dim(), "vector length must match the system");
    let mut vm = v.clone();
    sys.mask(&mut vm);
    let products: Vec<DVector<f64>> = sys
        .blocks
        .par_iter()
        .map(|b| {
            let local = DVector::from_iterator(
                3 * b.vert_ids.len(),
                b.vert_ids.iter().flat_map(|&i| [vm[3 * i], vm[3 * i + 1], vm[3 * i + 2]]),
            );
            &b.hess * local
        })
        .collect();
    let mut y = DVector::zeros(v.len());
    for (i, &m) in sys.mass.iter().enumerate() {
        for c in 0..3 {
            y[3 * i + c] = m * vm[3 * i + c];
        }
    }
    // serial scatter in block order: deterministic
    for (b, p) in sys.blocks.iter().zip(&products) {
        for (k, &i) in b.vert_ids.iter().enumerate() {
            for c in 0..3 {
                y[3 * i + c] += p[3 * k + c];
            }
        }
    }
    for (i, &f) in sys.fixed.iter().enumerate() {
        if f {
            for c in 0..3 {
                y[3 * i + c] = v[3 * i + c];
            }
        }
    }
    y
}

/// Dense assembly of the same operator (test oracle and small direct solves).
pub fn assemble_dense(sys: &SystemBlocks) -> DMatrix<f64> {
    let n = sys.dim();
    let mut a = DMatrix::zeros(n, n);
    for (i, &m) in sys.mass.iter().enumerate() {
        for c in 0..3 {
            a[(3 * i + c, 3 * i + c)] = m;
        }
    }
    for b in &sys.blocks {
        for (k, &i) in b.vert_ids.iter().enumerate() {
            for (l, &j) in b.vert_ids.iter().enumerate() {
                for r in 0..3 {
                    for c in 0..3 {
                        a[(3 * i + r, 3 * j + c)] += b.hess[(3 * k + r, 3 * l + c)];
                    }
                }
            }
        }
    }
    for (i, &f) in sys.fixed.iter().enumerate() {
        if f {
            for c in 0..3 {
                let k = 3 * i + c;
                a.row_mut(k).fill(0.0);
                a.column_mut(k).fill(0.0);
                a[(k, k)] = 1.0;
            }
        }
    }
    a
}

/// Inverted per-vertex `3x3` diagonal blocks.
pub fn block_jacobi(sys: &SystemBlocks) -> Vec<Matrix3<f64>> {
    let mut d: Vec<Matrix3<f64>> = sys.mass.iter().map(|&m| Matrix3::identity() * m).collect();
    for b in &sys.blocks {
        for (k, &i) in b.vert_ids.iter().enumerate() {
            d[i] += b.hess.fixed_view::<3, 3>(3 * k, 3 * k);
        }
    }
    d.iter()
        .zip(&sys.fixed)
        .map(|(m, &f)| {
            if f {
                Matrix3::identity()
            } else {
                m.try_inverse().unwrap_or_else(|| {
                    Matrix3::from_diagonal(&m.diagonal().map(|x| if x > 0.0 { 1.0 / x } else { 1.0 }))
                })
            }
        })
        .collect()
}

fn apply_precond(p: &[Matrix3<f64>], r: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(r.len());
    for (i, m) in p.iter().enumerate() {
        let s = m * r.fixed_rows::<3>(3 * i);
        z.fixed_rows_mut::<3>(3 * i).copy_from(&s);
    }
    z
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcgResult {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Modified PCG with a block-Jacobi preconditioner and the fixed-vertex
/// filter. Stops once `delta_new < rel_tol * delta_0`.
pub fn pcg_solve(sys: &SystemBlocks, rhs: &DVector<f64>, rel_tol: f64, max_iters: usize) -> PcgResult {
    let n = rhs.len();
    let pre = block_jacobi(sys);
    let filter = |v: &mut DVector<f64>| sys.mask(v);
    let mut x = DVector::zeros(n);
    let mut r = rhs.clone();
    filter(&mut r);
    let mut c = apply_precond(&pre, &r);
    filter(&mut c);
    let mut delta_new = r.dot(&c);
    let delta0 = delta_new;
    if delta0 == 0.0 {
        return PcgResult {
            x,
            iterations: 0,
            converged: true,
        };
    }
    let mut it = 0;
    while delta_new >= rel_tol * delta0 {
        if it == max_iters {
            return PcgResult {
                x,
                iterations: it,
                converged: false,
            };
        }
        let mut q = matvec_matrix_free(sys, &c);
        filter(&mut q);
        let cq = c.dot(&q);
        if !(cq > 0.0) {
            warn!("pcg: non-positive curvature {cq:e} at iteration {it}");
            break;
        }
        let alpha = delta_new / cq;
        x.axpy(alpha, &c, 1.0);
        r.axpy(-alpha, &q, 1.0);
        let s = apply_precond(&pre, &r);
        let delta_old = delta_new;
        delta_new = r.dot(&s);
        c = s + c * (delta_new / delta_old);
        filter(&mut c);
        it += 1;
    }
    PcgResult {
        x,
        iterations: it,
        converged: true,
    }
}

/// Direct solve of the assembled system.
pub fn dense_solve(sys: &SystemBlocks, rhs: &DVector<f64>) -> DVector<f64> {
    let a = assemble_dense(sys);
    let mut b = rhs.clone();
    sys.mask(&mut b);
    match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => a.lu().solve(&b).expect("assembled system is singular"),
    }
}

fn to_vec3(v: &DVector<f64>) -> Vec<Vec3> {
    (0..v.len() / 3).map(|i| Vec3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])).collect()
}

/// Outcome of one projected-Newton iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct NewtonStep {
    pub x: Vec<Vec3>,
    pub energy: f64,
    /// `|d|_inf` of the solved direction.
    pub d_inf: f64,
    pub direction: Vec<Vec3>,
    pub alpha: f64,
    pub pcg_iters: usize,
    pub line_search_failed: bool,
    /// Direction already within tolerance; `x` is unchanged.
    pub converged: bool,
    pub num_contacts: usize,
    pub min_candidate_distance: Option<f64>,
}

/// One iteration from `x` with energy `e_prev`: solve, CCD bound, backtrack.
/// When `|d|_inf / (l dt)` is already within tolerance the position is returned unchanged.
pub fn newton_step(ip: &IncrementalPotential, x: &[Vec3], e_prev: f64) -> Result<NewtonStep, SolverError> {
    let config = ip.config;
    let scene = ip.scene;
    let contacts = detect(scene, x, config);
    let (grad, sys) = ip.system(x, &contacts)?;
    let rhs = -grad;
    let (d, pcg_iters) = match config.linear_solver {
        LinearSolver::Pcg => {
            let r = pcg_solve(&sys, &rhs, config.pcg_rel_tol, config.pcg_max_iters);
            if !r.converged {
                warn!("pcg hit the iteration cap ({})", r.iterations);
            }
            (r.x, r.iterations)
        }
        LinearSolver::Dense => (dense_solve(&sys, &rhs), 0),
    };
    let direction = to_vec3(&d);
    let d_inf = d.amax();
    let mut out = NewtonStep {
        x: x.to_vec(),
        energy: e_prev,
        d_inf,
        direction: direction.clone(),
        alpha: 0.0,
        pcg_iters,
        line_search_failed: false,
        converged: false,
        num_contacts: contacts.len(),
        min_candidate_distance: None,
    };
    if d_inf / (scene.bbox_diagonal * config.dt) <= config.eps_d {
        out.converged = true;
        return Ok(out);
    }
    let cand = ccd_candidates(scene, x, &direction);
    let mut alpha = global_ccd_filter(x, &direction, &cand, config.ccd_slack)?.min(1.0);
    let mut min_seen = f64::INFINITY;
    loop {
        let xc: Vec<Vec3> = x.iter().zip(&direction).map(|(a, b)| a + b * alpha).collect();
        if config.check_candidates {
            min_seen = min_seen.min(min_primitive_distance(scene, &xc));
        }
        let e = ip.energy(&xc)?;
        if e.is_finite() && e <= e_prev {
            out.x = xc;
            out.energy = e;
            out.alpha = alpha;
            break;
        }
        alpha *= 0.5;
        if alpha < ALPHA_FLOOR {
            out.line_search_failed = true;
            out.alpha = alpha;
            break;
        }
    }
    if config.check_candidates {
        out.min_candidate_distance = Some(min_seen);
    }
    Ok(out)
}

/// Runs projected Newton to convergence (or the cap) and advances `state`.
pub fn advance_time_step(scene: &Scene, config: &SolverConfig, state: &mut SimState) -> Result<StepDiagnostics, SolverError> {
    let t0 = Instant::now();
    if state.x.len() != scene.num_vertices() {
        return Err(SolverError::Dimension {
            got: state.x.len(),
            want: scene.num_vertices(),
        });
    }
    let ip = IncrementalPotential::new(scene, config, state);
    let topo = &scene.topo;

    // kinematic vertices jump to their targets first
    let kin: Vec<Vec3> = (0..state.x.len())
        .map(|i| if topo.is_fixed[i] { ip.x_tilde[i] - state.x[i] } else { Vec3::zeros() })
        .collect();
    let mut x = state.x.clone();
    if kin.iter().any(|v| v.norm_squared() > 0.0) {
        let cand = ccd_candidates(scene, &x, &kin);
        let bound = global_ccd_filter(&x, &kin, &cand, config.ccd_slack)?;
        if bound < 1.0 {
            return Err(SolverError::PrescribedMotion(bound));
        }
        for (xi, k) in x.iter_mut().zip(&kin) {
            *xi += k;
        }
    }

    let mut e_prev = ip.energy(&x)?;
    let mut diag = StepDiagnostics {
        step: state.step + 1,
        newton_iters: 0,
        pcg_iters_total: 0,
        min_distance_rel: f64::INFINITY,
        energy: e_prev,
        alpha_min: 1.0,
        wall_ms: 0.0,
        converged: false,
        line_search_failed: false,
        num_contacts: 0,
        min_candidate_distance: None,
    };
    for _ in 0..config.newton_max_iters {
        let s = newton_step(&ip, &x, e_prev)?;
        diag.pcg_iters_total += s.pcg_iters;
        diag.num_contacts = s.num_contacts;
        if let Some(m) = s.min_candidate_distance {
            diag.min_candidate_distance = Some(diag.min_candidate_distance.map_or(m, |o: f64| o.min(m)));
        }
        if s.converged {
            diag.converged = true;
            break;
        }
        diag.newton_iters += 1;
        diag.alpha_min = diag.alpha_min.min(s.alpha);
        if s.line_search_failed {
            diag.line_search_failed = true;
            warn!("step {}: line search collapsed", diag.step);
            break;
        }
        x = s.x;
        e_prev = s.energy;
        debug!("step {} iter {}: |d| {:e} alpha {:e} E {:e}", diag.step, diag.newton_iters, s.d_inf, s.alpha, e_prev);
    }
    if !diag.converged && !diag.line_search_failed {
        warn!("step {}: Newton iteration cap reached", diag.step);
    }
    drop(ip);

    let dt = config.dt;
    for i in 0..x.len() {
        state.v[i] = (x[i] - state.x[i]) / dt;
    }
    let contacts = detect(scene, &x, config);
    state.friction = refresh_friction(&contacts, &x, config);
    diag.min_distance_rel = min_contact_distance(scene, &x, 10.0 * config.barrier.d_hat) / scene.bbox_diagonal;
    diag.energy = e_prev;
    state.x = x;
    state.time += dt;
    state.step += 1;
    diag.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(diag)
}

/// Smallest stencil distance among pairs closer than `radius`; `inf` if none.
pub fn min_contact_distance(scene: &Scene, x: &[Vec3], radius: f64) -> f64 {
    find_contact_pairs_with(scene, x, radius, false)
        .iter()
        .map(|s| {
            let pts: Vec<Vec3> = s.verts.iter().map(|&i| x[i]).collect();
            crate::proximity::stencil_distance(s.kind, &pts).d2.sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elasticity::ElasticMaterial;
    use crate::linalg::min_eigenvalue;
    use crate::scene::shapes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn falling_cube() -> Scene {
        let mut b = shapes::cube_five_tets(0.1);
        b.set_density(1000.0).unwrap();
        Scene::new(vec![b], vec![Some(ElasticMaterial::new(1e5, 0.3))], Vec3::new(0.0, -9.8, 0.0)).unwrap()
    }

    fn random_sys(rng: &mut ChaCha8Rng, nv: usize, nb: usize) -> SystemBlocks {
        let blocks = (0..nb)
            .map(|_| {
                let k = rng.random_range(1..=4);
                let mut ids: Vec<usize> = (0..nv).collect();
                for i in 0..k {
                    let j = rng.random_range(i..nv);
                    ids.swap(i, j);
                }
                ids.truncate(k);
                let a = DMatrix::from_fn(3 * k, 3 * k, |_, _| rng.random_range(-1.0..1.0));
                LocalQuadratic {
                    vert_ids: ids,
                    grad: DVector::zeros(3 * k),
                    hess: &a * a.transpose(),
                }
            })
            .collect();
        SystemBlocks {
            mass: (0..nv).map(|_| rng.random_range(0.5..2.0)).collect(),
            fixed: (0..nv).map(|i| i % 7 == 3).collect(),
            blocks,
        }
    }

    #[test]
    fn matvec_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let sys = random_sys(&mut rng, 30, 40);
            let v = DVector::from_fn(sys.dim(), |_, _| rng.random_range(-1.0..1.0));
            let a = matvec_matrix_free(&sys, &v);
            let b = assemble_dense(&sys) * &v;
            assert!((&a - &b).norm() <= 1e-12 * b.norm());
        }
    }

    #[test]
    fn zero_rhs_zero_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = random_sys(&mut rng, 5, 3);
        let r = pcg_solve(&sys, &DVector::zeros(sys.dim()), 1e-4, 100);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.x.norm(), 0.0);
        assert!(matvec_matrix_free(&sys, &DVector::zeros(sys.dim())).norm() == 0.0);
    }

    #[test]
    fn diagonal_system_one_iteration() {
        let sys = SystemBlocks {
            mass: vec![1.0, 2.0, 3.0],
            fixed: vec![false; 3],
            blocks: vec![],
        };
        let rhs = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let r = pcg_solve(&sys, &rhs, 1e-12, 100);
        assert_eq!(r.iterations, 1);
        assert!((r.x[8] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn pcg_agrees_with_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sys = random_sys(&mut rng, 40, 60);
        let rhs = DVector::from_fn(sys.dim(), |_, _| rng.random_range(-1.0..1.0));
        let d = dense_solve(&sys, &rhs);
        let p = pcg_solve(&sys, &rhs, 1e-20, 10_000);
        assert!(p.converged);
        assert!((p.x - &d).norm() < 1e-8 * d.norm());
    }

    #[test]
    fn free_fall_matches_ballistic() {
        let scene = falling_cube();
        let mut cfg = SolverConfig::for_scene(&scene, 0.01);
        cfg.eps_d = 1e-9;
        cfg.pcg_rel_tol = 1e-20;
        let v0 = Vec3::new(0.3, 0.1, -0.2);
        let mut st = SimState::with_velocities(&scene, &cfg, vec![v0; scene.num_vertices()]).unwrap();
        let x0 = st.x.clone();
        let d = advance_time_step(&scene, &cfg, &mut st).unwrap();
        assert!(d.converged);
        assert!(d.newton_iters <= 2);
        for (a, b) in st.x.iter().zip(&x0) {
            let want = b + v0 * 0.01 + scene.gravity * 1e-4;
            assert!((a - want).norm() < 1e-10);
        }
    }

    #[test]
    fn assembled_system_symmetric_and_pd() {
        let mut top = shapes::cube_five_tets(0.1);
        top.translate(&Vec3::new(0.02, 0.1 + 5e-5, 0.03));
        top.set_density(1000.0).unwrap();
        let mut bottom = shapes::cube_five_tets(0.1);
        bottom.set_density(1000.0).unwrap();
        let mat = Some(ElasticMaterial::new(1e5, 0.3));
        let scene = Scene::new(vec![bottom, top], vec![mat, mat], Vec3::new(0.0, -9.8, 0.0)).unwrap();
        let cfg = SolverConfig::for_scene(&scene, 0.01);
        let st = SimState::new(&scene, &cfg).unwrap();
        let ip = IncrementalPotential::new(&scene, &cfg, &st);
        let contacts = detect(&scene, &st.x, &cfg);
        assert!(!contacts.is_empty());
        let (_, sys) = ip.system(&st.x, &contacts).unwrap();
        let a = assemble_dense(&sys);
        assert!((&a - a.transpose()).amax() <= 1e-12 * a.amax());
        assert!(min_eigenvalue(&a) > 0.0);
    }

    #[test]
    fn gradient_matches_fd_of_energy() {
        let mut top = shapes::cube_five_tets(0.1);
        top.translate(&Vec3::new(0.02, 0.1 + 5e-5, 0.03));
        top.set_density(1000.0).unwrap();
        let mut bottom = shapes::cube_five_tets(0.1);
        bottom.set_density(1000.0).unwrap();
        let mat = Some(ElasticMaterial::new(1e5, 0.3));
        let scene = Scene::new(vec![bottom, top], vec![mat, mat], Vec3::new(0.0, -9.8, 0.0)).unwrap();
        let cfg = SolverConfig::for_scene(&scene, 0.01);
        let st = SimState::new(&scene, &cfg).unwrap();
        let ip = IncrementalPotential::new(&scene, &cfg, &st);
        let contacts = detect(&scene, &st.x, &cfg);
        let (g, _) = ip.system(&st.x, &contacts).unwrap();
        let h = 1e-9;
        let mut y = st.x.clone();
        for i in 0..st.x.len() {
            for c in 0..3 {
                let x0 = y[i][c];
                y[i][c] = x0 + h;
                let up = ip.energy_with(&y, &contacts).unwrap();
                y[i][c] = x0 - h;
                let dn = ip.energy_with(&y, &contacts).unwrap();
                y[i][c] = x0;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - g[3 * i + c]).abs() < 1e-5 * g.amax(), "{i} {c}: {fd} vs {}", g[3 * i + c]);
            }
        }
    }
}
