//! Intersection-free implicit contact dynamics.
//!
//! Contact barriers are written through a diagonal constraint Jacobian, which
//! gives every local barrier Hessian a closed-form eigensystem. Projection to
//! the PSD cone is therefore a scaled outer product instead of a numeric
//! eigendecomposition. The rest of the crate is the machinery needed to use
//! those Hessians in a projected-Newton time stepper:
//!
//! - [`mesh`] and [`scene`]: geometry, mesh I/O and small procedural shapes.
//! - [`proximity`]: distance classification, broad phase and additive CCD.
//! - [`gap`]: the diagonal Jacobian and gap function.
//! - [`barrier`] and [`mollifier`]: barrier energies, gradients and analytic
//!   PSD Hessians, including the nearly-parallel edge-edge case.
//! - [`friction`] and [`elasticity`]: lagged smooth friction and stable
//!   neo-Hookean FEM.
//! - [`solver`]: incremental potential, matrix-free PCG and Newton stepping.
//! - [`config`], [`curves`] and [`bench`]: scene files, diagnostic curves and
//!   the projection benchmark used by the command line runner.
//! - [`oracles`]: slow reference implementations used by the test suites.

pub mod barrier;
pub mod bench;
pub mod config;
pub mod curves;
pub mod elasticity;
pub mod friction;
pub mod gap;
pub mod linalg;
pub mod mesh;
pub mod mollifier;
pub mod oracles;
pub mod proximity;
pub mod scene;
pub mod solver;

pub use barrier::{BarrierForm, BarrierParams, LocalEigenSystem, LocalQuadratic};
pub use gap::{DiagonalJacobian, GapValue};
pub use mesh::SimMesh;
pub use proximity::{ContactKind, ContactStencil, DistanceResult};
pub use scene::Scene;
pub use solver::{SimState, SolverConfig, SolverMode};

/// 3-vector of `f64`, the position type used throughout.
pub type Vec3 = nalgebra::Vector3<f64>;
