//! JSON scene files.
//!
//! Lengths ending in `_rel` are fractions of the scene bounding-box diagonal
//! `l` and are resolved once all bodies are placed. Mesh paths are relative
//! to the scene file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{BarrierForm, BarrierParams};
use crate::elasticity::ElasticMaterial;
use crate::mesh::{load_obj_surface, load_tet_mesh, MeshError, SimMesh};
use crate::scene::{shapes, Scene};
use crate::solver::{suggested_kappa, LinearSolver, SolverConfig, SolverMode};
use crate::Vec3;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read scene file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scene file {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("body {body}: {source}")]
    Mesh { body: usize, source: MeshError },
    #[error("body {body}: {msg}")]
    Body { body: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ShapeSpec {
    Box {
        size: [f64; 3],
        #[serde(default = "one_cell")]
        cells: [usize; 3],
    },
    SingleTet {
        size: f64,
    },
    Tet {
        corners: [[f64; 3]; 4],
    },
    Ball {
        radius: f64,
        #[serde(default)]
        subdivisions: usize,
    },
    Ground {
        half_extent: f64,
        #[serde(default)]
        height: f64,
        #[serde(default = "one")]
        cells: usize,
    },
    Funnel {
        top_radius: f64,
        bottom_radius: f64,
        height: f64,
        segments: usize,
    },
    TetMesh {
        node: PathBuf,
        ele: PathBuf,
    },
    Obj {
        path: PathBuf,
    },
}

fn one_cell() -> [usize; 3] {
    [1, 1, 1]
}

fn one() -> usize {
    1
}

/// Which vertices of a body are kinematic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FixedSpec {
    #[default]
    None,
    All,
    /// Vertices with coordinate `axis` at least `value` (after placement).
    Above { axis: usize, value: f64 },
    Below { axis: usize, value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub youngs_e: f64,
    pub poisson_nu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationSpec {
    pub axis: [f64; 3],
    /// Radians.
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub shape: ShapeSpec,
    #[serde(default)]
    pub material: Option<MaterialSpec>,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default)]
    pub fixed: FixedSpec,
    #[serde(default)]
    pub rotation: Option<RotationSpec>,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
}

fn default_density() -> f64 {
    1000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarrierSpec {
    pub d_hat_rel: f64,
    /// Absolute stiffness; overrides `kappa_rel`.
    pub kappa: Option<f64>,
    pub kappa_rel: f64,
    pub d_thr_ratio: f64,
    pub form: BarrierForm,
    pub filter: bool,
}

impl Default for BarrierSpec {
    fn default() -> Self {
        BarrierSpec {
            d_hat_rel: 1e-3,
            kappa: None,
            kappa_rel: 1.0,
            d_thr_ratio: 0.1,
            form: BarrierForm::Stiffened,
            filter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSpec {
    pub eps_d: f64,
    pub pcg_rel_tol: f64,
    pub pcg_max_iters: usize,
    pub newton_max_iters: usize,
    pub mode: SolverMode,
    pub linear_solver: LinearSolver,
    pub mollify: bool,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            eps_d: 1e-2,
            pcg_rel_tol: 1e-4,
            pcg_max_iters: 10_000,
            newton_max_iters: 200,
            mode: SolverMode::Gipc,
            linear_solver: LinearSolver::Pcg,
            mollify: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrictionSpec {
    pub mu: f64,
    pub eps_v_rel: f64,
}

impl Default for FrictionSpec {
    fn default() -> Self {
        FrictionSpec { mu: 0.0, eps_v_rel: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Write an OBJ frame every this many steps; 0 disables frames.
    pub obj_every: usize,
    pub csv: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("out"),
            obj_every: 1,
            csv: "diagnostics.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    #[serde(default)]
    pub name: String,
    pub bodies: Vec<BodySpec>,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    pub dt: f64,
    pub steps: usize,
    #[serde(default)]
    pub barrier: BarrierSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub friction: FrictionSpec,
    #[serde(default)]
    pub outputs: OutputSpec,
}

fn default_gravity() -> [f64; 3] {
    [0.0, -9.8, 0.0]
}

/// Everything needed to start a run.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub scene: Scene,
    pub solver: SolverConfig,
    pub velocities: Vec<Vec3>,
    pub steps: usize,
    pub outputs: OutputSpec,
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl SceneConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: SceneConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for b in &mut cfg.bodies {
            match &mut b.shape {
                ShapeSpec::TetMesh { node, ele } => {
                    *node = base.join(&*node);
                    *ele = base.join(&*ele);
                }
                ShapeSpec::Obj { path } => *path = base.join(&*path),
                _ => {}
            }
        }
        Ok(cfg)
    }

    fn build_body(&self, i: usize, spec: &BodySpec) -> Result<SimMesh, ConfigError> {
        let mesh_err = |source| ConfigError::Mesh { body: i, source };
        let mut mesh = match &spec.shape {
            ShapeSpec::Box { size, cells } => shapes::box_grid(v3(*size), *cells),
            ShapeSpec::SingleTet { size } => shapes::single_tet(*size),
            ShapeSpec::Tet { corners } => shapes::tet_from(corners.map(v3)).map_err(mesh_err)?,
            ShapeSpec::Ball { radius, subdivisions } => shapes::ball(*radius, *subdivisions),
            ShapeSpec::Ground {
                half_extent,
                height,
                cells,
            } => shapes::ground(*half_extent, *height, *cells),
            ShapeSpec::Funnel {
                top_radius,
                bottom_radius,
                height,
                segments,
            } => shapes::funnel(*top_radius, *bottom_radius, *height, *segments),
            ShapeSpec::TetMesh { node, ele } => load_tet_mesh(node, ele).map_err(mesh_err)?,
            ShapeSpec::Obj { path } => load_obj_surface(path).map_err(mesh_err)?,
        };
        let rot = spec
            .rotation
            .as_ref()
            .map(|r| shapes::rotation(v3(r.axis), r.angle))
            .unwrap_or_else(nalgebra::Matrix3::identity);
        shapes::place(&mut mesh, &rot, v3(spec.translation));
        if mesh.is_volumetric() {
            if !(spec.density > 0.0) {
                return Err(ConfigError::Body {
                    body: i,
                    msg: format!("density must be positive, got {}", spec.density),
                });
            }
            mesh.set_density(spec.density).map_err(mesh_err)?;
            let fixed: Vec<bool> = mesh
                .vertices
                .iter()
                .map(|p| match &spec.fixed {
                    FixedSpec::None => false,
                    FixedSpec::All => true,
                    FixedSpec::Above { axis, value } => p[*axis] >= *value,
                    FixedSpec::Below { axis, value } => p[*axis] <= *value,
                })
                .collect();
            mesh.is_fixed = fixed;
            if spec.material.is_none() && mesh.is_fixed.iter().any(|f| !f) {
                return Err(ConfigError::Body {
                    body: i,
                    msg: "free vertices need a material".into(),
                });
            }
        } else if spec.fixed != FixedSpec::All && spec.fixed != FixedSpec::None {
            return Err(ConfigError::Body {
                body: i,
                msg: "surface obstacles are always fully fixed".into(),
            });
        }
        Ok(mesh)
    }

    /// Builds bodies, resolves relative lengths and assembles the solver configuration.
    pub fn load(&self) -> Result<LoadedScene, ConfigError> {
        if !(self.dt > 0.0) {
            return Err(ConfigError::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.bodies.is_empty() {
            return Err(ConfigError::Invalid("scene has no bodies".into()));
        }
        let mut bodies = Vec::new();
        let mut materials = Vec::new();
        let mut velocities = Vec::new();
        for (i, spec) in self.bodies.iter().enumerate() {
            let mesh = self.build_body(i, spec)?;
            let mat = match &spec.material {
                Some(m) if mesh.is_volumetric() => {
                    if !(m.youngs_e > 0.0) || !(m.poisson_nu > 0.0 && m.poisson_nu < 0.5) {
                        return Err(ConfigError::Body {
                            body: i,
                            msg: format!("invalid material E = {}, nu = {}", m.youngs_e, m.poisson_nu),
                        });
                    }
                    Some(ElasticMaterial::new(m.youngs_e, m.poisson_nu))
                }
                _ => None,
            };
            velocities.extend(std::iter::repeat(v3(spec.velocity)).take(mesh.num_vertices()));
            bodies.push(mesh);
            materials.push(mat);
        }
        let scene = Scene::new(bodies, materials, v3(self.gravity)).map_err(|source| ConfigError::Mesh { body: 0, source })?;
        let l = scene.bbox_diagonal;
        let b = &self.barrier;
        if !(b.d_hat_rel > 0.0) || !(b.d_thr_ratio > 0.0 && b.d_thr_ratio < 1.0) {
            return Err(ConfigError::Invalid("barrier: need d_hat_rel > 0 and d_thr_ratio in (0, 1)".into()));
        }
        let d_hat = b.d_hat_rel * l;
        let kappa = b.kappa.unwrap_or_else(|| suggested_kappa(&scene, d_hat, b.kappa_rel));
        if !(kappa > 0.0) {
            return Err(ConfigError::Invalid(format!("barrier stiffness must be positive, got {kappa}")));
        }
        let mut barrier = BarrierParams::with_threshold(d_hat, kappa, b.d_thr_ratio);
        barrier.form = b.form;
        barrier.filter = b.filter;
        let mut solver = SolverConfig::for_scene(&scene, self.dt);
        solver.barrier = barrier;
        solver.eps_d = self.solver.eps_d;
        solver.pcg_rel_tol = self.solver.pcg_rel_tol;
        solver.pcg_max_iters = self.solver.pcg_max_iters;
        solver.newton_max_iters = self.solver.newton_max_iters;
        solver.mode = self.solver.mode;
        solver.linear_solver = self.solver.linear_solver;
        solver.mollify = self.solver.mollify;
        solver.friction_mu = self.friction.mu;
        solver.friction_eps_v = self.friction.eps_v_rel * l;
        solver.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(LoadedScene {
            scene,
            solver,
            velocities,
            steps: self.steps,
            outputs: self.outputs.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "bodies": [
            {"shape": {"type": "box", "size": [1, 1, 1]}, "fixed": "all"},
            {"shape": {"type": "single-tet", "size": 0.5}, "material": {"youngs_e": 1e5, "poisson_nu": 0.3},
             "translation": [0.2, 1.1, 0.2], "velocity": [0, -1, 0]}
        ],
        "dt": 0.01,
        "steps": 3
    }"#;

    #[test]
    fn minimal_scene_resolves_relative_lengths() {
        let cfg: SceneConfig = serde_json::from_str(MINIMAL).unwrap();
        let s = cfg.load().unwrap();
        let l = s.scene.bbox_diagonal;
        assert!((s.solver.barrier.d_hat - 1e-3 * l).abs() < 1e-15);
        assert!((s.solver.friction_eps_v - 1e-3 * l).abs() < 1e-15);
        assert_eq!(s.velocities.len(), s.scene.num_vertices());
        assert!(s.scene.topo.is_fixed[..8].iter().all(|&f| f));
        assert!(s.scene.topo.is_fixed[8..].iter().all(|&f| !f));
        assert_eq!(s.steps, 3);
    }

    #[test]
    fn free_body_without_material_rejected() {
        let text = MINIMAL.replace(r#""material": {"youngs_e": 1e5, "poisson_nu": 0.3},"#, "");
        let cfg: SceneConfig = serde_json::from_str(&text).unwrap();
        assert!(matches!(cfg.load(), Err(ConfigError::Body { body: 1, .. })));
    }

    #[test]
    fn fixed_selector_by_height() {
        let text = r#"{"bodies": [{"shape": {"type": "box", "size": [1, 1, 1]},
            "material": {"youngs_e": 1e5, "poisson_nu": 0.3},
            "fixed": {"below": {"axis": 1, "value": 0.0}}}], "dt": 0.01, "steps": 1}"#;
        let cfg: SceneConfig = serde_json::from_str(text).unwrap();
        let s = cfg.load().unwrap();
        assert_eq!(s.scene.topo.is_fixed.iter().filter(|&&f| f).count(), 4);
    }

    #[test]
    fn missing_mesh_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        std::fs::write(
            &p,
            r#"{"bodies": [{"shape": {"type": "obj", "path": "nope.obj"}, "fixed": "all"}], "dt": 0.01, "steps": 1}"#,
        )
        .unwrap();
        let cfg = SceneConfig::from_file(&p).unwrap();
        assert!(matches!(cfg.load(), Err(ConfigError::Mesh { .. })));
    }
}
