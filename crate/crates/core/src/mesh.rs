//! Simulation meshes: tetrahedral solids and triangulated obstacles.
//!
//! Solids are read from TetGen `.node`/`.ele` pairs, obstacles from OBJ. The
//! boundary surface of a tet mesh is the set of faces referenced by exactly
//! one tetrahedron.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::Vec3;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("degenerate tetrahedron {index} (volume {volume:e})")]
    DegenerateTet { index: usize, volume: f64 },
    #[error("non-triangle face at line {line} ({count} vertices)")]
    NonTriangleFace { line: usize, count: usize },
    #[error("index {index} out of range (mesh has {count} vertices)")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("density must be positive, got {0}")]
    NonPositiveDensity(f64),
}

/// A single simulated body.
///
/// Volumetric bodies carry tets; co-dimensional obstacles have an empty tet
/// list and use the whole triangle set as their surface.
#[derive(Clone, Debug, PartialEq)]
pub struct SimMesh {
    pub vertices: Vec<Vec3>,
    pub rest_vertices: Vec<Vec3>,
    pub tets: Vec<[usize; 4]>,
    pub surface_tris: Vec<[usize; 3]>,
    pub surface_edges: Vec<[usize; 2]>,
    pub surface_verts: Vec<usize>,
    pub vertex_mass: Vec<f64>,
    pub is_fixed: Vec<bool>,
    pub rest_volumes: Vec<f64>,
    /// Inverse rest edge matrix `[x1-x0 | x2-x0 | x3-x0]^-1` per tet.
    pub rest_inv: Vec<Matrix3<f64>>,
}

impl SimMesh {
    /// Builds a volumetric mesh, fixing inverted tets and extracting the boundary.
    pub fn from_tets(vertices: Vec<Vec3>, tets: Vec<[usize; 4]>) -> Result<Self, MeshError> {
        let n = vertices.len();
        for t in &tets {
            for &i in t {
                if i >= n {
                    return Err(MeshError::IndexOutOfRange { index: i, count: n });
                }
            }
        }
        let l = bbox_diagonal(&vertices).max(f64::MIN_POSITIVE);
        let min_volume = 1e-14 * l * l * l;

        let mut tets = tets;
        let mut rest_volumes = Vec::with_capacity(tets.len());
        let mut rest_inv = Vec::with_capacity(tets.len());
        for (index, t) in tets.iter_mut().enumerate() {
            let mut volume = signed_volume(&vertices, t);
            if volume.abs() < min_volume {
                return Err(MeshError::DegenerateTet { index, volume });
            }
            if volume < 0.0 {
                t.swap(2, 3);
                volume = -volume;
            }
            let dm = edge_matrix(&vertices, t);
            // positive volume above the degeneracy threshold guarantees invertibility
            rest_inv.push(dm.try_inverse().expect("non-degenerate tet"));
            rest_volumes.push(volume);
        }

        let surface_tris = boundary_faces(&tets);
        let mut mesh = SimMesh {
            rest_vertices: vertices.clone(),
            vertex_mass: vec![0.0; n],
            is_fixed: vec![false; n],
            vertices,
            tets,
            surface_tris,
            surface_edges: Vec::new(),
            surface_verts: Vec::new(),
            rest_volumes,
            rest_inv,
        };
        mesh.rebuild_surface_topology();
        Ok(mesh)
    }

    /// Builds a co-dimensional triangle mesh. All vertices start fixed.
    pub fn from_triangles(vertices: Vec<Vec3>, tris: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let n = vertices.len();
        for t in &tris {
            for &i in t {
                if i >= n {
                    return Err(MeshError::IndexOutOfRange { index: i, count: n });
                }
            }
        }
        let mut mesh = SimMesh {
            rest_vertices: vertices.clone(),
            vertex_mass: vec![0.0; n],
            is_fixed: vec![true; n],
            vertices,
            tets: Vec::new(),
            surface_tris: tris,
            surface_edges: Vec::new(),
            surface_verts: Vec::new(),
            rest_volumes: Vec::new(),
            rest_inv: Vec::new(),
        };
        mesh.rebuild_surface_topology();
        Ok(mesh)
    }

    fn rebuild_surface_topology(&mut self) {
        let mut edges = BTreeSet::new();
        let mut verts = BTreeSet::new();
        for t in &self.surface_tris {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert([a.min(b), a.max(b)]);
                verts.insert(t[k]);
            }
        }
        self.surface_edges = edges.into_iter().collect();
        self.surface_verts = verts.into_iter().collect();
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_volumetric(&self) -> bool {
        !self.tets.is_empty()
    }

    /// Assigns lumped masses from `density`.
    pub fn set_density(&mut self, density: f64) -> Result<(), MeshError> {
        self.vertex_mass = compute_lumped_masses(self, density)?;
        Ok(())
    }

    /// Applies `x -> rotation * x + translation` to both current and rest positions.
    pub fn transform(&mut self, rotation: &Matrix3<f64>, translation: &Vec3) {
        for v in self.vertices.iter_mut().chain(self.rest_vertices.iter_mut()) {
            *v = rotation * *v + translation;
        }
        // rest shape matrices rotate as Dm -> R Dm, so Dm^-1 -> Dm^-1 R^T
        let rt = rotation.transpose();
        for inv in &mut self.rest_inv {
            *inv *= rt;
        }
    }

    pub fn translate(&mut self, offset: &Vec3) {
        self.transform(&Matrix3::identity(), offset);
    }

    pub fn total_rest_volume(&self) -> f64 {
        self.rest_volumes.iter().sum()
    }
}

pub fn signed_volume(x: &[Vec3], t: &[usize; 4]) -> f64 {
    edge_matrix(x, t).determinant() / 6.0
}

pub fn edge_matrix(x: &[Vec3], t: &[usize; 4]) -> Matrix3<f64> {
    let x0 = x[t[0]];
    Matrix3::from_columns(&[x[t[1]] - x0, x[t[2]] - x0, x[t[3]] - x0])
}

pub fn bbox_diagonal(x: &[Vec3]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut lo = x[0];
    let mut hi = x[0];
    for p in x {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Faces referenced by exactly one tet, oriented outward.
///
/// Tets must already be positively oriented.
pub fn boundary_faces(tets: &[[usize; 4]]) -> Vec<[usize; 3]> {
    let mut faces: BTreeMap<[usize; 3], (usize, [usize; 3])> = BTreeMap::new();
    for t in tets {
        let [a, b, c, d] = *t;
        for f in [[b, c, d], [a, d, c], [a, b, d], [a, c, b]] {
            let mut key = f;
            key.sort_unstable();
            faces.entry(key).and_modify(|e| e.0 += 1).or_insert((1, f));
        }
    }
    faces
        .into_values()
        .filter(|(count, _)| *count == 1)
        .map(|(_, f)| f)
        .collect()
}

/// Distributes `density * V / 4` of every tet to its corners.
pub fn compute_lumped_masses(mesh: &SimMesh, density: f64) -> Result<Vec<f64>, MeshError> {
    if !(density > 0.0) {
        return Err(MeshError::NonPositiveDensity(density));
    }
    let mut mass = vec![0.0; mesh.num_vertices()];
    for (t, v) in mesh.tets.iter().zip(&mesh.rest_volumes) {
        let share = density * v / 4.0;
        for &i in t {
            mass[i] += share;
        }
    }
    Ok(mass)
}

fn read(path: &Path) -> Result<String, MeshError> {
    fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Data lines of a TetGen file: comments (`#`) and blank lines removed.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.split('#').next().unwrap_or("");
        let fields: Vec<&str> = line.split_whitespace().collect();
        (!fields.is_empty()).then_some((i + 1, fields))
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, MeshError> {
    s.parse().map_err(|_| MeshError::Parse {
        line,
        msg: format!("invalid number {s:?}"),
    })
}

/// Parses TetGen `.node` text. Returns positions and the index base (0 or 1).
pub fn parse_node(text: &str) -> Result<(Vec<Vec3>, usize), MeshError> {
    let mut lines = data_lines(text);
    let (hl, header) = lines.next().ok_or(MeshError::Parse {
        line: 0,
        msg: "missing .node header".into(),
    })?;
    let count: usize = parse_num(header[0], hl)?;
    let mut verts = Vec::with_capacity(count);
    let mut base = None;
    for (line, f) in lines.take(count) {
        if f.len() < 4 {
            return Err(MeshError::Parse {
                line,
                msg: "expected `index x y z`".into(),
            });
        }
        let idx: usize = parse_num(f[0], line)?;
        base.get_or_insert(idx);
        verts.push(Vec3::new(
            parse_num(f[1], line)?,
            parse_num(f[2], line)?,
            parse_num(f[3], line)?,
        ));
    }
    if verts.len() != count {
        return Err(MeshError::Parse {
            line: hl,
            msg: format!("header declares {count} nodes, found {}", verts.len()),
        });
    }
    Ok((verts, base.unwrap_or(0)))
}

/// Parses TetGen `.ele` text into zero-based tets given the node index base.
pub fn parse_ele(text: &str, base: usize) -> Result<Vec<[usize; 4]>, MeshError> {
    let mut lines = data_lines(text);
    let (hl, header) = lines.next().ok_or(MeshError::Parse {
        line: 0,
        msg: "missing .ele header".into(),
    })?;
    let count: usize = parse_num(header[0], hl)?;
    let mut tets = Vec::with_capacity(count);
    for (line, f) in lines.take(count) {
        if f.len() < 5 {
            return Err(MeshError::Parse {
                line,
                msg: "expected `index v0 v1 v2 v3`".into(),
            });
        }
        let mut t = [0usize; 4];
        for k in 0..4 {
            let raw: usize = parse_num(f[k + 1], line)?;
            t[k] = raw.checked_sub(base).ok_or(MeshError::Parse {
                line,
                msg: format!("index {raw} below base {base}"),
            })?;
        }
        tets.push(t);
    }
    if tets.len() != count {
        return Err(MeshError::Parse {
            line: hl,
            msg: format!("header declares {count} tets, found {}", tets.len()),
        });
    }
    Ok(tets)
}

pub fn load_tet_mesh(node_path: &Path, ele_path: &Path) -> Result<SimMesh, MeshError> {
    let (verts, base) = parse_node(&read(node_path)?)?;
    let tets = parse_ele(&read(ele_path)?, base)?;
    SimMesh::from_tets(verts, tets)
}

/// Parses OBJ text, keeping only `v` and `f` records.
pub fn parse_obj(text: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>), MeshError> {
    let mut verts = Vec::new();
    let mut tris = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut f = raw.split_whitespace();
        match f.next() {
            Some("v") => {
                let c: Vec<&str> = f.collect();
                if c.len() < 3 {
                    return Err(MeshError::Parse {
                        line,
                        msg: "vertex needs 3 coordinates".into(),
                    });
                }
                verts.push(Vec3::new(
                    parse_num(c[0], line)?,
                    parse_num(c[1], line)?,
                    parse_num(c[2], line)?,
                ));
            }
            Some("f") => {
                let idx: Vec<&str> = f.collect();
                if idx.len() != 3 {
                    return Err(MeshError::NonTriangleFace {
                        line,
                        count: idx.len(),
                    });
                }
                let mut t = [0usize; 3];
                for (k, s) in idx.iter().enumerate() {
                    // `f v/vt/vn` -> v
                    let v: i64 = parse_num(s.split('/').next().unwrap_or(""), line)?;
                    let resolved = if v > 0 {
                        v - 1
                    } else {
                        verts.len() as i64 + v
                    };
                    if resolved < 0 {
                        return Err(MeshError::Parse {
                            line,
                            msg: format!("invalid face index {v}"),
                        });
                    }
                    t[k] = resolved as usize;
                }
                tris.push(t);
            }
            _ => {}
        }
    }
    Ok((verts, tris))
}

pub fn load_obj_surface(path: &Path) -> Result<SimMesh, MeshError> {
    let (verts, tris) = parse_obj(&read(path)?)?;
    SimMesh::from_triangles(verts, tris)
}

/// Writes the surface triangles of `vertices` as OBJ text.
pub fn write_obj(vertices: &[Vec3], tris: &[[usize; 3]]) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    for v in vertices {
        let _ = writeln!(out, "v {:.12e} {:.12e} {:.12e}", v.x, v.y, v.z);
    }
    for t in tris {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::shapes;

    fn unit_tet() -> SimMesh {
        SimMesh::from_tets(
            vec![
                Vec3::zeros(),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn single_tet_boundary() {
        let m = unit_tet();
        assert_eq!(m.surface_tris.len(), 4);
        assert_eq!(m.surface_edges.len(), 6);
        assert_eq!(m.surface_verts.len(), 4);
    }

    #[test]
    fn shared_face_is_interior() {
        let m = SimMesh::from_tets(
            vec![
                Vec3::zeros(),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
                Vec3::new(0.0, 0.0, -1.0),
            ],
            vec![[0, 1, 2, 3], [0, 2, 1, 4]],
        )
        .unwrap();
        assert_eq!(m.surface_tris.len(), 6);
        let shared = [0, 1, 2];
        assert!(m.surface_tris.iter().all(|f| {
            let mut s = *f;
            s.sort_unstable();
            s != shared
        }));
    }

    #[test]
    fn five_tet_cube_boundary_matches_brute_force() {
        let m = shapes::cube_five_tets(1.0);
        // brute force: count every face over every tet
        let mut count: BTreeMap<[usize; 3], usize> = BTreeMap::new();
        for t in &m.tets {
            for skip in 0..4 {
                let mut f: Vec<usize> = (0..4).filter(|&k| k != skip).map(|k| t[k]).collect();
                f.sort_unstable();
                *count.entry([f[0], f[1], f[2]]).or_default() += 1;
            }
        }
        let expected = count.values().filter(|&&c| c == 1).count();
        assert_eq!(expected, 12);
        assert_eq!(m.surface_tris.len(), expected);
    }

    #[test]
    fn boundary_faces_point_outward() {
        let m = shapes::cube_five_tets(2.0);
        // divergence theorem: (1/3) sum over faces of x . n dA equals the volume
        let mut vol = 0.0;
        for f in &m.surface_tris {
            let (a, b, c) = (m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]);
            vol += a.dot(&(b - a).cross(&(c - a))) / 6.0;
        }
        assert!((vol - 8.0).abs() < 1e-12);
        assert!((m.total_rest_volume() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn extraction_is_idempotent() {
        let m = shapes::box_grid(Vec3::new(1.0, 0.5, 0.5), [2, 1, 1]);
        let again = boundary_faces(&m.tets);
        assert_eq!(again, m.surface_tris);
    }

    #[test]
    fn inverted_tet_is_reoriented() {
        let m = SimMesh::from_tets(
            vec![
                Vec3::zeros(),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2, 3]],
        )
        .unwrap();
        assert!(signed_volume(&m.vertices, &m.tets[0]) > 0.0);
    }

    #[test]
    fn degenerate_tet_rejected() {
        let err = SimMesh::from_tets(
            vec![
                Vec3::zeros(),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2, 4], [0, 1, 2, 3]],
        )
        .unwrap_err();
        assert!(matches!(err, MeshError::DegenerateTet { index: 1, .. }));
    }

    #[test]
    fn node_ele_one_based() {
        let node = "# comment\n4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n";
        let ele = "1 4 0\n1 1 2 3 4\n";
        let (v, base) = parse_node(node).unwrap();
        assert_eq!(base, 1);
        let t = parse_ele(ele, base).unwrap();
        assert_eq!(t, vec![[0, 1, 2, 3]]);
        let m = SimMesh::from_tets(v, t).unwrap();
        assert_eq!(m.surface_tris.len(), 4);
    }

    #[test]
    fn node_ele_zero_based() {
        let node = "4 3 0 0\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n";
        let (v, base) = parse_node(node).unwrap();
        assert_eq!(base, 0);
        assert_eq!(v.len(), 4);
        assert_eq!(parse_ele("1 4 0\n0 0 1 2 3\n", 0).unwrap(), vec![[0, 1, 2, 3]]);
    }

    #[test]
    fn node_parse_error() {
        assert!(matches!(
            parse_node("2 3 0 0\n1 0 0 0\n2 x 0 0\n"),
            Err(MeshError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn obj_one_triangle() {
        let (v, t) = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let m = SimMesh::from_triangles(v, t).unwrap();
        assert_eq!(m.surface_tris.len(), 1);
        assert_eq!(m.surface_edges.len(), 3);
        assert_eq!(m.surface_verts.len(), 3);
        assert!(m.is_fixed.iter().all(|&f| f));
    }

    #[test]
    fn obj_quad_rejected() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap_err();
        assert!(matches!(err, MeshError::NonTriangleFace { count: 4, .. }));
        assert!(err.to_string().contains("non-triangle face"));
    }

    #[test]
    fn obj_slash_and_negative_indices() {
        let (_, t) = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2//2 -1\n").unwrap();
        assert_eq!(t, vec![[0, 1, 2]]);
    }

    #[test]
    fn icosphere_euler_characteristic() {
        let (v, t) = shapes::icosphere(1.0, 1);
        let m = SimMesh::from_triangles(v, t).unwrap();
        assert_eq!(m.surface_tris.len(), 80);
        assert_eq!(m.surface_edges.len(), 120);
        assert_eq!(m.surface_verts.len(), 42);
        let chi = m.surface_verts.len() as i64 - m.surface_edges.len() as i64
            + m.surface_tris.len() as i64;
        assert_eq!(chi, 2);
    }

    #[test]
    fn lumped_mass_unit_volume_tet() {
        // scale the reference tet (volume 1/6) up to volume 1
        let s = 6f64.cbrt();
        let m = SimMesh::from_tets(
            vec![
                Vec3::zeros(),
                Vec3::new(s, 0.0, 0.0),
                Vec3::new(0.0, s, 0.0),
                Vec3::new(0.0, 0.0, s),
            ],
            vec![[0, 1, 2, 3]],
        )
        .unwrap();
        let mass = compute_lumped_masses(&m, 1000.0).unwrap();
        for w in mass {
            assert!((w - 250.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lumped_mass_shared_face() {
        let m = SimMesh::from_tets(
            vec![
                Vec3::zeros(),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
                Vec3::new(0.0, 0.0, -1.0),
            ],
            vec![[0, 1, 2, 3], [0, 2, 1, 4]],
        )
        .unwrap();
        let rho = 3.0;
        let v = m.rest_volumes[0];
        let mass = compute_lumped_masses(&m, rho).unwrap();
        for i in 0..3 {
            assert!((mass[i] - rho * v / 2.0).abs() < 1e-14);
        }
        assert!((mass[3] - rho * v / 4.0).abs() < 1e-14);
    }

    #[test]
    fn lumped_mass_conserves_total() {
        let m = shapes::cube_five_tets(1.0);
        let mass = compute_lumped_masses(&m, 1.0).unwrap();
        let total: f64 = mass.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(compute_lumped_masses(&m, 0.0).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let node = dir.path().join("a.node");
        let ele = dir.path().join("a.ele");
        fs::write(&node, "4 3 0 0\n0 0 0 0\n1 1 0 0\n2 0 1 0\n3 0 0 1\n").unwrap();
        fs::write(&ele, "1 4 0\n0 0 1 2 3\n").unwrap();
        let m = load_tet_mesh(&node, &ele).unwrap();
        assert_eq!(m.tets.len(), 1);
        let obj = dir.path().join("a.obj");
        fs::write(&obj, write_obj(&m.vertices, &m.surface_tris)).unwrap();
        let s = load_obj_surface(&obj).unwrap();
        assert_eq!(s.surface_tris, m.surface_tris);
        assert!(load_tet_mesh(&dir.path().join("missing.node"), &ele).is_err());
    }
}
