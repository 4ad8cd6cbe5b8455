//! A scene is a set of bodies flattened into one global vertex numbering.

use nalgebra::Matrix3;

use crate::elasticity::ElasticMaterial;
use crate::mesh::{bbox_diagonal, MeshError, SimMesh};
use crate::Vec3;

/// Global-index view of every body, built once at scene construction.
#[derive(Clone, Debug, Default)]
pub struct Topology {
    pub offsets: Vec<usize>,
    pub num_vertices: usize,
    pub rest_positions: Vec<Vec3>,
    pub mass: Vec<f64>,
    pub is_fixed: Vec<bool>,
    pub vertex_body: Vec<usize>,
    pub tets: Vec<[usize; 4]>,
    pub tet_body: Vec<usize>,
    pub tet_volume: Vec<f64>,
    pub tet_rest_inv: Vec<Matrix3<f64>>,
    pub surface_tris: Vec<[usize; 3]>,
    pub surface_edges: Vec<[usize; 2]>,
    pub surface_verts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub bodies: Vec<SimMesh>,
    /// One entry per body; `None` for obstacles without elastic energy.
    pub materials: Vec<Option<ElasticMaterial>>,
    pub gravity: Vec3,
    pub bbox_diagonal: f64,
    pub topo: Topology,
}

impl Scene {
    pub fn new(
        bodies: Vec<SimMesh>,
        materials: Vec<Option<ElasticMaterial>>,
        gravity: Vec3,
    ) -> Result<Self, MeshError> {
        assert_eq!(bodies.len(), materials.len(), "one material slot per body");
        let all: Vec<Vec3> = bodies.iter().flat_map(|b| b.vertices.iter().copied()).collect();
        let l = bbox_diagonal(&all);
        if !(l > 0.0) {
            return Err(MeshError::Parse {
                line: 0,
                msg: "scene bounding box is empty".into(),
            });
        }
        for b in &bodies {
            for (i, (&fixed, &m)) in b.is_fixed.iter().zip(&b.vertex_mass).enumerate() {
                if !fixed && !(m > 0.0) {
                    return Err(MeshError::Parse {
                        line: 0,
                        msg: format!("free vertex {i} has no mass"),
                    });
                }
            }
        }
        let topo = flatten(&bodies);
        Ok(Scene {
            bodies,
            materials,
            gravity,
            bbox_diagonal: l,
            topo,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.topo.num_vertices
    }

    pub fn initial_positions(&self) -> Vec<Vec3> {
        self.bodies.iter().flat_map(|b| b.vertices.iter().copied()).collect()
    }

    pub fn material_of_tet(&self, t: usize) -> Option<&ElasticMaterial> {
        self.materials[self.topo.tet_body[t]].as_ref()
    }

    pub fn total_mass(&self) -> f64 {
        self.topo
            .mass
            .iter()
            .zip(&self.topo.is_fixed)
            .filter(|(_, &f)| !f)
            .map(|(m, _)| m)
            .sum()
    }

    /// Mean mass of free vertices.
    pub fn mean_free_mass(&self) -> f64 {
        let n = self.topo.is_fixed.iter().filter(|&&f| !f).count();
        if n == 0 {
            return 0.0;
        }
        self.total_mass() / n as f64
    }

    /// Splits a global position array back into per-body slices.
    pub fn body_slice<'a>(&self, x: &'a [Vec3], body: usize) -> &'a [Vec3] {
        let start = self.topo.offsets[body];
        &x[start..start + self.bodies[body].num_vertices()]
    }
}

fn flatten(bodies: &[SimMesh]) -> Topology {
    let mut t = Topology::default();
    let mut offset = 0;
    for (bi, b) in bodies.iter().enumerate() {
        t.offsets.push(offset);
        t.rest_positions.extend(&b.rest_vertices);
        t.mass.extend(&b.vertex_mass);
        t.is_fixed.extend(&b.is_fixed);
        t.vertex_body.extend(std::iter::repeat(bi).take(b.num_vertices()));
        for (k, tet) in b.tets.iter().enumerate() {
            t.tets.push(tet.map(|i| i + offset));
            t.tet_body.push(bi);
            t.tet_volume.push(b.rest_volumes[k]);
            t.tet_rest_inv.push(b.rest_inv[k]);
        }
        t.surface_tris.extend(b.surface_tris.iter().map(|f| f.map(|i| i + offset)));
        t.surface_edges.extend(b.surface_edges.iter().map(|e| e.map(|i| i + offset)));
        t.surface_verts.extend(b.surface_verts.iter().map(|i| i + offset));
        offset += b.num_vertices();
    }
    t.num_vertices = offset;
    t
}

/// Procedural shapes used by the bundled scenes and tests.
pub mod shapes {
    use super::*;
    use nalgebra::{Rotation3, Unit};

    /// Axis-aligned box `[0,size]` tetrahedralized with five tets per cell.
    ///
    /// Cells alternate between the two mirror-image splits so shared faces
    /// use the same diagonal.
    pub fn box_grid(size: Vec3, n: [usize; 3]) -> SimMesh {
        let [nx, ny, nz] = n;
        let idx = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
        let mut verts = Vec::new();
        for k in 0..=nz {
            for j in 0..=ny {
                for i in 0..=nx {
                    verts.push(Vec3::new(
                        size.x * i as f64 / nx as f64,
                        size.y * j as f64 / ny as f64,
                        size.z * k as f64 / nz as f64,
                    ));
                }
            }
        }
        // corner b = dx + 2 dy + 4 dz
        const EVEN: [[usize; 4]; 5] = [[1, 2, 4, 7], [0, 1, 2, 4], [3, 1, 2, 7], [5, 1, 4, 7], [6, 2, 4, 7]];
        const ODD: [[usize; 4]; 5] = [[0, 3, 5, 6], [1, 0, 3, 5], [2, 0, 3, 6], [4, 0, 5, 6], [7, 3, 5, 6]];
        let mut tets = Vec::new();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let c: Vec<usize> = (0..8)
                        .map(|b| idx(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1)))
                        .collect();
                    let split = if (i + j + k) % 2 == 0 { &EVEN } else { &ODD };
                    for t in split {
                        tets.push(t.map(|b| c[b]));
                    }
                }
            }
        }
        SimMesh::from_tets(verts, tets).expect("box grid is well formed")
    }

    pub fn cube_five_tets(size: f64) -> SimMesh {
        box_grid(Vec3::repeat(size), [1, 1, 1])
    }

    /// Corner tet `(0, s e_x, s e_y, s e_z)`.
    pub fn single_tet(size: f64) -> SimMesh {
        SimMesh::from_tets(
            vec![
                Vec3::zeros(),
                Vec3::new(size, 0.0, 0.0),
                Vec3::new(0.0, size, 0.0),
                Vec3::new(0.0, 0.0, size),
            ],
            vec![[0, 1, 2, 3]],
        )
        .expect("corner tet is well formed")
    }

    /// Tet from explicit corner positions.
    pub fn tet_from(corners: [Vec3; 4]) -> Result<SimMesh, MeshError> {
        SimMesh::from_tets(corners.to_vec(), vec![[0, 1, 2, 3]])
    }

    /// Outward-oriented icosphere.
    pub fn icosphere(radius: f64, subdivisions: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
        let p = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vec3> = [
            (-1.0, p, 0.0),
            (1.0, p, 0.0),
            (-1.0, -p, 0.0),
            (1.0, -p, 0.0),
            (0.0, -1.0, p),
            (0.0, 1.0, p),
            (0.0, -1.0, -p),
            (0.0, 1.0, -p),
            (p, 0.0, -1.0),
            (p, 0.0, 1.0),
            (-p, 0.0, -1.0),
            (-p, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut tris: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mid = std::collections::HashMap::new();
            let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(tris.len() * 4);
            for [a, b, c] in tris {
                let ab = midpoint(a, b, &mut verts);
                let bc = midpoint(b, c, &mut verts);
                let ca = midpoint(c, a, &mut verts);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            tris = next;
        }
        for v in &mut verts {
            *v *= radius;
        }
        (verts, tris)
    }

    /// Solid ball: an icosphere coned to its center.
    pub fn ball(radius: f64, subdivisions: usize) -> SimMesh {
        let (mut verts, tris) = icosphere(radius, subdivisions);
        let center = verts.len();
        verts.push(Vec3::zeros());
        let tets = tris.iter().map(|t| [center, t[0], t[1], t[2]]).collect();
        SimMesh::from_tets(verts, tets).expect("coned icosphere is well formed")
    }

    /// Square `[-h,h]^2` in the `y = height` plane, normal `+y`, split into `n x n` cells.
    pub fn ground(half_extent: f64, height: f64, n: usize) -> SimMesh {
        let mut verts = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                verts.push(Vec3::new(
                    -half_extent + 2.0 * half_extent * i as f64 / n as f64,
                    height,
                    -half_extent + 2.0 * half_extent * j as f64 / n as f64,
                ));
            }
        }
        let mut tris = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let a = i + (n + 1) * j;
                let (b, c, d) = (a + 1, a + n + 1, a + n + 2);
                tris.push([a, c, b]);
                tris.push([b, c, d]);
            }
        }
        SimMesh::from_triangles(verts, tris).expect("ground grid is well formed")
    }

    /// Open truncated cone around the `y` axis, narrow end down.
    pub fn funnel(top_radius: f64, bottom_radius: f64, height: f64, segments: usize) -> SimMesh {
        let mut verts = Vec::new();
        for (r, y) in [(bottom_radius, 0.0), (top_radius, height)] {
            for s in 0..segments {
                let a = std::f64::consts::TAU * s as f64 / segments as f64;
                verts.push(Vec3::new(r * a.cos(), y, r * a.sin()));
            }
        }
        let mut tris = Vec::new();
        for s in 0..segments {
            let n = (s + 1) % segments;
            let (b0, b1, t0, t1) = (s, n, s + segments, n + segments);
            tris.push([b0, t0, b1]);
            tris.push([b1, t0, t1]);
        }
        SimMesh::from_triangles(verts, tris).expect("funnel is well formed")
    }

    /// Rotation about `axis` by `angle` radians.
    pub fn rotation(axis: Vec3, angle: f64) -> Matrix3<f64> {
        if axis.norm() == 0.0 || angle == 0.0 {
            return Matrix3::identity();
        }
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
    }

    /// Rotates about the body's centroid, then translates.
    pub fn place(mesh: &mut SimMesh, rotation: &Matrix3<f64>, translation: Vec3) {
        let centroid =
            mesh.vertices.iter().fold(Vec3::zeros(), |a, v| a + v) / mesh.num_vertices() as f64;
        mesh.translate(&-centroid);
        mesh.transform(rotation, &(centroid + translation));
    }
}
