//! Distance queries, contact detection and additive CCD.
//!
//! Squared distances are the stored primitive. Every stencil kind has a
//! closed-form distance (point-point, point-line, point-plane, line-line)
//! whose gradient follows from the envelope theorem at the unconstrained
//! minimizer, so no active-set derivative terms appear.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::Scene;
use crate::Vec3;

/// Relative threshold for the parallel-promotion tolerance.
pub const EPS_X_REL: f64 = 1e-3;
pub const ACCD_DEFAULT_SLACK: f64 = 0.9;
pub const ACCD_MAX_ITERS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProximityError {
    #[error("degenerate triangle {0:?}")]
    DegenerateTriangle(Vec<usize>),
    #[error("zero-length edge {0:?}")]
    ZeroLengthEdge(Vec<usize>),
    #[error("non-positive distance on stencil {0:?}")]
    NonPositiveDistance(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContactKind {
    PointPoint,
    PointEdge,
    PointTriangle,
    EdgeEdge,
    EdgeEdgeParallel,
    PointEdgeParallel,
    PointPointParallel,
}

impl ContactKind {
    pub fn num_verts(self) -> usize {
        match self {
            Self::PointPoint | Self::PointPointParallel => 2,
            Self::PointEdge | Self::PointEdgeParallel => 3,
            Self::PointTriangle | Self::EdgeEdge | Self::EdgeEdgeParallel => 4,
        }
    }

    /// Dimension `m` of the contact simplex.
    pub fn simplex_dim(self) -> usize {
        self.num_verts() - 1
    }

    pub fn is_parallel(self) -> bool {
        matches!(
            self,
            Self::EdgeEdgeParallel | Self::PointEdgeParallel | Self::PointPointParallel
        )
    }

    /// The non-parallel kind with the same distance formula.
    pub fn base(self) -> Self {
        match self {
            Self::EdgeEdgeParallel => Self::EdgeEdge,
            Self::PointEdgeParallel => Self::PointEdge,
            Self::PointPointParallel => Self::PointPoint,
            k => k,
        }
    }

    pub fn promoted(self) -> Self {
        match self {
            Self::EdgeEdge => Self::EdgeEdgeParallel,
            Self::PointEdge => Self::PointEdgeParallel,
            Self::PointPoint => Self::PointPointParallel,
            k => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContactStencil {
    pub kind: ContactKind,
    pub verts: Vec<usize>,
    /// `[a1, a2, b1, b2]` of the originating edge-edge query (parallel kinds only).
    pub edge_pair: Option<[usize; 4]>,
    pub eps_x: Option<f64>,
}

impl ContactStencil {
    pub fn new(kind: ContactKind, verts: Vec<usize>) -> Self {
        debug_assert_eq!(verts.len(), kind.num_verts());
        ContactStencil {
            kind,
            verts,
            edge_pair: None,
            eps_x: None,
        }
    }

    /// Vertices that carry degrees of freedom for this stencil's energy.
    ///
    /// Parallel kinds depend on all four edge vertices through `c`.
    pub fn dof_vertices(&self) -> Vec<usize> {
        match self.edge_pair {
            Some(e) if self.kind.is_parallel() => e.to_vec(),
            _ => self.verts.clone(),
        }
    }

    /// Puts vertex order into canonical form so equal stencils compare equal.
    fn canonicalize(mut self) -> Self {
        let v = &mut self.verts;
        match self.kind.base() {
            ContactKind::PointPoint => v.sort_unstable(),
            ContactKind::PointEdge => v[1..].sort_unstable(),
            ContactKind::PointTriangle => v[1..].sort_unstable(),
            ContactKind::EdgeEdge => {
                let (mut a, mut b) = ([v[0], v[1]], [v[2], v[3]]);
                a.sort_unstable();
                b.sort_unstable();
                if b < a {
                    std::mem::swap(&mut a, &mut b);
                }
                *v = vec![a[0], a[1], b[0], b[1]];
            }
            _ => unreachable!(),
        }
        self
    }

    fn sort_key(&self) -> (ContactKind, Vec<usize>, Option<[usize; 4]>) {
        (self.kind, self.verts.clone(), self.edge_pair)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceResult {
    pub d2: f64,
    /// One entry per stencil vertex.
    pub grad_d2: Vec<Vec3>,
    /// `(beta1, beta2)` for point-triangle, `(gamma1, gamma2)` for edge-edge,
    /// `(t, 0)` for point-edge and zeros for point-point.
    pub witness: [f64; 2],
}

/// A classified query: reduced kind, the reduced vertices as indices into the
/// query's input points, the distance and the parallelness measure.
#[derive(Clone, Debug, PartialEq)]
pub struct Classified {
    pub kind: ContactKind,
    pub local: Vec<usize>,
    pub dist: DistanceResult,
    pub c: f64,
}

pub fn point_point(p: &Vec3, q: &Vec3) -> DistanceResult {
    let r = p - q;
    DistanceResult {
        d2: r.norm_squared(),
        grad_d2: vec![2.0 * r, -2.0 * r],
        witness: [0.0; 2],
    }
}

/// Distance from `p` to the infinite line through `a`, `b`.
pub fn point_line(p: &Vec3, a: &Vec3, b: &Vec3) -> DistanceResult {
    let e = b - a;
    let t = (p - a).dot(&e) / e.norm_squared();
    let r = p - a - t * e;
    DistanceResult {
        d2: r.norm_squared(),
        grad_d2: vec![2.0 * r, -2.0 * (1.0 - t) * r, -2.0 * t * r],
        witness: [t, 0.0],
    }
}

/// Distance from `p` to the plane through `t1`, `t2`, `t3`.
pub fn point_plane(p: &Vec3, t1: &Vec3, t2: &Vec3, t3: &Vec3) -> DistanceResult {
    let (e1, e2) = (t2 - t1, t3 - t1);
    let n = e1.cross(&e2).normalize();
    let q = p - t1;
    let r = q.dot(&n) * n;
    let (a, b, c) = (e1.dot(&e1), e1.dot(&e2), e2.dot(&e2));
    let (u, v) = (e1.dot(&q), e2.dot(&q));
    let det = a * c - b * b;
    let b1 = (c * u - b * v) / det;
    let b2 = (a * v - b * u) / det;
    DistanceResult {
        d2: r.norm_squared(),
        grad_d2: vec![
            2.0 * r,
            -2.0 * (1.0 - b1 - b2) * r,
            -2.0 * b1 * r,
            -2.0 * b2 * r,
        ],
        witness: [b1, b2],
    }
}

/// Distance between the infinite lines through two non-parallel edges.
pub fn line_line(a1: &Vec3, a2: &Vec3, b1: &Vec3, b2: &Vec3) -> DistanceResult {
    let (ea, eb) = (a2 - a1, b2 - b1);
    let w = ea.cross(&eb);
    let wn = w.normalize();
    let r0 = a1 - b1;
    let r = r0.dot(&wn) * wn;
    let (a, b, c) = (ea.dot(&ea), ea.dot(&eb), eb.dot(&eb));
    let (d, e) = (ea.dot(&r0), eb.dot(&r0));
    let den = a * c - b * b;
    let g1 = (b * e - c * d) / den;
    let g2 = (a * e - b * d) / den;
    DistanceResult {
        d2: r.norm_squared(),
        grad_d2: vec![
            2.0 * (1.0 - g1) * r,
            2.0 * g1 * r,
            -2.0 * (1.0 - g2) * r,
            -2.0 * g2 * r,
        ],
        witness: [g1, g2],
    }
}

/// `c = |ea x eb|^2` and its gradient with respect to `(a1, a2, b1, b2)`.
pub fn edge_cross_measure(a1: &Vec3, a2: &Vec3, b1: &Vec3, b2: &Vec3) -> (f64, [Vec3; 4]) {
    let (ea, eb) = (a2 - a1, b2 - b1);
    let w = ea.cross(&eb);
    let dea = 2.0 * eb.cross(&w);
    let deb = 2.0 * w.cross(&ea);
    (w.norm_squared(), [-dea, dea, -deb, deb])
}

/// Parallel tolerance from rest edge lengths.
pub fn eps_x_from_rest(a1: &Vec3, a2: &Vec3, b1: &Vec3, b2: &Vec3) -> f64 {
    EPS_X_REL * (a2 - a1).norm_squared() * (b2 - b1).norm_squared()
}

/// Closed-form distance of an already-typed stencil over its reduced vertices.
pub fn stencil_distance(kind: ContactKind, p: &[Vec3]) -> DistanceResult {
    match kind.base() {
        ContactKind::PointPoint => point_point(&p[0], &p[1]),
        ContactKind::PointEdge => point_line(&p[0], &p[1], &p[2]),
        ContactKind::PointTriangle => point_plane(&p[0], &p[1], &p[2], &p[3]),
        ContactKind::EdgeEdge => line_line(&p[0], &p[1], &p[2], &p[3]),
        _ => unreachable!(),
    }
}

/// Point against a segment, reducing to point-point at the endpoints.
fn classify_point_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> (ContactKind, [usize; 2], DistanceResult) {
    let e = b - a;
    let t = (p - a).dot(&e) / e.norm_squared();
    if t <= 0.0 {
        (ContactKind::PointPoint, [0, 1], point_point(p, a))
    } else if t >= 1.0 {
        (ContactKind::PointPoint, [0, 2], point_point(p, b))
    } else {
        (ContactKind::PointEdge, [0, 1], point_line(p, a, b))
    }
}

/// Picks the minimum over point-segment candidates; ties prefer point-point.
fn best_of(cands: Vec<(ContactKind, Vec<usize>, DistanceResult)>) -> (ContactKind, Vec<usize>, DistanceResult) {
    cands
        .into_iter()
        .min_by(|x, y| {
            x.2.d2
                .total_cmp(&y.2.d2)
                .then(x.0.num_verts().cmp(&y.0.num_verts()))
        })
        .expect("non-empty candidate list")
}

/// Maps a point-segment result from `(p, a, b)` numbering into the caller's.
fn lift(
    (kind, which, dist): (ContactKind, [usize; 2], DistanceResult),
    p: usize,
    a: usize,
    b: usize,
) -> (ContactKind, Vec<usize>, DistanceResult) {
    let local = match kind {
        ContactKind::PointPoint => vec![p, if which[1] == 1 { a } else { b }],
        _ => vec![p, a, b],
    };
    (kind, local, dist)
}

pub fn classify_point_triangle(
    p: &Vec3,
    t1: &Vec3,
    t2: &Vec3,
    t3: &Vec3,
) -> Result<Classified, ProximityError> {
    let (e1, e2) = (t2 - t1, t3 - t1);
    let scale = e1.norm_squared().max(e2.norm_squared()).max((t3 - t2).norm_squared());
    if e1.cross(&e2).norm_squared() <= 1e-28 * scale * scale || scale == 0.0 {
        return Err(ProximityError::DegenerateTriangle(vec![1, 2, 3]));
    }
    let plane = point_plane(p, t1, t2, t3);
    let [b1, b2] = plane.witness;
    let (kind, local, dist) = if b1 > 0.0 && b2 > 0.0 && b1 + b2 < 1.0 {
        (ContactKind::PointTriangle, vec![0, 1, 2, 3], plane)
    } else {
        best_of(vec![
            lift(classify_point_segment(p, t1, t2), 0, 1, 2),
            lift(classify_point_segment(p, t2, t3), 0, 2, 3),
            lift(classify_point_segment(p, t3, t1), 0, 3, 1),
        ])
    };
    Ok(Classified {
        kind,
        local,
        dist,
        c: 0.0,
    })
}

/// Segment-segment classification. `eps_x` controls parallel promotion;
/// pass `0.0` to disable it.
pub fn classify_edge_edge(
    a1: &Vec3,
    a2: &Vec3,
    b1: &Vec3,
    b2: &Vec3,
    eps_x: f64,
) -> Result<Classified, ProximityError> {
    let (ea, eb) = (a2 - a1, b2 - b1);
    if ea.norm_squared() == 0.0 {
        return Err(ProximityError::ZeroLengthEdge(vec![0, 1]));
    }
    if eb.norm_squared() == 0.0 {
        return Err(ProximityError::ZeroLengthEdge(vec![2, 3]));
    }
    let (c, _) = edge_cross_measure(a1, a2, b1, b2);
    let mut interior = None;
    if c > 1e-16 * ea.norm_squared() * eb.norm_squared() {
        let ll = line_line(a1, a2, b1, b2);
        let [g1, g2] = ll.witness;
        if g1 > 0.0 && g1 < 1.0 && g2 > 0.0 && g2 < 1.0 {
            interior = Some(ll);
        }
    }
    let (mut kind, local, dist) = match interior {
        Some(ll) => (ContactKind::EdgeEdge, vec![0, 1, 2, 3], ll),
        None => best_of(vec![
            lift(classify_point_segment(a1, b1, b2), 0, 2, 3),
            lift(classify_point_segment(a2, b1, b2), 1, 2, 3),
            lift(classify_point_segment(b1, a1, a2), 2, 0, 1),
            lift(classify_point_segment(b2, a1, a2), 3, 0, 1),
        ]),
    };
    if c < eps_x {
        kind = kind.promoted();
    }
    Ok(Classified {
        kind,
        local,
        dist,
        c,
    })
}

/// Unsigned distance between two primitives, falling back to segment
/// distances for degenerate triangles.
pub fn primitive_distance2(kind: ContactKind, p: &[Vec3]) -> f64 {
    match kind.base() {
        ContactKind::PointPoint => (p[0] - p[1]).norm_squared(),
        ContactKind::PointEdge => classify_point_segment(&p[0], &p[1], &p[2]).2.d2,
        ContactKind::PointTriangle => match classify_point_triangle(&p[0], &p[1], &p[2], &p[3]) {
            Ok(c) => c.dist.d2,
            Err(_) => [(1, 2), (2, 3), (3, 1)]
                .iter()
                .map(|&(i, j)| classify_point_segment(&p[0], &p[i], &p[j]).2.d2)
                .fold(f64::INFINITY, f64::min),
        },
        ContactKind::EdgeEdge => classify_edge_edge(&p[0], &p[1], &p[2], &p[3], 0.0)
            .map(|c| c.dist.d2)
            .unwrap_or_else(|_| {
                (0..4)
                    .flat_map(|i| (0..4).map(move |j| (i, j)))
                    .filter(|&(i, j)| i < 2 && j >= 2)
                    .map(|(i, j)| (p[i] - p[j]).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            }),
        _ => unreachable!(),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Aabb {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Aabb {
    pub fn of(points: &[Vec3], pad: f64) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Aabb {
            lo: lo.add_scalar(-pad),
            hi: hi.add_scalar(pad),
        }
    }

    pub fn overlaps(&self, o: &Aabb) -> bool {
        (0..3).all(|k| self.lo[k] <= o.hi[k] && o.lo[k] <= self.hi[k])
    }
}

/// Sweep-and-prune along x. With `b = None` the set is tested against itself.
pub fn sweep_and_prune(a: &[Aabb], b: Option<&[Aabb]>) -> Vec<(usize, usize)> {
    // events: (lo.x, group, index)
    let mut events: Vec<(f64, u8, usize)> = a.iter().enumerate().map(|(i, x)| (x.lo.x, 0, i)).collect();
    if let Some(b) = b {
        events.extend(b.iter().enumerate().map(|(i, x)| (x.lo.x, 1, i)));
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let boxes = |g: u8| if g == 0 { a } else { b.unwrap_or(a) };
    let mut active: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut out = Vec::new();
    for (x, g, i) in events {
        for k in 0..2 {
            let set = boxes(k as u8);
            active[k].retain(|&j| set[j].hi.x >= x);
        }
        let me = &boxes(g)[i];
        let other = if b.is_some() { 1 - g } else { 0 };
        for &j in &active[other as usize] {
            if me.overlaps(&boxes(other)[j]) {
                out.push(if g == 0 { (i, j) } else { (j, i) });
            }
        }
        active[g as usize].push(i);
    }
    out
}

/// Raw primitive pairs whose padded boxes overlap: point-triangle as
/// `(vertex, tri)` and edge-edge as `(edge, edge)` indices into the scene's
/// surface lists. Incident pairs and fully fixed pairs are skipped.
fn candidate_pairs(
    scene: &Scene,
    vert_boxes: &[Aabb],
    tri_boxes: &[Aabb],
    edge_boxes: &[Aabb],
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let topo = &scene.topo;
    let fixed = |vs: &[usize]| vs.iter().all(|&i| topo.is_fixed[i]);
    let mut pt = sweep_and_prune(vert_boxes, Some(tri_boxes));
    pt.retain(|&(vi, ti)| {
        let v = topo.surface_verts[vi];
        let t = topo.surface_tris[ti];
        !t.contains(&v) && !fixed(&[v, t[0], t[1], t[2]])
    });
    let mut ee: Vec<(usize, usize)> = sweep_and_prune(edge_boxes, None)
        .into_iter()
        .map(|(i, j)| (i.min(j), i.max(j)))
        .filter(|&(i, j)| i != j)
        .collect();
    ee.retain(|&(i, j)| {
        let (a, b) = (topo.surface_edges[i], topo.surface_edges[j]);
        !a.iter().any(|v| b.contains(v)) && !fixed(&[a[0], a[1], b[0], b[1]])
    });
    pt.sort_unstable();
    ee.sort_unstable();
    (pt, ee)
}

fn to_stencil(
    cl: Classified,
    global: [usize; 4],
    edge_query: bool,
    eps_x: f64,
) -> ContactStencil {
    let verts: Vec<usize> = cl.local.iter().map(|&k| global[k]).collect();
    let mut s = ContactStencil::new(cl.kind, verts).canonicalize();
    if edge_query && cl.kind.is_parallel() {
        let mut e = global;
        let (mut a, mut b) = ([e[0], e[1]], [e[2], e[3]]);
        a.sort_unstable();
        b.sort_unstable();
        if b < a {
            std::mem::swap(&mut a, &mut b);
        }
        e = [a[0], a[1], b[0], b[1]];
        s.edge_pair = Some(e);
        s.eps_x = Some(eps_x);
    }
    s
}

/// All contacts with `d < d_hat`, one per primitive pair, in a fixed order.
///
/// Pairs that reduce to the same stencil are all kept: each primitive pair
/// carries its own barrier term, so the total stays continuous when a closest
/// point crosses a shared edge or vertex.
pub fn find_contact_pairs(scene: &Scene, x: &[Vec3], d_hat: f64) -> Vec<ContactStencil> {
    find_contact_pairs_with(scene, x, d_hat, true)
}

/// As [`find_contact_pairs`], optionally without parallel promotion.
pub fn find_contact_pairs_with(
    scene: &Scene,
    x: &[Vec3],
    d_hat: f64,
    promote_parallel: bool,
) -> Vec<ContactStencil> {
    let topo = &scene.topo;
    let vb: Vec<Aabb> = topo.surface_verts.iter().map(|&v| Aabb::of(&[x[v]], d_hat)).collect();
    let tb: Vec<Aabb> = topo
        .surface_tris
        .iter()
        .map(|t| Aabb::of(&[x[t[0]], x[t[1]], x[t[2]]], 0.0))
        .collect();
    let eb: Vec<Aabb> = topo
        .surface_edges
        .iter()
        .map(|e| Aabb::of(&[x[e[0]], x[e[1]]], 0.5 * d_hat))
        .collect();
    let (pt, ee) = candidate_pairs(scene, &vb, &tb, &eb);
    let d_hat2 = d_hat * d_hat;

    let mut out: Vec<ContactStencil> = pt
        .par_iter()
        .filter_map(|&(vi, ti)| {
            let v = topo.surface_verts[vi];
            let t = topo.surface_tris[ti];
            let cl = classify_point_triangle(&x[v], &x[t[0]], &x[t[1]], &x[t[2]]).ok()?;
            (cl.dist.d2 < d_hat2).then(|| to_stencil(cl, [v, t[0], t[1], t[2]], false, 0.0))
        })
        .collect();
    out.par_extend(ee.par_iter().filter_map(|&(i, j)| {
        let (a, b) = (topo.surface_edges[i], topo.surface_edges[j]);
        let r = &topo.rest_positions;
        let eps_x = if promote_parallel {
            eps_x_from_rest(&r[a[0]], &r[a[1]], &r[b[0]], &r[b[1]])
        } else {
            0.0
        };
        let cl = classify_edge_edge(&x[a[0]], &x[a[1]], &x[b[0]], &x[b[1]], eps_x).ok()?;
        (cl.dist.d2 < d_hat2).then(|| to_stencil(cl, [a[0], a[1], b[0], b[1]], true, eps_x))
    }));
    out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    out
}

/// Point and other-side vertex groups of a primitive pair (local indices).
fn sides(kind: ContactKind) -> (&'static [usize], &'static [usize]) {
    match kind.base() {
        ContactKind::PointPoint => (&[0], &[1]),
        ContactKind::PointEdge => (&[0], &[1, 2]),
        ContactKind::PointTriangle => (&[0], &[1, 2, 3]),
        ContactKind::EdgeEdge => (&[0, 1], &[2, 3]),
        _ => unreachable!(),
    }
}

/// Additive CCD step bound for one stencil.
///
/// The primitive is the stencil's own kind over `verts` (or the full edge
/// pair for parallel kinds). Returns `alpha` in `(0, 1]` such that moving by
/// `alpha * dirs` keeps the distance at least `(1 - slack)` of its current value.
pub fn accd_step_bound(
    stencil: &ContactStencil,
    x: &[Vec3],
    dirs: &[Vec3],
    slack: f64,
) -> Result<f64, ProximityError> {
    let (kind, verts) = match stencil.edge_pair {
        Some(e) if stencil.kind.is_parallel() => (ContactKind::EdgeEdge, e.to_vec()),
        _ => (stencil.kind.base(), stencil.verts.clone()),
    };
    let mut p: Vec<Vec3> = verts.iter().map(|&i| x[i]).collect();
    let mean = verts.iter().fold(Vec3::zeros(), |a, &i| a + dirs[i]) / verts.len() as f64;
    let dp: Vec<Vec3> = verts.iter().map(|&i| dirs[i] - mean).collect();
    let (sa, sb) = sides(kind);
    let max_norm = |s: &[usize]| s.iter().map(|&k| dp[k].norm()).fold(0.0, f64::max);
    let lp = max_norm(sa) + max_norm(sb);
    let d0 = primitive_distance2(kind, &p).sqrt();
    if !(d0 > 0.0) {
        return Err(ProximityError::NonPositiveDistance(verts));
    }
    if lp == 0.0 {
        return Ok(1.0);
    }
    let gap = (1.0 - slack) * d0;
    let mut t = 0.0;
    let mut tl = slack * d0 / lp;
    for _ in 0..ACCD_MAX_ITERS {
        for (pk, dk) in p.iter_mut().zip(&dp) {
            *pk += tl * dk;
        }
        let d = primitive_distance2(kind, &p).sqrt();
        if t > 0.0 && d < gap {
            break;
        }
        t += tl;
        if t >= 1.0 {
            return Ok(1.0);
        }
        tl = 0.9 * d / lp;
    }
    Ok(t)
}

/// Primitive pairs whose swept boxes (current to `x + dirs`) overlap, as
/// point-triangle and edge-edge stencils over full primitives.
pub fn ccd_candidates(scene: &Scene, x: &[Vec3], dirs: &[Vec3]) -> Vec<ContactStencil> {
    let topo = &scene.topo;
    let y: Vec<Vec3> = x.iter().zip(dirs).map(|(a, b)| a + b).collect();
    let swept = |ids: &[usize]| {
        let pts: Vec<Vec3> = ids.iter().flat_map(|&i| [x[i], y[i]]).collect();
        Aabb::of(&pts, 0.0)
    };
    let vb: Vec<Aabb> = topo.surface_verts.iter().map(|&v| swept(&[v])).collect();
    let tb: Vec<Aabb> = topo.surface_tris.iter().map(|t| swept(t)).collect();
    let eb: Vec<Aabb> = topo.surface_edges.iter().map(|e| swept(e)).collect();
    let (pt, ee) = candidate_pairs(scene, &vb, &tb, &eb);
    let mut out: Vec<ContactStencil> = pt
        .iter()
        .map(|&(vi, ti)| {
            let t = topo.surface_tris[ti];
            ContactStencil::new(
                ContactKind::PointTriangle,
                vec![topo.surface_verts[vi], t[0], t[1], t[2]],
            )
        })
        .collect();
    out.extend(ee.iter().map(|&(i, j)| {
        let (a, b) = (topo.surface_edges[i], topo.surface_edges[j]);
        ContactStencil::new(ContactKind::EdgeEdge, vec![a[0], a[1], b[0], b[1]])
    }));
    out
}

/// Minimum ACCD bound over `candidates`; 1 when there are none.
pub fn global_ccd_filter(
    x: &[Vec3],
    dirs: &[Vec3],
    candidates: &[ContactStencil],
    slack: f64,
) -> Result<f64, ProximityError> {
    candidates
        .par_iter()
        .map(|s| accd_step_bound(s, x, dirs, slack))
        .try_reduce(|| 1.0, |a, b| Ok(a.min(b)))
}

/// Exact minimum distance over all non-incident surface primitive pairs.
/// Slow; used for post-hoc checks.
pub fn min_primitive_distance(scene: &Scene, x: &[Vec3]) -> f64 {
    let topo = &scene.topo;
    let mut seen = HashSet::new();
    let mut best = f64::INFINITY;
    for &v in &topo.surface_verts {
        for t in &topo.surface_tris {
            if t.contains(&v) || [v, t[0], t[1], t[2]].iter().all(|&i| topo.is_fixed[i]) {
                continue;
            }
            let d = primitive_distance2(ContactKind::PointTriangle, &[x[v], x[t[0]], x[t[1]], x[t[2]]]);
            best = best.min(d);
        }
    }
    for (i, a) in topo.surface_edges.iter().enumerate() {
        for b in &topo.surface_edges[i + 1..] {
            if a.iter().any(|v| b.contains(v)) || !seen.insert((*a, *b)) {
                continue;
            }
            if [a[0], a[1], b[0], b[1]].iter().all(|&k| topo.is_fixed[k]) {
                continue;
            }
            let d = primitive_distance2(ContactKind::EdgeEdge, &[x[a[0]], x[a[1]], x[b[0]], x[b[1]]]);
            best = best.min(d);
        }
    }
    best.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use proptest::prelude::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn pt_above_centroid() {
        let (t1, t2, t3) = (v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0));
        let c = (t1 + t2 + t3) / 3.0;
        let cl = classify_point_triangle(&(c + v(0.0, 0.0, 0.3)), &t1, &t2, &t3).unwrap();
        assert_eq!(cl.kind, ContactKind::PointTriangle);
        assert!((cl.dist.d2 - 0.09).abs() < 1e-15);
    }

    #[test]
    fn pt_beyond_edge_matches_grid() {
        let (t1, t2, t3) = (v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0));
        let p = v(0.4, -0.5, 0.2);
        let cl = classify_point_triangle(&p, &t1, &t2, &t3).unwrap();
        assert_eq!(cl.kind, ContactKind::PointEdge);
        assert_eq!(cl.local, vec![0, 1, 2]);
        let grid = oracles::grid_point_triangle_d2(&p, &t1, &t2, &t3, 100);
        assert!((cl.dist.d2 - grid).abs() < 1e-6);
    }

    #[test]
    fn pt_coincident_vertex() {
        let (t1, t2, t3) = (v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0));
        let cl = classify_point_triangle(&t2, &t1, &t2, &t3).unwrap();
        assert_eq!(cl.kind, ContactKind::PointPoint);
        assert_eq!(cl.dist.d2, 0.0);
    }

    #[test]
    fn pt_degenerate_rejected() {
        let r = classify_point_triangle(&v(0.0, 0.0, 1.0), &v(0.0, 0.0, 0.0), &v(1.0, 0.0, 0.0), &v(2.0, 0.0, 0.0));
        assert!(matches!(r, Err(ProximityError::DegenerateTriangle(_))));
    }

    #[test]
    fn ee_perpendicular() {
        let h = 0.2;
        let cl = classify_edge_edge(&v(-1.0, 0.0, 0.0), &v(1.0, 0.0, 0.0), &v(0.0, -1.0, h), &v(0.0, 1.0, h), 1e-3)
            .unwrap();
        assert_eq!(cl.kind, ContactKind::EdgeEdge);
        assert!((cl.dist.d2 - h * h).abs() < 1e-15);
        assert!((cl.c - 16.0).abs() < 1e-12);
    }

    #[test]
    fn ee_parallel_promoted() {
        let h = 0.1;
        let cl = classify_edge_edge(&v(0.0, 0.0, 0.0), &v(1.0, 0.0, 0.0), &v(0.0, h, 0.0), &v(1.0, h, 0.0), 1e-3)
            .unwrap();
        assert!(cl.kind.is_parallel());
        assert_eq!(cl.c, 0.0);
        assert!((cl.dist.d2 - h * h).abs() < 1e-15);
        let plain = classify_edge_edge(&v(0.0, 0.0, 0.0), &v(1.0, 0.0, 0.0), &v(0.0, h, 0.0), &v(1.0, h, 0.0), 0.0)
            .unwrap();
        assert!(!plain.kind.is_parallel());
    }

    #[test]
    fn ee_zero_length_rejected() {
        let a = v(0.0, 0.0, 0.0);
        assert!(matches!(
            classify_edge_edge(&a, &a, &v(0.0, 1.0, 0.0), &v(1.0, 1.0, 0.0), 0.0),
            Err(ProximityError::ZeroLengthEdge(_))
        ));
    }

    fn pt3() -> impl Strategy<Value = Vec3> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(a, b, c)| v(a, b, c))
    }

    fn fd_check(kind: ContactKind, p: &[Vec3]) -> f64 {
        let r = stencil_distance(kind, p);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let scale = r.grad_d2.iter().map(|g| g.norm()).fold(0.0, f64::max).max(1e-3);
        for i in 0..p.len() {
            for k in 0..3 {
                let mut a = p.to_vec();
                let mut b = p.to_vec();
                a[i][k] += h;
                b[i][k] -= h;
                let fd = (stencil_distance(kind, &a).d2 - stencil_distance(kind, &b).d2) / (2.0 * h);
                worst = worst.max((fd - r.grad_d2[i][k]).abs() / scale);
            }
        }
        worst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn ee_matches_grid(a1 in pt3(), a2 in pt3(), b1 in pt3(), b2 in pt3()) {
            prop_assume!((a2 - a1).norm() > 0.1 && (b2 - b1).norm() > 0.1);
            let cl = classify_edge_edge(&a1, &a2, &b1, &b2, 0.0).unwrap();
            let grid = oracles::grid_edge_edge_d2(&a1, &a2, &b1, &b2, 100);
            prop_assert!(cl.dist.d2 <= grid + 1e-12);
            prop_assert!(grid - cl.dist.d2 < 1e-3);
        }

        #[test]
        fn pt_matches_fine_search(p in pt3(), t1 in pt3(), t2 in pt3(), t3 in pt3()) {
            prop_assume!((t2 - t1).cross(&(t3 - t1)).norm() > 0.05);
            let cl = classify_point_triangle(&p, &t1, &t2, &t3).unwrap();
            let grid = oracles::grid_point_triangle_d2(&p, &t1, &t2, &t3, 100);
            prop_assert!(cl.dist.d2 <= grid + 1e-12);
            prop_assert!(grid - cl.dist.d2 < 1e-3);
            // reduced stencil recomputes the same distance
            let pts = [p, t1, t2, t3];
            let red: Vec<Vec3> = cl.local.iter().map(|&k| pts[k]).collect();
            prop_assert!((stencil_distance(cl.kind, &red).d2 - cl.dist.d2).abs() < 1e-12);
        }

        #[test]
        fn gradients_match_fd(p in pt3(), t1 in pt3(), t2 in pt3(), t3 in pt3()) {
            prop_assume!((t2 - t1).cross(&(t3 - t1)).norm() > 0.1);
            prop_assume!((t2 - t1).norm() > 0.1 && (t3 - t1).norm() > 0.1);
            let pts = [p, t1, t2, t3];
            prop_assert!(fd_check(ContactKind::PointTriangle, &pts) < 1e-6);
            prop_assert!(fd_check(ContactKind::EdgeEdge, &pts) < 1e-6);
            prop_assert!(fd_check(ContactKind::PointEdge, &pts[..3]) < 1e-6);
            prop_assert!(fd_check(ContactKind::PointPoint, &pts[..2]) < 1e-6);
        }

        #[test]
        fn gradients_translation_invariant(p in pt3(), t1 in pt3(), t2 in pt3(), t3 in pt3()) {
            prop_assume!((t2 - t1).cross(&(t3 - t1)).norm() > 0.1);
            for kind in [ContactKind::PointTriangle, ContactKind::EdgeEdge] {
                let r = stencil_distance(kind, &[p, t1, t2, t3]);
                let s: Vec3 = r.grad_d2.iter().sum();
                prop_assert!(s.norm() < 1e-10);
            }
        }

        #[test]
        fn cross_measure_gradient(a1 in pt3(), a2 in pt3(), b1 in pt3(), b2 in pt3()) {
            let (_, g) = edge_cross_measure(&a1, &a2, &b1, &b2);
            let h = 1e-6;
            let pts = [a1, a2, b1, b2];
            for i in 0..4 {
                for k in 0..3 {
                    let mut a = pts;
                    let mut b = pts;
                    a[i][k] += h;
                    b[i][k] -= h;
                    let fd = (edge_cross_measure(&a[0], &a[1], &a[2], &a[3]).0
                        - edge_cross_measure(&b[0], &b[1], &b[2], &b[3]).0) / (2.0 * h);
                    prop_assert!((fd - g[i][k]).abs() < 1e-6 * (1.0 + g[i][k].abs()));
                }
            }
        }
    }

    #[test]
    fn branch_continuity_along_path() {
        let (t1, t2, t3) = (v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0));
        let mut prev: Option<f64> = None;
        for k in 0..=2000 {
            let s = -0.5 + 2.0 * k as f64 / 2000.0;
            let p = v(s, 0.3, 0.25);
            let d2 = classify_point_triangle(&p, &t1, &t2, &t3).unwrap().dist.d2;
            if let Some(q) = prev {
                // Lipschitz bound for a step of 1e-3 at distance ~0.25
                assert!((d2 - q).abs() < 2.5e-3);
            }
            prev = Some(d2);
        }
        // value agrees on either side of the interior/edge boundary at s = 0.7
        let l = classify_point_triangle(&v(0.7 - 1e-12, 0.3, 0.25), &t1, &t2, &t3).unwrap();
        let r = classify_point_triangle(&v(0.7 + 1e-12, 0.3, 0.25), &t1, &t2, &t3).unwrap();
        assert_ne!(l.kind, r.kind);
        assert!((l.dist.d2 - r.dist.d2).abs() < 1e-10);
    }

    #[test]
    fn accd_zero_and_rigid_motion() {
        let x = vec![v(0.2, 0.2, 0.5), v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0)];
        let s = ContactStencil::new(ContactKind::PointTriangle, vec![0, 1, 2, 3]);
        let zero = vec![Vec3::zeros(); 4];
        assert_eq!(accd_step_bound(&s, &x, &zero, 0.9).unwrap(), 1.0);
        let same = vec![v(0.0, 0.0, -3.0); 4];
        assert_eq!(accd_step_bound(&s, &x, &same, 0.9).unwrap(), 1.0);
    }

    #[test]
    fn accd_head_on_bound() {
        let g0 = 0.5;
        let x = vec![v(0.2, 0.2, g0), v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0)];
        let s = ContactStencil::new(ContactKind::PointTriangle, vec![0, 1, 2, 3]);
        let mut dirs = vec![Vec3::zeros(); 4];
        dirs[0] = v(0.0, 0.0, -2.0);
        let star = g0 / 2.0;
        let a = accd_step_bound(&s, &x, &dirs, 0.9).unwrap();
        assert!(a <= star && a >= 0.1 * star, "alpha {a}");
        dirs[0] = v(0.0, 0.0, -0.1);
        assert_eq!(accd_step_bound(&s, &x, &dirs, 0.9).unwrap(), 1.0);
    }

    #[test]
    fn accd_rejects_contact() {
        let x = vec![v(0.2, 0.2, 0.0), v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0)];
        let s = ContactStencil::new(ContactKind::PointTriangle, vec![0, 1, 2, 3]);
        assert!(accd_step_bound(&s, &x, &[Vec3::zeros(); 4], 0.9).is_err());
    }

    #[test]
    fn sap_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut boxes = |n: usize| -> Vec<Aabb> {
            (0..n)
                .map(|_| {
                    let c = v(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                    Aabb::of(&[c], rng.random_range(0.01..0.1))
                })
                .collect()
        };
        let a = boxes(60);
        let b = boxes(40);
        let mut got = sweep_and_prune(&a, Some(&b));
        got.sort_unstable();
        let mut want = Vec::new();
        for i in 0..a.len() {
            for j in 0..b.len() {
                if a[i].overlaps(&b[j]) {
                    want.push((i, j));
                }
            }
        }
        assert_eq!(got, want);
        let mut own: Vec<(usize, usize)> =
            sweep_and_prune(&a, None).into_iter().map(|(i, j)| (i.min(j), i.max(j))).collect();
        own.sort_unstable();
        let mut want_own = Vec::new();
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                if a[i].overlaps(&a[j]) {
                    want_own.push((i, j));
                }
            }
        }
        assert_eq!(own, want_own);
    }
}
