//! Quadric error metric edge-collapse simplification.
//!
//! Each vertex accumulates the squared distances to the planes of its
//! incident faces. Boundary edges add a heavily weighted plane perpendicular
//! to their face, and boundary vertices a small isotropic point quadric, so
//! open borders survive until the interior has been decimated. Collapses are
//! popped from a priority queue keyed by (cost, edge); stale entries are
//! detected with per-vertex stamps.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplifyOptions {
    /// Weight of the perpendicular constraint plane added per boundary edge.
    pub boundary_weight: f64,
    /// Weight of the point quadric pinning each boundary vertex in place.
    pub boundary_point_weight: f64,
    /// Collapses that rotate an incident face normal by more than this are rejected.
    pub max_normal_flip_deg: f64,
    /// Above this condition number the optimal-placement system counts as singular.
    pub singular_condition: f64,
}

impl Default for SimplifyOptions {
    fn default() -> Self {
        SimplifyOptions {
            boundary_weight: 1000.0,
            boundary_point_weight: 1.0,
            max_normal_flip_deg: 90.0,
            singular_condition: 1e8,
        }
    }
}

/// Symmetric 4×4 quadric `Q` with error `[p 1] Q [p 1]ᵀ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quadric(pub Matrix4<f64>);

impl Quadric {
    pub fn zero() -> Self {
        Quadric(Matrix4::zeros())
    }

    /// Plane `n·x + d = 0` with unit `n`, scaled by `weight`.
    pub fn plane(n: &Vec3, d: f64, weight: f64) -> Self {
        let p = Vector4::new(n.x, n.y, n.z, d);
        Quadric(p * p.transpose() * weight)
    }

    /// `weight · |x − c|²`.
    pub fn point(c: &Vec3, weight: f64) -> Self {
        let mut m = Matrix4::zeros();
        for i in 0..3 {
            m[(i, i)] = weight;
            m[(i, 3)] = -weight * c[i];
            m[(3, i)] = -weight * c[i];
        }
        m[(3, 3)] = weight * c.norm_squared();
        Quadric(m)
    }

    pub fn error(&self, p: &Vec3) -> f64 {
        let h = Vector4::new(p.x, p.y, p.z, 1.0);
        (h.transpose() * self.0 * h)[(0, 0)]
    }

    /// Minimiser of the quadric, or `None` when the 3×3 block is
    /// ill-conditioned.
    pub fn optimal_point(&self, max_condition: f64) -> Option<Vec3> {
        let a: Matrix3<f64> = self.0.fixed_view::<3, 3>(0, 0).into_owned();
        let sv = a.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        if !(lo > 0.0) || hi / lo > max_condition {
            return None;
        }
        let b = -Vec3::new(self.0[(0, 3)], self.0[(1, 3)], self.0[(2, 3)]);
        a.lu().solve(&b)
    }
}

impl std::ops::Add for Quadric {
    type Output = Quadric;
    fn add(self, rhs: Quadric) -> Quadric {
        Quadric(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Quadric {
    fn add_assign(&mut self, rhs: Quadric) {
        self.0 += rhs.0;
    }
}

/// Output of [`qem_simplify`].
#[derive(Clone, Debug)]
pub struct Simplified {
    pub mesh: Mesh,
    /// Original index of each output vertex.
    pub kept: Vec<usize>,
    /// False when no legal collapse remained before reaching the target.
    pub reached_target: bool,
    /// Cost of every performed collapse, in order.
    pub collapse_costs: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    cost: f64,
    a: usize,
    b: usize,
    stamp_a: u32,
    stamp_b: u32,
    target: Vec3,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Reversed so the max-heap pops the cheapest, then lowest edge.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
    }
}

struct Decimator {
    pos: Vec<Vec3>,
    quadric: Vec<Quadric>,
    alive: Vec<bool>,
    boundary: Vec<bool>,
    stamp: Vec<u32>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vfaces: Vec<Vec<usize>>,
    opts: SimplifyOptions,
    min_area2: f64,
    cos_limit: f64,
}

fn face_normal(p: &[Vec3], f: &[usize; 3]) -> Vec3 {
    (p[f[1]] - p[f[0]]).cross(&(p[f[2]] - p[f[0]]))
}

impl Decimator {
    fn new(mesh: &Mesh, opts: SimplifyOptions) -> Result<Self> {
        let n = mesh.vertex_count();
        let pos = mesh.vertices().to_vec();
        let faces = mesh.faces().to_vec();

        let mut edge_faces: BTreeMap<[usize; 2], Vec<usize>> = BTreeMap::new();
        for (fi, f) in faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edge_faces.entry([a.min(b), a.max(b)]).or_default().push(fi);
            }
        }
        if let Some((e, fs)) = edge_faces.iter().find(|(_, fs)| fs.len() > 2) {
            return Err(Error::NonManifold(format!("edge {:?} shared by {} faces", e, fs.len())));
        }

        let mut quadric = vec![Quadric::zero(); n];
        for f in &faces {
            let nrm = face_normal(&pos, f);
            let len = nrm.norm();
            if len == 0.0 {
                continue;
            }
            let u = nrm / len;
            let q = Quadric::plane(&u, -u.dot(&pos[f[0]]), 1.0);
            for &v in f {
                quadric[v] += q;
            }
        }
        let mut boundary = vec![false; n];
        for (e, fs) in &edge_faces {
            if fs.len() != 1 {
                continue;
            }
            let f = &faces[fs[0]];
            let fnrm = face_normal(&pos, f);
            let dir = pos[e[1]] - pos[e[0]];
            let c = dir.cross(&fnrm);
            let len = c.norm();
            if len > 0.0 {
                let u = c / len;
                let q = Quadric::plane(&u, -u.dot(&pos[e[0]]), opts.boundary_weight);
                quadric[e[0]] += q;
                quadric[e[1]] += q;
            }
            boundary[e[0]] = true;
            boundary[e[1]] = true;
        }
        for v in 0..n {
            if boundary[v] && opts.boundary_point_weight > 0.0 {
                quadric[v] += Quadric::point(&pos[v], opts.boundary_point_weight);
            }
        }

        let mut vfaces = vec![Vec::new(); n];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                vfaces[v].push(fi);
            }
        }

        let (lo, hi) = pos.iter().fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), p| (lo.inf(p), hi.sup(p)),
        );
        let diag2 = if n > 0 { (hi - lo).norm_squared() } else { 0.0 };
        Ok(Decimator {
            pos,
            quadric,
            alive: vec![true; n],
            boundary,
            stamp: vec![0; n],
            face_alive: vec![true; faces.len()],
            faces,
            vfaces,
            cos_limit: opts.max_normal_flip_deg.to_radians().cos(),
            opts,
            min_area2: 1e-24 * diag2 * diag2,
        })
    }

    fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.vfaces[v]
            .iter()
            .flat_map(|&f| self.faces[f])
            .filter(|&u| u != v)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn candidate(&self, a: usize, b: usize) -> Candidate {
        let (a, b) = (a.min(b), a.max(b));
        let q = self.quadric[a] + self.quadric[b];
        let target = match q.optimal_point(self.opts.singular_condition) {
            Some(p) => p,
            None => {
                if q.error(&self.pos[b]) < q.error(&self.pos[a]) {
                    self.pos[b]
                } else {
                    self.pos[a]
                }
            }
        };
        Candidate {
            cost: q.error(&target).max(0.0),
            a,
            b,
            stamp_a: self.stamp[a],
            stamp_b: self.stamp[b],
            target,
        }
    }

    fn is_current(&self, c: &Candidate) -> bool {
        self.alive[c.a] && self.alive[c.b] && self.stamp[c.a] == c.stamp_a && self.stamp[c.b] == c.stamp_b
    }

    fn shared_faces(&self, a: usize, b: usize) -> Vec<usize> {
        self.vfaces[a]
            .iter()
            .copied()
            .filter(|&f| self.faces[f].contains(&b))
            .collect()
    }

    fn is_legal(&self, c: &Candidate) -> bool {
        let (a, b) = (c.a, c.b);
        let shared = self.shared_faces(a, b);
        if shared.is_empty() {
            return false;
        }
        // Both endpoints on the border but the edge itself interior: pinches the surface.
        if shared.len() == 2 && self.boundary[a] && self.boundary[b] {
            return false;
        }
        // Link condition: common neighbours are exactly the opposite corners.
        let na = self.neighbors(a);
        let nb = self.neighbors(b);
        let common = na.iter().filter(|v| nb.binary_search(v).is_ok()).count();
        if common != shared.len() {
            return false;
        }
        // A closed tetrahedron cannot lose another vertex.
        if shared.len() == 2 && na.len() <= 3 && nb.len() <= 3 {
            return false;
        }
        for v in [a, b] {
            for &fi in &self.vfaces[v] {
                if shared.contains(&fi) {
                    continue;
                }
                let f = self.faces[fi];
                let before = face_normal(&self.pos, &f);
                let corners: Vec<Vec3> = f
                    .iter()
                    .map(|&i| if i == a || i == b { c.target } else { self.pos[i] })
                    .collect();
                let after = (corners[1] - corners[0]).cross(&(corners[2] - corners[0]));
                let (lb, la) = (before.norm_squared(), after.norm_squared());
                if la <= self.min_area2 {
                    return false;
                }
                if lb > 0.0 && before.dot(&after) < self.cos_limit * (lb * la).sqrt() {
                    return false;
                }
            }
        }
        true
    }

    /// Merges `b` into `a` at `target`.
    fn collapse(&mut self, c: &Candidate) {
        let (a, b) = (c.a, c.b);
        for fi in self.shared_faces(a, b) {
            self.face_alive[fi] = false;
            for v in self.faces[fi] {
                self.vfaces[v].retain(|&x| x != fi);
            }
        }
        let moved = std::mem::take(&mut self.vfaces[b]);
        for fi in moved {
            for v in self.faces[fi].iter_mut() {
                if *v == b {
                    *v = a;
                }
            }
            self.vfaces[a].push(fi);
        }
        self.vfaces[a].sort_unstable();
        self.pos[a] = c.target;
        let qb = self.quadric[b];
        self.quadric[a] += qb;
        self.boundary[a] |= self.boundary[b];
        self.alive[b] = false;
        self.stamp[a] += 1;
    }

    fn push_edges_of(&self, v: usize, heap: &mut BinaryHeap<Candidate>) {
        for u in self.neighbors(v) {
            heap.push(self.candidate(v, u));
        }
    }
}

/// Collapses edges until `target_vertices` remain, or no legal collapse is left.
pub fn qem_simplify(mesh: &Mesh, target_vertices: usize) -> Result<Simplified> {
    qem_simplify_with(mesh, target_vertices, &SimplifyOptions::default())
}

pub fn qem_simplify_with(mesh: &Mesh, target_vertices: usize, opts: &SimplifyOptions) -> Result<Simplified> {
    let n = mesh.vertex_count();
    if target_vertices < 4 || target_vertices > n {
        return Err(Error::invalid(format!(
            "simplification target {target_vertices} outside 4..={n}"
        )));
    }
    let mut dec = Decimator::new(mesh, *opts)?;
    let mut heap = BinaryHeap::new();
    for e in mesh.edges() {
        heap.push(dec.candidate(e[0], e[1]));
    }

    let mut remaining = n;
    let mut costs = Vec::new();
    while remaining > target_vertices {
        let Some(c) = heap.pop() else { break };
        if !dec.is_current(&c) || !dec.is_legal(&c) {
            continue;
        }
        dec.collapse(&c);
        remaining -= 1;
        costs.push(c.cost);
        // Legality around the one-ring may have changed too.
        let ring = dec.neighbors(c.a);
        for &u in &ring {
            dec.stamp[u] += 1;
        }
        dec.push_edges_of(c.a, &mut heap);
        for &u in &ring {
            dec.push_edges_of(u, &mut heap);
        }
    }

    let mut remap = vec![usize::MAX; n];
    let mut kept = Vec::with_capacity(remaining);
    let mut vertices = Vec::with_capacity(remaining);
    for v in 0..n {
        if dec.alive[v] {
            remap[v] = kept.len();
            kept.push(v);
            vertices.push(dec.pos[v]);
        }
    }
    let faces: Vec<[usize; 3]> = dec
        .faces
        .iter()
        .zip(&dec.face_alive)
        .filter(|(_, &alive)| alive)
        .map(|(f, _)| [remap[f[0]], remap[f[1]], remap[f[2]]])
        .collect();
    let reached_target = remaining == target_vertices;
    if !reached_target {
        log::warn!("simplification stopped at {remaining} vertices (target {target_vertices})");
    }
    Ok(Simplified {
        mesh: Mesh::new(vertices, faces)?,
        kept,
        reached_target,
        collapse_costs: costs,
    })
}

/// Vertex positions of the mesh simplified to `round(ratio · n)` vertices.
pub fn simplified_targets(mesh: &Mesh, ratio: f64) -> Result<Vec<Vec3>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("simplification ratio {ratio} outside (0, 1]")));
    }
    let target = (ratio * mesh.vertex_count() as f64).round() as usize;
    Ok(qem_simplify(mesh, target)?.mesh.vertices().to_vec())
}

/// Positions of the mesh simplified to exactly `target` vertices.
pub fn simplified_to(mesh: &Mesh, target: usize) -> Result<Vec<Vec3>> {
    Ok(qem_simplify(mesh, target.min(mesh.vertex_count()))?.mesh.vertices().to_vec())
}
