//! Indexed triangle meshes and the geometric queries built on them.

mod diff;
mod obj;

pub use diff::{face_normal_sum_var, laplacian_var, vertex_normals_var, FaceNormalSum, UniformLaplacian};
pub use obj::{load_obj, parse_obj, save_obj, write_obj, ObjFile};

use std::collections::BTreeSet;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Indexed triangle mesh. Edges are derived from the faces and stored once
/// per undirected pair, sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i >= n) {
                return Err(Error::invalid(format!(
                    "face {fi} references vertex {bad}, mesh has {n} vertices"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invalid(format!("face {fi} is degenerate: {f:?}")));
            }
        }
        let edges = derive_edges(&faces);
        Ok(Mesh {
            vertices,
            faces,
            edges,
        })
    }

    pub fn empty() -> Self {
        Mesh {
            vertices: Vec::new(),
            faces: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Same connectivity with new vertex positions.
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<Mesh> {
        if positions.len() != self.vertices.len() {
            return Err(Error::invalid(format!(
                "expected {} positions, got {}",
                self.vertices.len(),
                positions.len()
            )));
        }
        Ok(Mesh {
            vertices: positions,
            faces: self.faces.clone(),
            edges: self.edges.clone(),
        })
    }

    pub fn adjacency(&self) -> VertexAdjacency {
        VertexAdjacency::from_edges(self.vertices.len(), &self.edges)
    }

    /// Edges used by exactly one face.
    pub fn boundary_edges(&self) -> Vec<[usize; 2]> {
        let mut count = std::collections::BTreeMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry([a.min(b), a.max(b)]).or_insert(0usize) += 1;
            }
        }
        count.into_iter().filter(|(_, c)| *c == 1).map(|(e, _)| e).collect()
    }

    pub fn vertex_rows(&self) -> Vec<[f64; 3]> {
        self.vertices.iter().map(|v| [v.x, v.y, v.z]).collect()
    }
}

fn derive_edges(faces: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut set = BTreeSet::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            set.insert([a.min(b), a.max(b)]);
        }
    }
    set.into_iter().collect()
}

/// One-ring neighbours per vertex, sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VertexAdjacency {
    neighbors: Vec<Vec<usize>>,
}

impl VertexAdjacency {
    pub fn from_edges(vertex_count: usize, edges: &[[usize; 2]]) -> Self {
        let mut neighbors = vec![Vec::new(); vertex_count];
        for &[a, b] in edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        VertexAdjacency { neighbors }
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Result of [`vertex_normals`]: unit normals plus the vertices that had no
/// incident face and received the `(0, 0, 1)` fallback.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexNormals {
    pub normals: Vec<Vec3>,
    pub isolated: Vec<usize>,
}

/// Area-weighted vertex normals (sum of unnormalised face normals, then
/// normalised).
pub fn vertex_normals(mesh: &Mesh) -> VertexNormals {
    normals_from(mesh.faces(), mesh.vertices())
}

pub fn normals_from(faces: &[[usize; 3]], positions: &[Vec3]) -> VertexNormals {
    let mut acc = vec![Vec3::zeros(); positions.len()];
    for f in faces {
        let (a, b, c) = (positions[f[0]], positions[f[1]], positions[f[2]]);
        let n = (b - a).cross(&(c - a));
        for &i in f {
            acc[i] += n;
        }
    }
    let mut isolated = Vec::new();
    let normals = acc
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 1e-300 {
                n / len
            } else {
                isolated.push(i);
                Vec3::new(0.0, 0.0, 1.0)
            }
        })
        .collect();
    VertexNormals { normals, isolated }
}

/// Uniform (umbrella) Laplacian: mean of the one-ring minus the vertex.
/// Isolated vertices map to zero.
pub fn graph_laplacian(mesh: &Mesh, positions: &[Vec3]) -> Result<Vec<Vec3>> {
    if positions.len() != mesh.vertex_count() {
        return Err(Error::invalid(format!(
            "laplacian: {} positions for {} vertices",
            positions.len(),
            mesh.vertex_count()
        )));
    }
    Ok(uniform_laplacian(&mesh.adjacency(), positions))
}

pub fn uniform_laplacian(adj: &VertexAdjacency, positions: &[Vec3]) -> Vec<Vec3> {
    (0..positions.len())
        .map(|i| {
            let nb = adj.neighbors(i);
            if nb.is_empty() {
                return Vec3::zeros();
            }
            let mean = nb.iter().fold(Vec3::zeros(), |s, &j| s + positions[j]) / nb.len() as f64;
            mean - positions[i]
        })
        .collect()
}

/// Exact k nearest neighbours by brute force, ascending distance, ties by
/// lower index.
pub fn knn(query: &Vec3, points: &[Vec3], k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::invalid(format!("knn: k = {k} exceeds {} points", points.len())));
    }
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    d.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(d.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Index of the closest point; ties by lower index. `None` for an empty set.
pub fn nearest(query: &Vec3, points: &[Vec3]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = (p - query).norm_squared();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, d)| (i, d.sqrt()))
}

pub fn to_vec3(rows: &[[f64; 3]]) -> Vec<Vec3> {
    rows.iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
}

pub fn flatten(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub fn unflatten(data: &[f64]) -> Vec<Vec3> {
    data.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// `rows × cols` grid in the z = 0 plane with spacing `h`, two triangles per
/// cell, counter-clockwise seen from +z. Vertex `(r, c)` has index `r * cols + c`.
pub fn grid_mesh(rows: usize, cols: usize, h: f64) -> Mesh {
    let mut vertices = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            vertices.push(Vec3::new(c as f64 * h, r as f64 * h, 0.0));
        }
    }
    let mut faces = Vec::new();
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols.saturating_sub(1) {
            let i = r * cols + c;
            faces.push([i, i + 1, i + cols + 1]);
            faces.push([i, i + cols + 1, i + cols]);
        }
    }
    Mesh::new(vertices, faces).expect("grid mesh is valid")
}

#[cfg(test)]
mod tests;
