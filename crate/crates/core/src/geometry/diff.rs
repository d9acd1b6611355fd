//! Differentiable mesh operators for the autodiff tape.

use std::sync::Arc;

use crate::autodiff::{Function, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::VertexAdjacency;

/// Uniform Laplacian of an `M × 3` position tensor, or of `F` stacked
/// frames (`F·M × 3`).
pub struct UniformLaplacian {
    pub adjacency: Arc<VertexAdjacency>,
}

impl UniformLaplacian {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let adj = &self.adjacency;
        let mut out = vec![0.0; x.len()];
        let stride = 3 * adj.len();
        for (x, out) in x.chunks_exact(stride).zip(out.chunks_exact_mut(stride)) {
            for i in 0..adj.len() {
                let nb = adj.neighbors(i);
                if nb.is_empty() {
                    continue;
                }
                let w = 1.0 / nb.len() as f64;
                for k in 0..3 {
                    let mean: f64 = nb.iter().map(|&j| x[3 * j + k]).sum::<f64>() * w;
                    out[3 * i + k] = mean - x[3 * i + k];
                }
            }
        }
        out
    }
}

impl Function for UniformLaplacian {
    fn name(&self) -> &'static str {
        "laplacian"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let adj = &self.adjacency;
        let mut d = vec![0.0; g.len()];
        let stride = 3 * adj.len();
        for (g, d) in g.chunks_exact(stride).zip(d.chunks_exact_mut(stride)) {
            for i in 0..adj.len() {
                let nb = adj.neighbors(i);
                if nb.is_empty() {
                    continue;
                }
                let w = 1.0 / nb.len() as f64;
                for k in 0..3 {
                    let gi = g[3 * i + k];
                    d[3 * i + k] -= gi;
                    for &j in nb {
                        d[3 * j + k] += gi * w;
                    }
                }
            }
        }
        vec![Some(d)]
    }
}

pub fn laplacian_var(tape: &mut Tape, x: Var, adjacency: &Arc<VertexAdjacency>) -> Result<Var> {
    let s = tape.shape(x);
    if s.cols != 3 || adjacency.is_empty() || s.rows % adjacency.len() != 0 {
        return Err(Error::Shape {
            op: "laplacian",
            detail: format!("{} for {} vertices", s, adjacency.len()),
        });
    }
    let f = UniformLaplacian {
        adjacency: adjacency.clone(),
    };
    let out = Tensor::from_vec(s.rows, 3, f.forward(tape.value(x).data()));
    Ok(tape.custom(&[x], out, Box::new(f)))
}

/// Per-vertex sum of unnormalised face normals `(b − a) × (c − a)`, applied
/// to each block of `vertices` rows.
pub struct FaceNormalSum {
    pub faces: Arc<Vec<[usize; 3]>>,
    pub vertices: usize,
}

fn sub3(x: &[f64], i: usize, j: usize) -> [f64; 3] {
    [x[3 * i] - x[3 * j], x[3 * i + 1] - x[3 * j + 1], x[3 * i + 2] - x[3 * j + 2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl FaceNormalSum {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let stride = 3 * self.vertices;
        for (x, out) in x.chunks_exact(stride).zip(out.chunks_exact_mut(stride)) {
            for f in self.faces.iter() {
                let n = cross(sub3(x, f[1], f[0]), sub3(x, f[2], f[0]));
                for &v in f {
                    for k in 0..3 {
                        out[3 * v + k] += n[k];
                    }
                }
            }
        }
        out
    }
}

impl Function for FaceNormalSum {
    fn name(&self) -> &'static str {
        "face_normal_sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let mut d = vec![0.0; x.len()];
        let stride = 3 * self.vertices;
        for ((x, g), d) in x.chunks_exact(stride).zip(g.chunks_exact(stride)).zip(d.chunks_exact_mut(stride)) {
            for f in self.faces.iter() {
                let mut gf = [0.0; 3];
                for &v in f {
                    for k in 0..3 {
                        gf[k] += g[3 * v + k];
                    }
                }
                let e1 = sub3(x, f[1], f[0]);
                let e2 = sub3(x, f[2], f[0]);
                // ∂(G·(e1 × e2))/∂e1 = e2 × G, ∂/∂e2 = G × e1
                let d1 = cross(e2, gf);
                let d2 = cross(gf, e1);
                for k in 0..3 {
                    d[3 * f[1] + k] += d1[k];
                    d[3 * f[2] + k] += d2[k];
                    d[3 * f[0] + k] -= d1[k] + d2[k];
                }
            }
        }
        vec![Some(d)]
    }
}

/// `vertices` is the per-frame vertex count; `x` holds whole frames.
pub fn face_normal_sum_var(tape: &mut Tape, x: Var, faces: &Arc<Vec<[usize; 3]>>, vertices: usize) -> Result<Var> {
    let s = tape.shape(x);
    if s.cols != 3 || vertices == 0 || s.rows % vertices != 0 || faces.iter().flatten().any(|&i| i >= vertices) {
        return Err(Error::Shape {
            op: "face_normal_sum",
            detail: format!("{} positions for face indices", s),
        });
    }
    let f = FaceNormalSum {
        faces: faces.clone(),
        vertices,
    };
    let out = Tensor::from_vec(s.rows, 3, f.forward(tape.value(x).data()));
    Ok(tape.custom(&[x], out, Box::new(f)))
}

/// Differentiable area-weighted unit vertex normals. Vertices without faces
/// get a zero row.
pub fn vertex_normals_var(tape: &mut Tape, x: Var, faces: &Arc<Vec<[usize; 3]>>, vertices: usize) -> Result<Var> {
    let sum = face_normal_sum_var(tape, x, faces, vertices)?;
    Ok(tape.normalize_rows(sum))
}
