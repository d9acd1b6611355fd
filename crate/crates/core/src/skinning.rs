//! Rigid transforms, Euler conversion, loose/tight composition and
//! anchor-driven linear blend skinning, in plain and taped form.

use std::sync::Arc;

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::autodiff::{Function, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{nearest, Vec3};

pub type Mat3 = Matrix3<f64>;

pub const DEFAULT_TIGHT_THRESHOLD: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn identity() -> Self {
        RigidTransform::new(Mat3::identity(), Vec3::zeros())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn then(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `RᵀR = I` and `det R = 1` within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        err <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = self.rotation[(r, c)];
            }
            out[9 + r] = self.translation[r];
        }
        out
    }

    pub fn from_slice(v: &[f64]) -> RigidTransform {
        assert!(v.len() >= 12, "rigid transform needs 12 values");
        RigidTransform::new(Mat3::from_row_slice(&v[..9]), Vec3::new(v[9], v[10], v[11]))
    }
}

fn rx(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn ry(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rz(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drx(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn dry(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drz(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Intrinsic XYZ: `R = Rx(θx)·Ry(θy)·Rz(θz)`.
pub fn euler_to_rotation(angles: [f64; 3]) -> Mat3 {
    rx(angles[0]) * ry(angles[1]) * rz(angles[2])
}

/// Inverse of [`euler_to_rotation`] for `|θy| < π/2`.
pub fn rotation_to_euler(r: &Mat3) -> [f64; 3] {
    let y = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let x = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let z = (-r[(0, 1)]).atan2(r[(0, 0)]);
    [x, y, z]
}

/// Rotation from an axis-angle vector.
pub fn axis_angle_to_rotation(w: &Vec3) -> Mat3 {
    let angle = w.norm();
    if angle < 1e-15 {
        return Mat3::identity();
    }
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*w), angle).matrix()
}

/// Loose anchors move relative to the root joint:
/// `R = R_g·R_n`, `T = R_g·(T_n − R_n·J) + J`.
pub fn compose_loose(local: &RigidTransform, r_global: &Mat3, j_root: &Vec3) -> RigidTransform {
    RigidTransform::new(
        r_global * local.rotation,
        r_global * (local.translation - local.rotation * j_root) + j_root,
    )
}

/// Tight anchors are an increment on the nearest body vertex transform:
/// `R = R_b·R_n`, `T = R_b·T_n + T_b`.
pub fn compose_tight(local: &RigidTransform, body: &RigidTransform) -> RigidTransform {
    body.then(local)
}

fn check_lbs_inputs(template: usize, displacements: usize, transforms: usize, anchors: &AnchorSet) -> Result<()> {
    if displacements != template || anchors.vertex_anchor_indices.len() != template || transforms != anchors.count() {
        return Err(Error::Shape {
            op: "lbs",
            detail: format!(
                "{template} template vertices, {displacements} displacements, {transforms} transforms, anchor set {}×{}",
                anchors.vertex_anchor_indices.len(),
                anchors.count()
            ),
        });
    }
    Ok(())
}

/// `v_m = Σ_n w_mn (R_n (v_m + D_m) + T_n)` over each vertex's anchors.
pub fn lbs(template: &[Vec3], displacements: &[Vec3], transforms: &[RigidTransform], anchors: &AnchorSet) -> Result<Vec<Vec3>> {
    check_lbs_inputs(template.len(), displacements.len(), transforms.len(), anchors)?;
    let weights = anchors.blend_weights();
    Ok(template
        .iter()
        .zip(displacements)
        .enumerate()
        .map(|(m, (v, d))| {
            let x = v + d;
            anchors.vertex_anchor_indices[m]
                .iter()
                .zip(&weights[m])
                .fold(Vec3::zeros(), |acc, (&a, w)| acc + transforms[a].apply(&x) * *w)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnchorKind {
    Loose,
    Tight { body_vertex: usize },
}

/// Per-anchor composition strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorStrategy {
    pub kinds: Vec<AnchorKind>,
}

/// Per-frame inputs needed to compose anchor transforms.
#[derive(Clone, Copy, Debug)]
pub struct FrameBasis<'a> {
    pub r_global: &'a Mat3,
    pub j_root: &'a Vec3,
    pub translation: &'a Vec3,
    pub body_transforms: Option<&'a [RigidTransform]>,
}

/// Per-row base of a composed transform:
/// `R = B·R_n`, `T = B·(T_n − R_n·pivot) + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComposeBase {
    pub rotation: Mat3,
    pub pivot: Vec3,
    pub offset: Vec3,
}

impl ComposeBase {
    pub fn apply(&self, local: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * local.rotation,
            self.rotation * (local.translation - local.rotation * self.pivot) + self.offset,
        )
    }
}

impl AnchorStrategy {
    pub fn all_loose(n: usize) -> Self {
        AnchorStrategy {
            kinds: vec![AnchorKind::Loose; n],
        }
    }

    /// Tight when the anchor lies within `threshold` of the rest body surface
    /// vertices; the nearest vertex index is frozen.
    pub fn classify(anchor_positions: &[Vec3], body_rest: &[Vec3], threshold: f64) -> Self {
        AnchorStrategy {
            kinds: anchor_positions
                .iter()
                .map(|p| match nearest(p, body_rest) {
                    Some((i, d)) if d < threshold => AnchorKind::Tight { body_vertex: i },
                    _ => AnchorKind::Loose,
                })
                .collect(),
        }
    }

    pub fn tight_count(&self) -> usize {
        self.kinds.iter().filter(|k| matches!(k, AnchorKind::Tight { .. })).count()
    }

    pub fn validate(&self, anchors: usize, body_vertices: usize) -> Result<()> {
        if self.kinds.len() != anchors {
            return Err(Error::Schema(format!("strategy has {} entries for {anchors} anchors", self.kinds.len())));
        }
        for (a, k) in self.kinds.iter().enumerate() {
            if let AnchorKind::Tight { body_vertex } = k {
                if *body_vertex >= body_vertices {
                    return Err(Error::Schema(format!("tight anchor {a} references body vertex {body_vertex} of {body_vertices}")));
                }
            }
        }
        Ok(())
    }

    /// Composition bases for one frame. Loose anchors also carry the root
    /// translation so that zero local transforms follow the body rigidly.
    pub fn bases(&self, frame: &FrameBasis<'_>) -> Result<Vec<ComposeBase>> {
        self.kinds
            .iter()
            .map(|k| match k {
                AnchorKind::Loose => Ok(ComposeBase {
                    rotation: *frame.r_global,
                    pivot: *frame.j_root,
                    offset: frame.j_root + frame.translation,
                }),
                AnchorKind::Tight { body_vertex } => {
                    let body = nearest_body_transform(*body_vertex, frame.body_transforms)?;
                    Ok(ComposeBase {
                        rotation: body.rotation,
                        pivot: Vec3::zeros(),
                        offset: body.translation,
                    })
                }
            })
            .collect()
    }
}

/// Body transform for a tight anchor, given its frozen rest-nearest vertex.
pub fn nearest_body_transform(body_vertex: usize, body_transforms: Option<&[RigidTransform]>) -> Result<RigidTransform> {
    let transforms = body_transforms.ok_or_else(|| {
        Error::invalid("motion data has no per-vertex body transforms; tight anchors need them (use loose-only mode)")
    })?;
    transforms
        .get(body_vertex)
        .copied()
        .ok_or_else(|| Error::invalid(format!("body vertex {body_vertex} has no transform ({} supplied)", transforms.len())))
}

/// Looks up the rest-nearest body vertex of `anchor` and returns its transform.
pub fn nearest_body_transform_for(anchor: &Vec3, body_rest: &[Vec3], body_transforms: Option<&[RigidTransform]>) -> Result<RigidTransform> {
    let (i, _) = nearest(anchor, body_rest).ok_or_else(|| Error::invalid("empty body mesh"))?;
    nearest_body_transform(i, body_transforms)
}

// ---------------------------------------------------------------------------
// Taped operations

/// `N × 3` Euler angles to `N × 9` row-major rotations.
pub struct EulerRotations;

impl EulerRotations {
    pub fn forward(angles: &[f64]) -> Vec<f64> {
        angles
            .chunks_exact(3)
            .flat_map(|a| {
                let r = euler_to_rotation([a[0], a[1], a[2]]);
                (0..9).map(move |i| r[(i / 3, i % 3)])
            })
            .collect()
    }
}

impl Function for EulerRotations {
    fn name(&self) -> &'static str {
        "euler_rotations"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let angles = inputs[0].data();
        let mut out = vec![0.0; angles.len()];
        for (n, a) in angles.chunks_exact(3).enumerate() {
            let (x, y, z) = (rx(a[0]), ry(a[1]), rz(a[2]));
            let gm = Mat3::from_row_slice(&g[9 * n..9 * n + 9]);
            let parts = [drx(a[0]) * y * z, x * dry(a[1]) * z, x * y * drz(a[2])];
            for (k, d) in parts.iter().enumerate() {
                out[3 * n + k] = gm.component_mul(d).sum();
            }
        }
        vec![Some(out)]
    }
}

pub fn euler_rotations_var(tape: &mut Tape, angles: Var) -> Result<Var> {
    let s = tape.shape(angles);
    if s.cols != 3 {
        return Err(Error::Shape {
            op: "euler_rotations",
            detail: format!("angles {s}, expected [N, 3]"),
        });
    }
    let out = EulerRotations::forward(tape.value(angles).data());
    Ok(tape.custom(&[angles], Tensor::from_vec(s.rows, 9, out), Box::new(EulerRotations)))
}

/// Applies per-row [`ComposeBase`]s to local rotations (`R × 9`) and
/// translations (`R × 3`), producing `R × 12` transforms.
pub struct ComposeTransforms {
    pub bases: Arc<Vec<ComposeBase>>,
}

impl ComposeTransforms {
    pub fn forward(&self, rot: &[f64], trans: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.bases.len() * 12);
        for (i, b) in self.bases.iter().enumerate() {
            let local = RigidTransform::new(
                Mat3::from_row_slice(&rot[9 * i..9 * i + 9]),
                Vec3::new(trans[3 * i], trans[3 * i + 1], trans[3 * i + 2]),
            );
            out.extend_from_slice(&b.apply(&local).to_array());
        }
        out
    }
}

impl Function for ComposeTransforms {
    fn name(&self) -> &'static str {
        "compose_transforms"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let rows = self.bases.len();
        let mut drot = vec![0.0; rows * 9];
        let mut dtrans = vec![0.0; rows * 3];
        for (i, b) in self.bases.iter().enumerate() {
            let gr = Mat3::from_row_slice(&g[12 * i..12 * i + 9]);
            let gt = Vec3::new(g[12 * i + 9], g[12 * i + 10], g[12 * i + 11]);
            let bt = b.rotation.transpose();
            let bgt = bt * gt;
            let d = bt * gr - bgt * b.pivot.transpose();
            for k in 0..9 {
                drot[9 * i + k] = d[(k / 3, k % 3)];
            }
            dtrans[3 * i..3 * i + 3].copy_from_slice(bgt.as_slice());
        }
        vec![needs[0].then_some(drot), needs[1].then_some(dtrans)]
    }
}

pub fn compose_transforms_var(tape: &mut Tape, rot: Var, trans: Var, bases: &Arc<Vec<ComposeBase>>) -> Result<Var> {
    let (sr, st) = (tape.shape(rot), tape.shape(trans));
    if sr.rows != bases.len() || st.rows != bases.len() || sr.cols != 9 || st.cols != 3 {
        return Err(Error::Shape {
            op: "compose_transforms",
            detail: format!("rotations {sr}, translations {st}, {} bases", bases.len()),
        });
    }
    let f = ComposeTransforms { bases: bases.clone() };
    let out = f.forward(tape.value(rot).data(), tape.value(trans).data());
    Ok(tape.custom(&[rot, trans], Tensor::from_vec(bases.len(), 12, out), Box::new(f)))
}

/// Batched skinning over `frames` frames.
///
/// Inputs: points (`M × 3` shared across frames, or `frames·M × 3`),
/// transforms (`frames·N × 12`) and blend weights (`M × N′`, shared).
/// Output row `f·M + m` is `Σ_j w_mj (R_{f,a} x_fm + T_{f,a})` with
/// `a = indices[m][j]`.
pub struct Lbs {
    pub indices: Arc<Vec<Vec<usize>>>,
    pub frames: usize,
    pub anchors: usize,
    name: &'static str,
}

impl Lbs {
    fn point<'a>(&self, x: &'a [f64], f: usize, m: usize) -> &'a [f64] {
        let rows = x.len() / 3;
        let m_count = self.indices.len();
        let r = if rows == m_count { m } else { f * m_count + m };
        &x[3 * r..3 * r + 3]
    }

    pub fn forward(&self, x: &[f64], t: &[f64], w: &[f64]) -> Vec<f64> {
        let m_count = self.indices.len();
        let np = self.indices.first().map_or(0, Vec::len);
        let mut out = vec![0.0; self.frames * m_count * 3];
        for f in 0..self.frames {
            for (m, idx) in self.indices.iter().enumerate() {
                let p = self.point(x, f, m);
                let o = &mut out[3 * (f * m_count + m)..3 * (f * m_count + m) + 3];
                for (j, &a) in idx.iter().enumerate() {
                    let tr = &t[12 * (f * self.anchors + a)..12 * (f * self.anchors + a) + 12];
                    let wj = w[m * np + j];
                    for r in 0..3 {
                        o[r] += wj * (tr[3 * r] * p[0] + tr[3 * r + 1] * p[1] + tr[3 * r + 2] * p[2] + tr[9 + r]);
                    }
                }
            }
        }
        out
    }
}

impl Function for Lbs {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, t, w) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let m_count = self.indices.len();
        let np = self.indices.first().map_or(0, Vec::len);
        let shared = x.len() / 3 == m_count;
        let mut dx = vec![0.0; x.len()];
        let mut dt = vec![0.0; t.len()];
        let mut dw = vec![0.0; w.len()];
        for f in 0..self.frames {
            for (m, idx) in self.indices.iter().enumerate() {
                let p = self.point(x, f, m);
                let row = f * m_count + m;
                let gm = &g[3 * row..3 * row + 3];
                let xr = if shared { m } else { row };
                for (j, &a) in idx.iter().enumerate() {
                    let base = 12 * (f * self.anchors + a);
                    let tr = &t[base..base + 12];
                    let wj = w[m * np + j];
                    let mut dot = 0.0;
                    for r in 0..3 {
                        let y = tr[3 * r] * p[0] + tr[3 * r + 1] * p[1] + tr[3 * r + 2] * p[2] + tr[9 + r];
                        dot += gm[r] * y;
                        for c in 0..3 {
                            dt[base + 3 * r + c] += wj * gm[r] * p[c];
                            dx[3 * xr + c] += wj * tr[3 * r + c] * gm[r];
                        }
                        dt[base + 9 + r] += wj * gm[r];
                    }
                    dw[m * np + j] += dot;
                }
            }
        }
        vec![needs[0].then_some(dx), needs[1].then_some(dt), needs[2].then_some(dw)]
    }
}

fn lbs_checked(tape: &mut Tape, points: Var, transforms: Var, weights: Var, indices: &Arc<Vec<Vec<usize>>>, name: &'static str) -> Result<Var> {
    let (sx, st, sw) = (tape.shape(points), tape.shape(transforms), tape.shape(weights));
    let m = indices.len();
    let np = indices.first().map_or(0, Vec::len);
    let bad = |detail: String| Error::Shape { op: name, detail };
    if sx.cols != 3 || st.cols != 12 || sw.rows != m || sw.cols != np || m == 0 {
        return Err(bad(format!("points {sx}, transforms {st}, weights {sw}, {m} index rows")));
    }
    let max_anchor = indices.iter().flatten().copied().max().unwrap_or(0);
    // Frame count follows from the points when they are per-frame, otherwise
    // from the transforms under the assumption that every anchor is present.
    let (frames, anchors) = if sx.rows != m {
        if sx.rows % m != 0 {
            return Err(bad(format!("points {sx} not a multiple of {m} vertices")));
        }
        let f = sx.rows / m;
        if st.rows % f != 0 {
            return Err(bad(format!("transforms {st} not divisible by {f} frames")));
        }
        (f, st.rows / f)
    } else {
        let n = max_anchor + 1;
        if st.rows % n != 0 {
            return Err(bad(format!("transforms {st} not a multiple of {n} anchors")));
        }
        (st.rows / n, n)
    };
    if max_anchor >= anchors {
        return Err(bad(format!("anchor index {max_anchor} out of {anchors}")));
    }
    let f = Lbs {
        indices: indices.clone(),
        frames,
        anchors,
        name,
    };
    let out = f.forward(tape.value(points).data(), tape.value(transforms).data(), tape.value(weights).data());
    Ok(tape.custom(&[points, transforms, weights], Tensor::from_vec(frames * m, 3, out), Box::new(f)))
}

/// Taped skinning; see [`Lbs`] for the layout.
pub fn lbs_var(tape: &mut Tape, points: Var, transforms: Var, weights: Var, indices: &Arc<Vec<Vec<usize>>>) -> Result<Var> {
    lbs_checked(tape, points, transforms, weights, indices, "lbs")
}

/// Applies transform `f·N + n` to point `n` (shared `N × 3` or per-frame
/// `frames·N × 3`), giving `frames·N × 3`.
pub fn transform_points_var(tape: &mut Tape, points: Var, transforms: Var) -> Result<Var> {
    let n = tape.shape(points).rows;
    let st = tape.shape(transforms);
    let per_frame = n != 0 && st.rows % n == 0 && tape.shape(points).rows != st.rows;
    let anchors = if per_frame || st.rows == n { n } else { st.rows };
    let indices = Arc::new((0..anchors).map(|i| vec![i]).collect::<Vec<_>>());
    let ones = tape.constant(Tensor::filled(anchors, 1, 1.0));
    lbs_checked(tape, points, transforms, ones, &indices, "transform_points")
}

/// Blend weights as an `M × N′` tensor.
pub fn weights_tensor(anchors: &AnchorSet) -> Tensor {
    crate::anchors::nested_to_tensor(&anchors.blend_weights())
}
