//! Training objectives and evaluation metrics.
//!
//! Every training loss uses mean reduction over vertices or anchors except the
//! anchor Chamfer term, which sums over both point sets. Plain functions work
//! on point lists; the `_var` variants build the same quantities on a tape
//! over stacked frames.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::anchors::{softmax, sparse_combine_frames_var, AnchorSet};
use crate::autodiff::{Axis, Function, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{laplacian_var, nearest, normals_from, uniform_laplacian, vertex_normals_var, Mesh, Vec3, VertexAdjacency};
use crate::skinning::{transform_points_var, RigidTransform};

/// Collision margin in metres.
pub const COLLISION_MARGIN: f64 = 0.002;
/// Below this offset length the direction penalty is zero.
pub const DIR_MIN_OFFSET: f64 = 1e-9;
/// STED temporal weight.
pub const STED_TEMPORAL_WEIGHT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1: 0.2,
            beta2: 1.0,
            gamma: 0.1,
            lambda1: 1.0,
            lambda2: 0.01,
            lambda3: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta1, self.beta2, self.gamma, self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Early,
    Late,
}

/// Scalar loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rec: f64,
    pub lap: f64,
    pub collision: f64,
    pub consis: f64,
    pub dir: f64,
    pub anchor: f64,
}

/// `rec + β₁·lap + λ₁·consis + λ₃·anchor`, plus `β₂·collision + λ₂·dir` in
/// the late stage.
pub fn total_loss(c: &LossComponents, w: &LossWeights, stage: Stage) -> f64 {
    let mut l = c.rec + w.beta1 * c.lap + w.lambda1 * c.consis + w.lambda3 * c.anchor;
    if stage == Stage::Late {
        l += w.beta2 * c.collision + w.lambda2 * c.dir;
    }
    l
}

fn count_check(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            detail: format!("{a} predicted vs {b} reference points"),
        });
    }
    Ok(())
}

pub fn loss_rec(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    count_check("loss_rec", pred.len(), gt.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).norm_squared()).sum::<f64>() / pred.len() as f64)
}

pub fn loss_lap(pred: &[Vec3], gt: &[Vec3], mesh: &Mesh) -> Result<f64> {
    count_check("loss_lap", pred.len(), gt.len())?;
    count_check("loss_lap", pred.len(), mesh.vertex_count())?;
    let adj = mesh.adjacency();
    let lp = uniform_laplacian(&adj, pred);
    let lg = uniform_laplacian(&adj, gt);
    loss_rec(&lp, &lg)
}

/// Nearest body vertex of every point, brute force.
pub fn nearest_body(points: &[Vec3], body: &[Vec3]) -> Result<Vec<usize>> {
    points
        .iter()
        .map(|p| nearest(p, body).map(|(i, _)| i).ok_or_else(|| Error::invalid("collision: empty body")))
        .collect()
}

/// `mean max(0, ε − (v − b)·n)²` with `b` the nearest body vertex.
pub fn loss_collision(pred: &[Vec3], body: &[Vec3], body_normals: &[Vec3], eps: f64) -> Result<f64> {
    count_check("loss_collision", body.len(), body_normals.len())?;
    let near = nearest_body(pred, body)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred
        .iter()
        .zip(&near)
        .map(|(v, &b)| (eps - (v - body[b]).dot(&body_normals[b])).max(0.0).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Transformed anchors and their targets for one frame.
#[derive(Clone, Debug)]
pub struct TransformedAnchors {
    pub p_g: Vec<Vec3>,
    pub p_tgt: Vec<Vec3>,
    pub n_g: Vec<Vec3>,
    pub n_tgt: Vec<Vec3>,
}

fn weighted_unit(weights: &[f64], idx: &[usize], values: &[Vec3]) -> Vec3 {
    let s = idx.iter().zip(weights).fold(Vec3::zeros(), |acc, (&i, w)| acc + values[i] * *w);
    let n = s.norm();
    if n > 1e-12 {
        s / n
    } else {
        Vec3::zeros()
    }
}

/// `p_G = R p + T` per anchor; `p_tgt` is the same α-combination evaluated on
/// the ground truth, and the normals are α-weighted vertex normals of the
/// predicted and ground-truth meshes.
pub fn transformed_anchors(anchors: &AnchorSet, transforms: &[RigidTransform], pred: &Mesh, gt: &[Vec3]) -> Result<TransformedAnchors> {
    count_check("transformed_anchors", transforms.len(), anchors.count())?;
    count_check("transformed_anchors", gt.len(), pred.vertex_count())?;
    let pos = anchors.position_vecs();
    let n_pred = normals_from(pred.faces(), pred.vertices()).normals;
    let n_gt = normals_from(pred.faces(), gt).normals;
    let mut out = TransformedAnchors {
        p_g: Vec::new(),
        p_tgt: Vec::new(),
        n_g: Vec::new(),
        n_tgt: Vec::new(),
    };
    for (a, (alpha, idx)) in anchors.alpha.iter().zip(&anchors.neighbor_indices).enumerate() {
        let w = softmax(alpha);
        out.p_g.push(transforms[a].apply(&pos[a]));
        out.p_tgt.push(idx.iter().zip(&w).fold(Vec3::zeros(), |acc, (&i, wi)| acc + gt[i] * *wi));
        out.n_g.push(weighted_unit(&w, idx, &n_pred));
        out.n_tgt.push(weighted_unit(&w, idx, &n_gt));
    }
    Ok(out)
}

pub fn loss_consis(p_g: &[Vec3], p_tgt: &[Vec3], n_g: &[Vec3], n_tgt: &[Vec3], gamma: f64) -> Result<f64> {
    count_check("loss_consis", p_g.len(), p_tgt.len())?;
    count_check("loss_consis", n_g.len(), n_tgt.len())?;
    count_check("loss_consis", p_g.len(), n_g.len())?;
    if p_g.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = (0..p_g.len())
        .map(|i| (p_g[i] - p_tgt[i]).norm_squared() + gamma * (n_g[i] - n_tgt[i]).norm_squared())
        .sum();
    Ok(s / p_g.len() as f64)
}

pub fn loss_dir(p_g: &[Vec3], p_tgt: &[Vec3], n_tgt: &[Vec3]) -> Result<f64> {
    count_check("loss_dir", p_g.len(), p_tgt.len())?;
    count_check("loss_dir", p_g.len(), n_tgt.len())?;
    if p_g.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = (0..p_g.len())
        .map(|i| {
            let d = p_g[i] - p_tgt[i];
            let (dn, nn) = (d.norm(), n_tgt[i].norm());
            if dn < DIR_MIN_OFFSET || nn == 0.0 {
                0.0
            } else {
                1.0 - d.dot(&n_tgt[i]) / (dn * nn)
            }
        })
        .sum();
    Ok(s / p_g.len() as f64)
}

fn nearest_indices(from: &[f64], to: &[f64]) -> Vec<usize> {
    from.chunks_exact(3)
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in to.chunks_exact(3).enumerate() {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

fn chamfer_raw(a: &[f64], b: &[f64]) -> (f64, Vec<usize>, Vec<usize>) {
    let ab = nearest_indices(a, b);
    let ba = nearest_indices(b, a);
    let d = |x: &[f64], i: usize, y: &[f64], j: usize| (0..3).map(|c| (x[3 * i + c] - y[3 * j + c]).powi(2)).sum::<f64>();
    let s = ab.iter().enumerate().map(|(i, &j)| d(a, i, b, j)).sum::<f64>()
        + ba.iter().enumerate().map(|(j, &i)| d(b, j, a, i)).sum::<f64>();
    (s, ab, ba)
}

/// `Σ_a min_b ‖a − b‖² + Σ_b min_a ‖a − b‖²`.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer: empty point set"));
    }
    let fa: Vec<f64> = a.iter().flat_map(|p| p.iter().copied().collect::<Vec<_>>()).collect();
    let fb: Vec<f64> = b.iter().flat_map(|p| p.iter().copied().collect::<Vec<_>>()).collect();
    Ok(chamfer_raw(&fa, &fb).0)
}

pub fn loss_anchor_chamfer(anchors: &[Vec3], simplified: &[Vec3]) -> Result<f64> {
    chamfer(anchors, simplified)
}

/// Taped Chamfer distance; nearest pairs are fixed at forward time.
pub struct Chamfer {
    ab: Vec<usize>,
    ba: Vec<usize>,
}

impl Function for Chamfer {
    fn name(&self) -> &'static str {
        "chamfer"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let mut da = vec![0.0; a.len()];
        let mut db = vec![0.0; b.len()];
        let mut pair = |i: usize, j: usize| {
            for c in 0..3 {
                let d = 2.0 * g[0] * (a[3 * i + c] - b[3 * j + c]);
                da[3 * i + c] += d;
                db[3 * j + c] -= d;
            }
        };
        for (i, &j) in self.ab.iter().enumerate() {
            pair(i, j);
        }
        for (j, &i) in self.ba.iter().enumerate() {
            pair(i, j);
        }
        vec![needs[0].then_some(da), needs[1].then_some(db)]
    }
}

pub fn chamfer_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.cols != 3 || sb.cols != 3 || sa.rows == 0 || sb.rows == 0 {
        return Err(Error::Shape {
            op: "chamfer",
            detail: format!("{sa} and {sb}"),
        });
    }
    let (s, ab, ba) = chamfer_raw(tape.value(a).data(), tape.value(b).data());
    Ok(tape.custom(&[a, b], Tensor::scalar(s), Box::new(Chamfer { ab, ba })))
}

// ---------------------------------------------------------------------------
// Taped losses over stacked frames

fn mean_row_sq(tape: &mut Tape, d: Var) -> Var {
    let rows = tape.shape(d).rows.max(1);
    let sq = tape.square(d);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / rows as f64)
}

pub fn rec_var(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    Ok(mean_row_sq(tape, d))
}

/// `gt_laplacian` is the precomputed Laplacian of the ground truth frames.
pub fn lap_var(tape: &mut Tape, pred: Var, gt_laplacian: Var, adjacency: &Arc<VertexAdjacency>) -> Result<Var> {
    let lp = laplacian_var(tape, pred, adjacency)?;
    let d = tape.sub(lp, gt_laplacian)?;
    Ok(mean_row_sq(tape, d))
}

/// Collision hinge with per-row nearest body points and normals supplied as
/// constants (found on the current prediction, outside the graph).
pub fn collision_var(tape: &mut Tape, pred: Var, body_points: Var, body_normals: Var, eps: f64) -> Result<Var> {
    let d = tape.sub(pred, body_points)?;
    let dn = tape.mul(d, body_normals)?;
    let s = tape.sum_axis(dn, Axis::Cols);
    let m = tape.neg(s);
    let m = tape.add_scalar(m, eps);
    let h = tape.relu(m);
    let h = tape.square(h);
    Ok(tape.mean(h))
}

/// Taped transformed anchors and targets over `F` stacked frames.
#[derive(Clone, Copy, Debug)]
pub struct AnchorTerms {
    pub p_g: Var,
    pub p_tgt: Var,
    pub n_g: Var,
    pub n_tgt: Var,
}

pub struct AnchorGraphInputs<'a> {
    /// `N × 3` anchor positions on the template.
    pub positions: Var,
    /// `N × K` softmax(α).
    pub alpha_weights: Var,
    /// `F·N × 12` composed transforms.
    pub transforms: Var,
    /// `F·M × 3` predicted vertices.
    pub pred: Var,
    /// `F·M × 3` ground-truth vertices.
    pub gt: Var,
    pub neighbors: &'a Arc<Vec<Vec<usize>>>,
    pub faces: &'a Arc<Vec<[usize; 3]>>,
    pub vertices: usize,
    /// Treat targets and their normals as constants (supervision).
    pub detach_targets: bool,
}

pub fn anchor_terms_var(tape: &mut Tape, g: &AnchorGraphInputs<'_>) -> Result<AnchorTerms> {
    let p_g = transform_points_var(tape, g.positions, g.transforms)?;
    let p_tgt = sparse_combine_frames_var(tape, g.alpha_weights, g.gt, g.neighbors, g.vertices)?;
    let np = vertex_normals_var(tape, g.pred, g.faces, g.vertices)?;
    let ng = vertex_normals_var(tape, g.gt, g.faces, g.vertices)?;
    let n_g = sparse_combine_frames_var(tape, g.alpha_weights, np, g.neighbors, g.vertices)?;
    let n_g = tape.normalize_rows(n_g);
    let n_tgt = sparse_combine_frames_var(tape, g.alpha_weights, ng, g.neighbors, g.vertices)?;
    let n_tgt = tape.normalize_rows(n_tgt);
    let (p_tgt, n_tgt) = if g.detach_targets {
        (tape.detach(p_tgt), tape.detach(n_tgt))
    } else {
        (p_tgt, n_tgt)
    };
    Ok(AnchorTerms { p_g, p_tgt, n_g, n_tgt })
}

pub fn consis_var(tape: &mut Tape, t: &AnchorTerms, gamma: f64) -> Result<Var> {
    let dp = tape.sub(t.p_g, t.p_tgt)?;
    let lp = mean_row_sq(tape, dp);
    let dn = tape.sub(t.n_g, t.n_tgt)?;
    let ln = mean_row_sq(tape, dn);
    let ln = tape.scale(ln, gamma);
    tape.add(lp, ln)
}

pub fn dir_var(tape: &mut Tape, t: &AnchorTerms) -> Result<Var> {
    let d = tape.sub(t.p_g, t.p_tgt)?;
    let rows = tape.shape(d).rows;
    let mask: Vec<f64> = tape
        .value(d)
        .data()
        .chunks_exact(3)
        .map(|r| if (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt() < DIR_MIN_OFFSET { 0.0 } else { 1.0 })
        .collect();
    let mask = tape.constant(Tensor::from_vec(rows, 1, mask));
    let cos = tape.cosine_similarity(d, t.n_tgt)?;
    let one_minus = tape.neg(cos);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let masked = tape.mul(one_minus, mask)?;
    Ok(tape.mean(masked))
}

/// Graph handles of the loss components; absent terms contribute nothing.
#[derive(Clone, Copy, Debug)]
pub struct ComponentVars {
    pub rec: Var,
    pub lap: Option<Var>,
    pub collision: Option<Var>,
    pub consis: Option<Var>,
    pub dir: Option<Var>,
    pub anchor: Option<Var>,
}

/// Taped [`total_loss`]. In the early stage the collision and direction
/// terms are not connected to the result at all.
pub fn total_loss_var(tape: &mut Tape, c: &ComponentVars, w: &LossWeights, stage: Stage) -> Result<Var> {
    let mut terms = vec![(c.rec, 1.0)];
    let mut push = |v: Option<Var>, k: f64| {
        if let Some(v) = v {
            terms.push((v, k));
        }
    };
    push(c.lap, w.beta1);
    push(c.consis, w.lambda1);
    push(c.anchor, w.lambda3);
    if stage == Stage::Late {
        push(c.collision, w.beta2);
        push(c.dir, w.lambda2);
    }
    let mut total = c.rec;
    for &(v, k) in &terms[1..] {
        let s = tape.scale(v, k);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Metrics

fn seq_check(op: &'static str, pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<()> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape {
            op,
            detail: format!("{} predicted vs {} reference frames with matching vertex counts", pred.len(), gt.len()),
        });
    }
    Ok(())
}

/// Per-coordinate RMSE in millimetres.
pub fn metric_rmse(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    seq_check("metric_rmse", pred, gt)?;
    let (mut s, mut n) = (0.0, 0usize);
    for (a, b) in pred.iter().zip(gt) {
        for (p, q) in a.iter().zip(b) {
            s += (p - q).norm_squared();
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::invalid("metric_rmse: empty sequence"));
    }
    Ok((s / n as f64).sqrt() * 1000.0)
}

/// Number of garment vertices whose signed distance to the body, measured
/// along the normal of the nearest body vertex, is below `eps`.
pub fn penetration_count(pred: &[Vec3], body: &[Vec3], body_normals: &[Vec3], eps: f64) -> Result<usize> {
    count_check("penetration_count", body_normals.len(), body.len())?;
    let idx = nearest_body(pred, body)?;
    Ok(pred
        .iter()
        .zip(idx)
        .filter(|(v, b)| (*v - body[*b]).dot(&body_normals[*b]) < eps)
        .count())
}

/// Symmetric Hausdorff distance between two point sets, in the input unit.
pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("hausdorff: empty point set"));
    }
    let directed = |x: &[Vec3], y: &[Vec3]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
            .sqrt()
    };
    Ok(directed(a, b).max(directed(b, a)))
}

/// Frame-averaged Hausdorff distance in millimetres.
pub fn metric_hausdorff(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    seq_check("metric_hausdorff", pred, gt)?;
    if pred.is_empty() {
        return Err(Error::invalid("metric_hausdorff: empty sequence"));
    }
    let mut s = 0.0;
    for (a, b) in pred.iter().zip(gt) {
        s += hausdorff(a, b)?;
    }
    Ok(s / pred.len() as f64 * 1000.0)
}

/// Spatio-temporal edge difference over relative edge-length errors.
pub fn metric_sted(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], mesh: &Mesh) -> Result<f64> {
    seq_check("metric_sted", pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::invalid("metric_sted: needs at least 2 frames"));
    }
    let edges = mesh.edges();
    if edges.is_empty() {
        return Err(Error::invalid("metric_sted: mesh has no edges"));
    }
    let rel: Vec<Vec<f64>> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            edges
                .iter()
                .map(|&[i, j]| {
                    let lg = (g[i] - g[j]).norm();
                    let lp = (p[i] - p[j]).norm();
                    if lg > 0.0 {
                        (lp - lg) / lg
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let count = (rel.len() * edges.len()) as f64;
    let spatial = (rel.iter().flatten().map(|r| r * r).sum::<f64>() / count).sqrt();
    let tcount = ((rel.len() - 1) * edges.len()) as f64;
    let temporal = (rel
        .windows(2)
        .flat_map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| (a - b).powi(2)))
        .sum::<f64>()
        / tcount)
        .sqrt();
    Ok((spatial * spatial + STED_TEMPORAL_WEIGHT * temporal * temporal).sqrt())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::anchors::nested_to_tensor;
    use crate::autodiff::check::{check_gradients, random_tensor, CheckOptions};
    use crate::geometry::grid_mesh;
    use crate::skinning::euler_to_rotation;

    fn rv(rng: &mut impl Rng) -> Vec3 {
        Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn rec_cases() {
        let a = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::zeros()];
        assert_eq!(loss_rec(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_rec(&[Vec3::x()], &[Vec3::zeros()]).unwrap(), 1.0);
        let gt = vec![Vec3::zeros(), Vec3::x()];
        let swapped = vec![Vec3::x(), Vec3::zeros()];
        assert!(loss_rec(&swapped, &gt).unwrap() > 0.0);
        assert!(loss_rec(&a, &a[..1]).is_err());
    }

    #[test]
    fn lap_cases() {
        // Fan: centre 0 with ring 1..=4, triangles around the centre.
        let ring = [Vec3::x(), Vec3::y(), -Vec3::x(), -Vec3::y()];
        let mut verts = vec![Vec3::zeros()];
        verts.extend_from_slice(&ring);
        let faces = vec![[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]];
        let mesh = Mesh::new(verts.clone(), faces).unwrap();
        assert_eq!(loss_lap(&verts, &verts, &mesh).unwrap(), 0.0);
        let shifted: Vec<Vec3> = verts.iter().map(|v| v + Vec3::new(0.3, -1.0, 2.0)).collect();
        assert!(loss_lap(&shifted, &verts, &mesh).unwrap() < 1e-28);

        // Lift the centre by h: Δ0 = (0,0,-h); each ring vertex has 3
        // neighbours (centre and two ring neighbours), so Δ gains z = h/3.
        let h = 0.6;
        let mut lifted = verts.clone();
        lifted[0].z = h;
        let want = (h * h + 4.0 * (h / 3.0).powi(2)) / 5.0;
        assert!((loss_lap(&lifted, &verts, &mesh).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn collision_cases() {
        let body = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)];
        let normals = vec![Vec3::z(); 2];
        let eps = COLLISION_MARGIN;
        let outside = vec![Vec3::new(0.1, 0.0, 0.01), Vec3::new(0.9, 0.0, 0.002)];
        assert_eq!(loss_collision(&outside, &body, &normals, eps).unwrap(), 0.0);
        let d = 0.005;
        let got = loss_collision(&[Vec3::new(0.0, 0.0, -d)], &body, &normals, eps).unwrap();
        assert!((got - (eps + d).powi(2)).abs() < 1e-18);
        let mut last = 0.0;
        for k in 0..20 {
            let v = loss_collision(&[Vec3::new(0.0, 0.0, 0.01 - 0.001 * k as f64)], &body, &normals, eps).unwrap();
            assert!(v >= last);
            last = v;
        }
        assert!(loss_collision(&outside, &[], &[], eps).is_err());
    }

    #[test]
    fn consis_and_dir_cases() {
        let p = vec![Vec3::new(0.1, 0.2, 0.3)];
        let n = vec![Vec3::z()];
        assert_eq!(loss_consis(&p, &p, &n, &n, 0.1).unwrap(), 0.0);
        assert!((loss_consis(&p, &p, &n, &[-Vec3::z()], 0.1).unwrap() - 0.4).abs() < 1e-15);
        let q = vec![p[0] + Vec3::new(0.3, 0.0, 0.0)];
        assert!((loss_consis(&q, &p, &n, &n, 0.1).unwrap() - 0.09).abs() < 1e-15);

        let up = vec![p[0] + Vec3::z() * 0.5];
        let down = vec![p[0] - Vec3::z() * 0.5];
        let side = vec![p[0] + Vec3::x() * 0.5];
        assert!(loss_dir(&up, &p, &n).unwrap().abs() < 1e-15);
        assert!((loss_dir(&down, &p, &n).unwrap() - 2.0).abs() < 1e-15);
        assert!((loss_dir(&side, &p, &n).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(loss_dir(&p, &p, &n).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_cases() {
        let a = vec![Vec3::zeros(), Vec3::x()];
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer(&[Vec3::zeros()], &[Vec3::x()]).unwrap(), 2.0);
        assert!(chamfer(&[], &a).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let a: Vec<Vec3> = (0..rng.gen_range(1..20)).map(|_| rv(&mut rng)).collect();
            let b: Vec<Vec3> = (0..rng.gen_range(1..20)).map(|_| rv(&mut rng)).collect();
            let mut want = 0.0;
            for p in &a {
                let mut m = f64::INFINITY;
                for q in &b {
                    m = m.min((p - q).norm_squared());
                }
                want += m;
            }
            for q in &b {
                let mut m = f64::INFINITY;
                for p in &a {
                    m = m.min((p - q).norm_squared());
                }
                want += m;
            }
            assert!((chamfer(&a, &b).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::default(), &w, Stage::Late), 0.0);
        let c = LossComponents {
            rec: 1.0,
            lap: 2.0,
            collision: 3.0,
            consis: 4.0,
            dir: 5.0,
            anchor: 6.0,
        };
        assert!((total_loss(&c, &w, Stage::Early) - (1.0 + 0.4 + 4.0 + 600.0)).abs() < 1e-12);
        assert!((total_loss(&c, &w, Stage::Late) - (1.0 + 0.4 + 3.0 + 4.0 + 0.05 + 600.0)).abs() < 1e-12);
    }

    #[test]
    fn early_stage_disconnects_late_terms() {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = (0..6).map(|i| tape.leaf(Tensor::scalar(i as f64 + 1.0))).collect();
        let c = ComponentVars {
            rec: leaves[0],
            lap: Some(leaves[1]),
            collision: Some(leaves[2]),
            consis: Some(leaves[3]),
            dir: Some(leaves[4]),
            anchor: Some(leaves[5]),
        };
        let w = LossWeights::default();
        let l = total_loss_var(&mut tape, &c, &w, Stage::Early).unwrap();
        tape.backward(l).unwrap();
        let g = |v: Var| tape.grad(v).map_or(0.0, |g| g[0]);
        assert_eq!(g(leaves[2]), 0.0);
        assert_eq!(g(leaves[4]), 0.0);
        assert_eq!(g(leaves[1]), w.beta1);
        assert_eq!(g(leaves[5]), w.lambda3);

        let mut tape = Tape::new();
        let leaves: Vec<Var> = (0..6).map(|i| tape.leaf(Tensor::scalar(i as f64 + 1.0))).collect();
        let c = ComponentVars {
            rec: leaves[0],
            lap: Some(leaves[1]),
            collision: Some(leaves[2]),
            consis: Some(leaves[3]),
            dir: Some(leaves[4]),
            anchor: Some(leaves[5]),
        };
        let l = total_loss_var(&mut tape, &c, &w, Stage::Late).unwrap();
        let comps = LossComponents {
            rec: 1.0,
            lap: 2.0,
            collision: 3.0,
            consis: 4.0,
            dir: 5.0,
            anchor: 6.0,
        };
        assert!((tape.value(l).item() - total_loss(&comps, &w, Stage::Late)).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(leaves[4]).unwrap()[0], w.lambda2);
    }

    fn anchor_fixture(seed: u64) -> (Mesh, AnchorSet) {
        let mesh = grid_mesh(6, 6, 0.1);
        let mut set = AnchorSet::initialize(&mesh, 5, 6, 3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for row in set.alpha.iter_mut() {
            for a in row.iter_mut() {
                *a = rng.gen_range(-1.0..1.0);
            }
        }
        set.refresh_positions(&mesh);
        (mesh, set)
    }

    #[test]
    fn transformed_anchor_identities() {
        let (mesh, set) = anchor_fixture(3);
        let ident = vec![RigidTransform::identity(); set.count()];
        let t = transformed_anchors(&set, &ident, &mesh, mesh.vertices()).unwrap();
        for i in 0..set.count() {
            assert!((t.p_g[i] - t.p_tgt[i]).norm() < 1e-14);
            assert!((t.p_g[i] - Vec3::from(set.positions[i])).norm() < 1e-14);
            assert!((t.n_g[i] - t.n_tgt[i]).norm() < 1e-14);
        }

        // R p + T equals the α-combination of the transformed neighbours.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let tr = RigidTransform::new(euler_to_rotation([rng.gen(), rng.gen(), rng.gen()]), rv(&mut rng));
            for (a, idx) in set.neighbor_indices.iter().enumerate() {
                let w = softmax(&set.alpha[a]);
                let combo = idx.iter().zip(&w).fold(Vec3::zeros(), |s, (&i, wi)| s + tr.apply(&mesh.vertices()[i]) * *wi);
                assert!((tr.apply(&Vec3::from(set.positions[a])) - combo).norm() < 1e-12);
            }
        }

        // Targets lie in the hull of their neighbours: check via the z-range on
        // a lifted ground truth.
        let gt: Vec<Vec3> = mesh.vertices().iter().map(|v| v + Vec3::z() * (v.x * 3.0).sin()).collect();
        let t = transformed_anchors(&set, &ident, &mesh, &gt).unwrap();
        for (a, idx) in set.neighbor_indices.iter().enumerate() {
            let lo = idx.iter().map(|&i| gt[i].z).fold(f64::INFINITY, f64::min);
            let hi = idx.iter().map(|&i| gt[i].z).fold(f64::NEG_INFINITY, f64::max);
            assert!(t.p_tgt[a].z >= lo - 1e-12 && t.p_tgt[a].z <= hi + 1e-12);
        }
    }

    #[test]
    fn taped_losses_match_plain_versions() {
        let (mesh, set) = anchor_fixture(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = mesh.vertex_count();
        let frames = 2;
        let trs: Vec<Vec<RigidTransform>> = (0..frames)
            .map(|_| {
                (0..set.count())
                    .map(|_| RigidTransform::new(euler_to_rotation([rng.gen_range(-0.3..0.3), 0.1, 0.2]), rv(&mut rng) * 0.05))
                    .collect()
            })
            .collect();
        let pred: Vec<Vec<Vec3>> = (0..frames).map(|_| mesh.vertices().iter().map(|v| v + rv(&mut rng) * 0.01).collect()).collect();
        let gt: Vec<Vec<Vec3>> = (0..frames).map(|_| mesh.vertices().iter().map(|v| v + rv(&mut rng) * 0.01).collect()).collect();
        let flat = |s: &[Vec<Vec3>]| Tensor::from_points(&s.iter().flatten().map(|v| [v.x, v.y, v.z]).collect::<Vec<_>>());

        let mut tape = Tape::new();
        let pv = tape.leaf(flat(&pred));
        let gv = tape.constant(flat(&gt));
        let tv = tape.constant(Tensor::from_vec(frames * set.count(), 12, trs.iter().flatten().flat_map(|t| t.to_array()).collect()));
        let pos = tape.constant(Tensor::from_points(&set.positions));
        let alpha = tape.leaf(nested_to_tensor(&set.alpha));
        let aw = tape.softmax(alpha, Axis::Cols);
        let nb = Arc::new(set.neighbor_indices.clone());
        let faces = Arc::new(mesh.faces().to_vec());
        let terms = anchor_terms_var(
            &mut tape,
            &AnchorGraphInputs {
                positions: pos,
                alpha_weights: aw,
                transforms: tv,
                pred: pv,
                gt: gv,
                neighbors: &nb,
                faces: &faces,
                vertices: m,
                detach_targets: false,
            },
        )
        .unwrap();
        let consis = consis_var(&mut tape, &terms, 0.1).unwrap();
        let dir = dir_var(&mut tape, &terms).unwrap();
        let rec = rec_var(&mut tape, pv, gv).unwrap();
        let adj = Arc::new(mesh.adjacency());
        let gl: Vec<Vec3> = gt.iter().flat_map(|g| uniform_laplacian(&adj, g)).collect();
        let glv = tape.constant(Tensor::from_points(&gl.iter().map(|v| [v.x, v.y, v.z]).collect::<Vec<_>>()));
        let lap = lap_var(&mut tape, pv, glv, &adj).unwrap();

        let (mut c_sum, mut d_sum, mut r_sum, mut l_sum) = (0.0, 0.0, 0.0, 0.0);
        for f in 0..frames {
            let pm = mesh.with_positions(pred[f].clone()).unwrap();
            let t = transformed_anchors(&set, &trs[f], &pm, &gt[f]).unwrap();
            c_sum += loss_consis(&t.p_g, &t.p_tgt, &t.n_g, &t.n_tgt, 0.1).unwrap();
            d_sum += loss_dir(&t.p_g, &t.p_tgt, &t.n_tgt).unwrap();
            r_sum += loss_rec(&pred[f], &gt[f]).unwrap();
            l_sum += loss_lap(&pred[f], &gt[f], &mesh).unwrap();
        }
        let f = frames as f64;
        assert!((tape.value(consis).item() - c_sum / f).abs() < 1e-12);
        assert!((tape.value(dir).item() - d_sum / f).abs() < 1e-12);
        assert!((tape.value(rec).item() - r_sum / f).abs() < 1e-15);
        assert!((tape.value(lap).item() - l_sum / f).abs() < 1e-15);

        // Collision with constants from a nearest-body lookup.
        let body: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64 * 0.05, 0.2, 0.0)).collect();
        let normals = vec![Vec3::z(); 10];
        let near = nearest_body(&pred[0], &body).unwrap();
        let bp = tape.constant(Tensor::from_points(&near.iter().map(|&i| body[i].into()).collect::<Vec<_>>()));
        let bn = tape.constant(Tensor::from_points(&near.iter().map(|&i| normals[i].into()).collect::<Vec<_>>()));
        let p0 = tape.slice(pv, 0, m, 0, 3).unwrap();
        let coll = collision_var(&mut tape, p0, bp, bn, 0.004).unwrap();
        let want = loss_collision(&pred[0], &body, &normals, 0.004).unwrap();
        assert!((tape.value(coll).item() - want).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (mesh, set) = anchor_fixture(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = mesh.vertex_count();
        let opts = CheckOptions::default();
        let nb = Arc::new(set.neighbor_indices.clone());
        let faces = Arc::new(mesh.faces().to_vec());
        let adj = Arc::new(mesh.adjacency());
        let template = Tensor::from_points(&mesh.vertex_rows());
        let jitter = |rng: &mut ChaCha8Rng, t: &Tensor, frames: usize| {
            let mut d = Vec::new();
            for _ in 0..frames {
                d.extend(t.data().iter().map(|v| v + rng.gen_range(-0.02..0.02)));
            }
            Tensor::from_vec(frames * t.rows(), 3, d)
        };
        let pred = jitter(&mut rng, &template, 2);
        let gt = jitter(&mut rng, &template, 2);
        let alpha = nested_to_tensor(&set.alpha);
        let trs = Tensor::from_vec(
            2 * set.count(),
            12,
            (0..2 * set.count())
                .flat_map(|_| RigidTransform::new(euler_to_rotation([rng.gen_range(-0.2..0.2), 0.0, 0.1]), rv(&mut rng) * 0.03).to_array())
                .collect(),
        );
        let pos = Tensor::from_points(&set.positions);

        let rep = check_gradients(
            &[pred.clone(), alpha.clone(), trs.clone(), pos.clone()],
            |tape, v| {
                let gv = tape.constant(gt.clone());
                let aw = tape.softmax(v[1], Axis::Cols);
                let terms = anchor_terms_var(
                    tape,
                    &AnchorGraphInputs {
                        positions: v[3],
                        alpha_weights: aw,
                        transforms: v[2],
                        pred: v[0],
                        gt: gv,
                        neighbors: &nb,
                        faces: &faces,
                        vertices: m,
                        detach_targets: false,
                    },
                )?;
                let c = consis_var(tape, &terms, 0.1)?;
                let d = dir_var(tape, &terms)?;
                let l = tape.add(c, d)?;
                let r = rec_var(tape, v[0], gv)?;
                let l = tape.add(l, r)?;
                let gl = tape.constant(Tensor::zeros(2 * m, 3));
                let lap = lap_var(tape, v[0], gl, &adj)?;
                tape.add(l, lap)
            },
            &opts,
        )
        .unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");

        // Collision away from the hinge point.
        let body = random_tensor(&mut rng, 2 * m, 3, -0.5, 0.5);
        let normals = random_tensor(&mut rng, 2 * m, 3, -1.0, 1.0);
        let rep = check_gradients(
            &[pred.clone()],
            |tape, v| {
                let b = tape.constant(body.clone());
                let n = tape.constant(normals.clone());
                collision_var(tape, v[0], b, n, 0.05)
            },
            &opts,
        )
        .unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");

        let a = random_tensor(&mut rng, 7, 3, -1.0, 1.0);
        let b = random_tensor(&mut rng, 11, 3, -1.0, 1.0);
        let rep = check_gradients(&[a, b], |tape, v| chamfer_var(tape, v[0], v[1]), &opts).unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn metric_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq: Vec<Vec<Vec3>> = (0..3).map(|_| (0..10).map(|_| rv(&mut rng)).collect()).collect();
        assert_eq!(metric_rmse(&seq, &seq).unwrap(), 0.0);
        let off: Vec<Vec<Vec3>> = seq.iter().map(|f| f.iter().map(|v| v + Vec3::new(0.001, 0.0, 0.0)).collect()).collect();
        assert!((metric_rmse(&off, &seq).unwrap() - 1.0 / 3f64.sqrt()).abs() < 1e-9);
        let s = 2.5;
        let scale = |x: &[Vec<Vec3>]| x.iter().map(|f| f.iter().map(|v| v * s).collect()).collect::<Vec<Vec<Vec3>>>();
        let noisy: Vec<Vec<Vec3>> = seq.iter().map(|f| f.iter().map(|v| v + rv(&mut rng) * 0.01).collect()).collect();
        let r1 = metric_rmse(&noisy, &seq).unwrap();
        assert!((metric_rmse(&scale(&noisy), &scale(&seq)).unwrap() - s * r1).abs() < 1e-9);

        assert_eq!(hausdorff(&seq[0], &seq[0]).unwrap(), 0.0);
        assert!((hausdorff(&[Vec3::zeros()], &[Vec3::new(0.7, 0.0, 0.0)]).unwrap() - 0.7).abs() < 1e-15);
        assert!(hausdorff(&[], &seq[0]).is_err());
        for _ in 0..10 {
            let a: Vec<Vec3> = (0..rng.gen_range(1..15)).map(|_| rv(&mut rng)).collect();
            let b: Vec<Vec3> = (0..rng.gen_range(1..15)).map(|_| rv(&mut rng)).collect();
            let mut want: f64 = 0.0;
            for (x, y) in [(&a, &b), (&b, &a)] {
                for p in x.iter() {
                    let mut m = f64::INFINITY;
                    for q in y.iter() {
                        m = m.min((p - q).norm());
                    }
                    want = want.max(m);
                }
            }
            assert!((hausdorff(&a, &b).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sted_cases() {
        let mesh = grid_mesh(4, 4, 0.1);
        let base: Vec<Vec<Vec3>> = (0..4)
            .map(|f| mesh.vertices().iter().map(|v| v + Vec3::new(0.0, 0.0, 0.01 * f as f64 * v.x)).collect())
            .collect();
        assert_eq!(metric_sted(&base, &base, &mesh).unwrap(), 0.0);
        let s = 0.07;
        // Uniform scaling about the origin scales every edge by (1 + s).
        let scaled: Vec<Vec<Vec3>> = base.iter().map(|f| f.iter().map(|v| v * (1.0 + s)).collect()).collect();
        assert!((metric_sted(&scaled, &base, &mesh).unwrap() - s).abs() < 1e-12);
        let g = RigidTransform::new(euler_to_rotation([0.3, -0.2, 1.0]), Vec3::new(1.0, 2.0, 3.0));
        let mv = |x: &[Vec<Vec3>]| x.iter().map(|f| f.iter().map(|v| g.apply(v)).collect()).collect::<Vec<Vec<Vec3>>>();
        let noisy: Vec<Vec<Vec3>> = base.iter().enumerate().map(|(i, f)| f.iter().map(|v| v * (1.0 + 0.01 * i as f64)).collect()).collect();
        let a = metric_sted(&noisy, &base, &mesh).unwrap();
        let b = metric_sted(&mv(&noisy), &mv(&base), &mesh).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(metric_sted(&base[..1], &base[..1], &mesh).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn losses_are_nonnegative_and_bounded(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..8);
            let p: Vec<Vec3> = (0..n).map(|_| rv(&mut rng)).collect();
            let q: Vec<Vec3> = (0..n).map(|_| rv(&mut rng)).collect();
            let nn: Vec<Vec3> = (0..n).map(|_| rv(&mut rng).normalize()).collect();
            let nm: Vec<Vec3> = (0..n).map(|_| rv(&mut rng).normalize()).collect();
            let d = loss_dir(&p, &q, &nn).unwrap();
            prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
            let c_normals = loss_consis(&p, &p, &nn, &nm, 0.1).unwrap();
            prop_assert!((0.0..=0.4 + 1e-12).contains(&c_normals));
            prop_assert!(loss_rec(&p, &q).unwrap() >= 0.0);
            prop_assert!(chamfer(&p, &q).unwrap() >= 0.0);
            prop_assert!(loss_collision(&p, &q, &nn, COLLISION_MARGIN).unwrap() >= 0.0);
        }
    }
}
