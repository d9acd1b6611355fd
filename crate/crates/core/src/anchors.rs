//! Anchor lifecycle: k-means initialisation, neighbour association,
//! attention-weighted positions and sparse per-vertex blend weights.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Axis, Function, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{knn, Mesh, Vec3};

pub const DEFAULT_NEIGHBORS: usize = 128;
pub const DEFAULT_VERTEX_ANCHORS: usize = 8;

/// Anchor state. Field names are the on-disk JSON keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// Current positions, derived from `alpha` over the template neighbours.
    pub positions: Vec<[f64; 3]>,
    /// Per anchor, the K template vertices its position is blended from.
    pub neighbor_indices: Vec<Vec<usize>>,
    /// Per anchor, K attention logits over `neighbor_indices`.
    pub alpha: Vec<Vec<f64>>,
    /// Per vertex, its N′ influencing anchors (nearest first).
    pub vertex_anchor_indices: Vec<Vec<usize>>,
    /// Per vertex, N′ blend-weight logits aligned with `vertex_anchor_indices`.
    pub weight_logits: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centers: Vec<Vec3>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squared distances after each Lloyd iteration.
    pub inertia: Vec<f64>,
}

fn nearest_center(p: &Vec3, centers: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding; stops when no centre moves more
/// than 1e-6 or after 100 iterations.
pub fn kmeans(points: &[Vec3], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("k-means: {k} clusters for {} points", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(k);
    let mut chosen = vec![false; points.len()];
    let first = rng.gen_range(0..points.len());
    centers.push(points[first]);
    chosen[first] = true;
    let mut d2: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().enumerate().filter(|(i, _)| !chosen[*i]).map(|(_, d)| d).sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                if chosen[i] || *d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                r -= d;
                if r <= 0.0 {
                    break;
                }
            }
            pick.expect("positive total has a candidate")
        } else {
            chosen.iter().position(|c| !c).expect("k <= point count")
        };
        chosen[pick] = true;
        centers.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((p - points[pick]).norm_squared());
        }
    }

    let mut assignment = vec![0; points.len()];
    let mut inertia = Vec::new();
    for _ in 0..100 {
        let mut total = 0.0;
        for (a, p) in assignment.iter_mut().zip(points) {
            let (c, d) = nearest_center(p, &centers);
            *a = c;
            total += d;
        }
        let mut sums = vec![Vec3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (a, p) in assignment.iter().zip(points) {
            sums[*a] += p;
            counts[*a] += 1;
        }
        let mut shift: f64 = 0.0;
        let mut next = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                next[c] = sums[c] / counts[c] as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed at the point farthest from its nearest centre.
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, nearest_center(p, &next).1))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                next[c] = points[far];
            }
            shift = shift.max((next[c] - centers[c]).norm());
        }
        centers = next;
        let after: f64 = points.iter().map(|p| nearest_center(p, &centers).1).sum();
        inertia.push(after.min(total));
        if shift < 1e-6 {
            break;
        }
    }
    for (a, p) in assignment.iter_mut().zip(points) {
        *a = nearest_center(p, &centers).0;
    }
    Ok(KMeans {
        centers,
        assignment,
        inertia,
    })
}

pub fn kmeans_init(vertices: &[Vec3], n_anchors: usize, seed: u64) -> Result<Vec<Vec3>> {
    Ok(kmeans(vertices, n_anchors, seed)?.centers)
}

/// K nearest template vertices of every anchor.
pub fn associate_neighbors(anchor_positions: &[Vec3], mesh: &Mesh, k: usize) -> Result<Vec<Vec<usize>>> {
    anchor_positions
        .iter()
        .map(|p| knn(p, mesh.vertices(), k))
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut w = logits.to_vec();
    softmax_in_place(&mut w);
    w
}

/// Softmax(α)-weighted combination of the neighbour positions.
pub fn anchor_position(alpha_row: &[f64], neighbor_positions: &[Vec3]) -> Vec3 {
    assert_eq!(alpha_row.len(), neighbor_positions.len(), "alpha/neighbour length");
    softmax(alpha_row)
        .iter()
        .zip(neighbor_positions)
        .fold(Vec3::zeros(), |acc, (w, p)| acc + p * *w)
}

/// Row-wise softmax of the blend-weight logits.
pub fn vertex_blend_weights(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits.iter().map(|row| softmax(row)).collect()
}

impl AnchorSet {
    /// k-means anchors over the template, neighbour lists of size `k`, zero
    /// attention logits and distance-initialised blend logits over each
    /// vertex's `n_prime` nearest anchors.
    pub fn initialize(template: &Mesh, n_anchors: usize, k: usize, n_prime: usize, seed: u64) -> Result<Self> {
        let m = template.vertex_count();
        if n_anchors > m {
            return Err(Error::invalid(format!("{n_anchors} anchors for {m} template vertices")));
        }
        let k = k.min(m);
        let n_prime = n_prime.min(n_anchors);
        let centers = kmeans_init(template.vertices(), n_anchors, seed)?;
        let neighbor_indices = associate_neighbors(&centers, template, k)?;
        let mut set = AnchorSet {
            positions: Vec::new(),
            alpha: vec![vec![0.0; k]; n_anchors],
            neighbor_indices,
            vertex_anchor_indices: Vec::new(),
            weight_logits: Vec::new(),
        };
        set.refresh_positions(template);
        // Neighbour lists are settled against the derived positions so that
        // reassociating an untouched set is a no-op.
        for _ in 0..20 {
            let nb = associate_neighbors(&set.position_vecs(), template, k)?;
            let nb: Vec<Vec<usize>> = nb.into_iter().zip(&set.neighbor_indices).map(|(n, o)| keep_order(o, n)).collect();
            if nb == set.neighbor_indices {
                break;
            }
            set.neighbor_indices = nb;
            set.refresh_positions(template);
        }
        let anchors = set.position_vecs();
        let mut idx = Vec::with_capacity(m);
        let mut dist = Vec::with_capacity(m);
        for v in template.vertices() {
            let near = knn(v, &anchors, n_prime)?;
            dist.push(near.iter().map(|&a| (anchors[a] - v).norm()).collect::<Vec<_>>());
            idx.push(near);
        }
        let tau = dist.iter().map(|d| d[0]).sum::<f64>() / m.max(1) as f64;
        let tau = if tau > 0.0 { tau } else { 1.0 };
        set.weight_logits = dist.iter().map(|d| d.iter().map(|x| -x / tau).collect()).collect();
        set.vertex_anchor_indices = idx;
        Ok(set)
    }

    pub fn count(&self) -> usize {
        self.alpha.len()
    }

    pub fn neighbors_per_anchor(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    pub fn anchors_per_vertex(&self) -> usize {
        self.weight_logits.first().map_or(0, Vec::len)
    }

    pub fn position_vecs(&self) -> Vec<Vec3> {
        self.positions.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()
    }

    /// Recomputes positions from `alpha` over the template neighbours.
    pub fn refresh_positions(&mut self, template: &Mesh) {
        let v = template.vertices();
        self.positions = self
            .alpha
            .iter()
            .zip(&self.neighbor_indices)
            .map(|(a, nb)| {
                let pts: Vec<Vec3> = nb.iter().map(|&i| v[i]).collect();
                let p = anchor_position(a, &pts);
                [p.x, p.y, p.z]
            })
            .collect();
    }

    pub fn blend_weights(&self) -> Vec<Vec<f64>> {
        vertex_blend_weights(&self.weight_logits)
    }

    /// Dense `M × N` weight matrix with zeros outside each vertex's set.
    pub fn dense_weights(&self) -> Vec<Vec<f64>> {
        let n = self.count();
        self.blend_weights()
            .iter()
            .zip(&self.vertex_anchor_indices)
            .map(|(w, idx)| {
                let mut row = vec![0.0; n];
                for (wi, &a) in w.iter().zip(idx) {
                    row[a] += wi;
                }
                row
            })
            .collect()
    }

    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        let n = self.count();
        let k = self.neighbors_per_anchor();
        let np = self.anchors_per_vertex();
        let bad = |m: String| Err(Error::Schema(format!("anchors: {m}")));
        if self.positions.len() != n || self.neighbor_indices.len() != n {
            return bad(format!("{n} alpha rows but {} positions / {} neighbour lists", self.positions.len(), self.neighbor_indices.len()));
        }
        if self.vertex_anchor_indices.len() != vertex_count || self.weight_logits.len() != vertex_count {
            return bad(format!("expected {vertex_count} vertex rows"));
        }
        for (a, (nb, al)) in self.neighbor_indices.iter().zip(&self.alpha).enumerate() {
            if nb.len() != k || al.len() != k {
                return bad(format!("anchor {a} has ragged neighbour data"));
            }
            if nb.iter().any(|&i| i >= vertex_count) {
                return bad(format!("anchor {a} references a vertex out of range"));
            }
        }
        for (v, (idx, lg)) in self.vertex_anchor_indices.iter().zip(&self.weight_logits).enumerate() {
            if idx.len() != np || lg.len() != np {
                return bad(format!("vertex {v} has ragged anchor data"));
            }
            if idx.iter().any(|&a| a >= n) {
                return bad(format!("vertex {v} references an anchor out of range"));
            }
            if lg.iter().any(|x| !x.is_finite()) {
                return bad(format!("vertex {v} has non-finite logits"));
            }
        }
        Ok(())
    }

    /// Re-derives vertex-anchor and anchor-neighbour relations from the
    /// current positions. Retained entries keep their logits; entries new to
    /// a row start at that row's minimum retained logit.
    pub fn reassociate(&self, template: &Mesh) -> Result<AnchorSet> {
        let mut next = self.clone();
        next.refresh_positions(template);
        let anchors = next.position_vecs();
        let k = self.neighbors_per_anchor();
        let np = self.anchors_per_vertex();

        next.vertex_anchor_indices = Vec::with_capacity(template.vertex_count());
        next.weight_logits = Vec::with_capacity(template.vertex_count());
        for (v, pos) in template.vertices().iter().enumerate() {
            let near = keep_order(&self.vertex_anchor_indices[v], knn(pos, &anchors, np)?);
            let logits = carry_logits(&self.vertex_anchor_indices[v], &self.weight_logits[v], &near);
            next.vertex_anchor_indices.push(near);
            next.weight_logits.push(logits);
        }

        let neighbors: Vec<Vec<usize>> = associate_neighbors(&anchors, template, k)?
            .into_iter()
            .zip(&self.neighbor_indices)
            .map(|(n, o)| keep_order(o, n))
            .collect();
        next.alpha = neighbors
            .iter()
            .enumerate()
            .map(|(a, nb)| carry_logits(&self.neighbor_indices[a], &self.alpha[a], nb))
            .collect();
        next.neighbor_indices = neighbors;
        next.refresh_positions(template);
        Ok(next)
    }
}

/// Keeps the previous ordering when the membership is unchanged, so that
/// near-ties in distance do not reshuffle otherwise identical sets.
fn keep_order(old: &[usize], new: Vec<usize>) -> Vec<usize> {
    let mut a = old.to_vec();
    let mut b = new.clone();
    a.sort_unstable();
    b.sort_unstable();
    if a == b {
        old.to_vec()
    } else {
        new
    }
}

fn carry_logits(old_idx: &[usize], old_logits: &[f64], new_idx: &[usize]) -> Vec<f64> {
    let retained: Vec<Option<f64>> = new_idx
        .iter()
        .map(|i| old_idx.iter().position(|o| o == i).map(|p| old_logits[p]))
        .collect();
    let floor = retained
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() { floor } else { 0.0 };
    retained.into_iter().map(|r| r.unwrap_or(floor)).collect()
}

/// `out[f·N + n] = Σ_k w[n, k] · points[f·V + idx[n][k]]` for an `N × K`
/// weight tensor shared across frames and `F·V × 3` points.
pub struct SparseCombine {
    pub indices: Arc<Vec<Vec<usize>>>,
    /// Rows per frame in the point tensor.
    pub frame_rows: usize,
}

impl SparseCombine {
    pub fn forward(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let frames = x.len() / (3 * self.frame_rows);
        let mut out = Vec::with_capacity(frames * self.indices.len() * 3);
        let k = self.indices.first().map_or(0, Vec::len);
        for f in 0..frames {
            let x = &x[3 * f * self.frame_rows..3 * (f + 1) * self.frame_rows];
            for (n, idx) in self.indices.iter().enumerate() {
                let mut acc = [0.0; 3];
                for (j, &i) in idx.iter().enumerate() {
                    let wj = w[n * k + j];
                    for c in 0..3 {
                        acc[c] += wj * x[3 * i + c];
                    }
                }
                out.extend_from_slice(&acc);
            }
        }
        out
    }
}

impl Function for SparseCombine {
    fn name(&self) -> &'static str {
        "sparse_combine"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (w, x) = (inputs[0].data(), inputs[1].data());
        let k = self.indices.first().map_or(0, Vec::len);
        let n_count = self.indices.len();
        let frames = x.len() / (3 * self.frame_rows);
        let mut dw = needs[0].then(|| vec![0.0; w.len()]);
        let mut dx = needs[1].then(|| vec![0.0; x.len()]);
        for f in 0..frames {
            let base = 3 * f * self.frame_rows;
            for (n, idx) in self.indices.iter().enumerate() {
                let row = f * n_count + n;
                let gn = &g[3 * row..3 * row + 3];
                for (j, &i) in idx.iter().enumerate() {
                    if let Some(dw) = dw.as_mut() {
                        dw[n * k + j] += (0..3).map(|c| gn[c] * x[base + 3 * i + c]).sum::<f64>();
                    }
                    if let Some(dx) = dx.as_mut() {
                        for c in 0..3 {
                            dx[base + 3 * i + c] += w[n * k + j] * gn[c];
                        }
                    }
                }
            }
        }
        vec![dw, dx]
    }
}

/// Batched form of [`sparse_combine_var`]: `points` holds whole frames of
/// `frame_rows` rows each.
pub fn sparse_combine_frames_var(
    tape: &mut Tape,
    weights: Var,
    points: Var,
    indices: &Arc<Vec<Vec<usize>>>,
    frame_rows: usize,
) -> Result<Var> {
    let (sw, sx) = (tape.shape(weights), tape.shape(points));
    let k = indices.first().map_or(0, Vec::len);
    if sw.rows != indices.len()
        || sw.cols != k
        || sx.cols != 3
        || frame_rows == 0
        || sx.rows % frame_rows != 0
        || indices.iter().flatten().any(|&i| i >= frame_rows)
    {
        return Err(Error::Shape {
            op: "sparse_combine",
            detail: format!("weights {sw}, points {sx}, {} index rows of {k}, {frame_rows} rows per frame", indices.len()),
        });
    }
    let f = SparseCombine {
        indices: indices.clone(),
        frame_rows,
    };
    let out = f.forward(tape.value(weights).data(), tape.value(points).data());
    let rows = out.len() / 3;
    Ok(tape.custom(&[weights, points], Tensor::from_vec(rows, 3, out), Box::new(f)))
}

/// `out[n] = Σ_k w[n, k] · points[idx[n][k]]` for an `N × K` weight tensor
/// and `M × 3` points.
pub fn sparse_combine_var(tape: &mut Tape, weights: Var, points: Var, indices: &Arc<Vec<Vec<usize>>>) -> Result<Var> {
    let rows = tape.shape(points).rows;
    sparse_combine_frames_var(tape, weights, points, indices, rows)
}

/// Anchor positions `softmax(α) · neighbours` on the tape.
pub fn anchor_positions_var(tape: &mut Tape, alpha: Var, template: Var, indices: &Arc<Vec<Vec<usize>>>) -> Result<Var> {
    let w = tape.softmax(alpha, Axis::Cols);
    sparse_combine_var(tape, w, template, indices)
}

pub fn nested_to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows.first().map_or(0, Vec::len);
    Tensor::from_vec(rows.len(), cols, rows.iter().flatten().copied().collect())
}

pub fn tensor_to_nested(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::geometry::grid_mesh;

    #[test]
    fn kmeans_with_k_equal_n_recovers_points() {
        let pts: Vec<Vec3> = (0..12).map(|i| Vec3::new(i as f64, (i * i) as f64 * 0.1, 0.0)).collect();
        let mut c = kmeans_init(&pts, 12, 3).unwrap();
        c.sort_by(|a, b| a.x.total_cmp(&b.x));
        for (a, b) in c.iter().zip(&pts) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut pts = Vec::new();
        for center in [Vec3::zeros(), Vec3::new(10.0, 0.0, 0.0)] {
            for _ in 0..200 {
                pts.push(center + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)));
            }
        }
        let mean_a = pts[..200].iter().fold(Vec3::zeros(), |s, p| s + p) / 200.0;
        let mean_b = pts[200..].iter().fold(Vec3::zeros(), |s, p| s + p) / 200.0;
        let mut c = kmeans_init(&pts, 2, 5).unwrap();
        c.sort_by(|a, b| a.x.total_cmp(&b.x));
        assert!((c[0] - mean_a).norm() < 0.05);
        assert!((c[1] - mean_b).norm() < 0.05);
    }

    #[test]
    fn kmeans_inertia_is_monotone_and_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec3> = (0..300).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let a = kmeans(&pts, 9, 42).unwrap();
        for w in a.inertia.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let b = kmeans(&pts, 9, 42).unwrap();
        let bits = |k: &KMeans| k.centers.iter().flat_map(|c| c.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(kmeans(&pts, 301, 0).is_err());
    }

    #[test]
    fn associate_neighbors_contract() {
        let m = grid_mesh(6, 6, 1.0);
        let anchors = vec![m.vertices()[7], Vec3::new(2.2, 3.7, 0.4)];
        let nb = associate_neighbors(&anchors, &m, 1).unwrap();
        assert_eq!(nb[0], vec![7]);
        let nb = associate_neighbors(&anchors, &m, 10).unwrap();
        for list in &nb {
            let mut u = list.clone();
            u.sort_unstable();
            u.dedup();
            assert_eq!(u.len(), 10);
        }
        // Brute-force oracle for the second anchor.
        let mut d: Vec<(f64, usize)> = m.vertices().iter().enumerate().map(|(i, v)| ((v - anchors[1]).norm_squared(), i)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        assert_eq!(nb[1], d.iter().take(10).map(|x| x.1).collect::<Vec<_>>());
    }

    #[test]
    fn anchor_position_cases() {
        let nb = [Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)];
        assert!((anchor_position(&[0.0, 0.0], &nb) - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let nb3 = [Vec3::new(1.0, 2.0, 3.0), Vec3::new(-4.0, 0.0, 1.0), Vec3::new(0.0, 5.0, 0.0)];
        assert!((anchor_position(&[20.0, 0.0, 0.0], &nb3) - nb3[0]).norm() < 1e-6 * 10.0);
        let a = anchor_position(&[0.3, -1.0, 2.0], &nb3);
        let b = anchor_position(&[10.3, 9.0, 12.0], &nb3);
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn blend_weight_cases() {
        let w = vertex_blend_weights(&[vec![0.0; 8]]);
        assert!(w[0].iter().all(|x| (x - 0.125).abs() < 1e-15));
        let mut row = vec![0.0; 8];
        row[3] = 30.0;
        let w = vertex_blend_weights(&[row]);
        assert!(w[0][3] > 1.0 - 1e-6);
    }

    proptest! {
        #[test]
        fn blend_rows_are_simplex_points(row in prop::collection::vec(-50.0f64..50.0, 1..16)) {
            let w = vertex_blend_weights(&[row]);
            let s: f64 = w[0].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(w[0].iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn initialize_builds_consistent_state() {
        let m = grid_mesh(8, 8, 0.1);
        let set = AnchorSet::initialize(&m, 10, 16, 4, 7).unwrap();
        set.validate(64).unwrap();
        assert_eq!(set.count(), 10);
        assert_eq!(set.neighbors_per_anchor(), 16);
        assert_eq!(set.anchors_per_vertex(), 4);
        // Nearest anchor gets the largest initial logit.
        for lg in &set.weight_logits {
            assert!(lg.windows(2).all(|w| w[0] >= w[1]));
        }
        assert!(AnchorSet::initialize(&m, 65, 16, 4, 7).is_err());
        let again = AnchorSet::initialize(&m, 10, 16, 4, 7).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn reassociate_is_idempotent_when_unmoved() {
        let m = grid_mesh(8, 8, 0.1);
        let set = AnchorSet::initialize(&m, 10, 16, 4, 7).unwrap();
        let next = set.reassociate(&m).unwrap();
        assert_eq!(next.vertex_anchor_indices, set.vertex_anchor_indices);
        assert_eq!(next.neighbor_indices, set.neighbor_indices);
        assert_eq!(next.weight_logits, set.weight_logits);
    }

    #[test]
    fn reassociate_drops_anchor_that_moved_away() {
        // Template: a single triangle; two anchors with one neighbour each.
        let m = Mesh::new(
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(10.0, 0.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let set = AnchorSet {
            positions: vec![[0.0; 3], [1.0, 0.0, 0.0]],
            neighbor_indices: vec![vec![0], vec![1]],
            alpha: vec![vec![0.0], vec![0.0]],
            vertex_anchor_indices: vec![vec![0], vec![1], vec![1]],
            weight_logits: vec![vec![0.0], vec![0.0], vec![0.0]],
        };
        // Anchor 0 is re-pointed at the far vertex: vertex 0 must now prefer anchor 1.
        let mut moved = set.clone();
        moved.neighbor_indices[0] = vec![2];
        let next = moved.reassociate(&m).unwrap();
        assert_eq!(next.vertex_anchor_indices[0], vec![1]);
        assert_eq!(next.vertex_anchor_indices[2], vec![0]);
        next.validate(3).unwrap();
    }

    #[test]
    fn carried_logits_use_row_minimum() {
        let out = carry_logits(&[4, 7, 9], &[1.0, -2.0, 0.5], &[9, 3, 4]);
        assert_eq!(out, vec![0.5, 0.5, 1.0]);
        assert_eq!(carry_logits(&[1], &[3.0], &[2]), vec![0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn anchor_stays_in_neighbour_hull(alpha in prop::collection::vec(-8.0f64..8.0, 3)) {
            // Triangle hull: barycentric coordinates of the result are the softmax weights.
            let nb = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
            let p = anchor_position(&alpha, &nb);
            prop_assert!(p.x >= -1e-15 && p.y >= -1e-15 && p.x + p.y <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn anchor_positions_var_matches_direct() {
        let m = grid_mesh(5, 5, 0.2);
        let set = AnchorSet::initialize(&m, 4, 6, 2, 1).unwrap();
        let mut alpha = set.alpha.clone();
        alpha[1][2] = 1.5;
        let mut tape = Tape::new();
        let a = tape.leaf(nested_to_tensor(&alpha));
        let t = tape.constant(Tensor::from_points(&m.vertex_rows()));
        let idx = Arc::new(set.neighbor_indices.clone());
        let p = anchor_positions_var(&mut tape, a, t, &idx).unwrap();
        let got = tape.value(p).to_points();
        for n in 0..4 {
            let pts: Vec<Vec3> = set.neighbor_indices[n].iter().map(|&i| m.vertices()[i]).collect();
            let want = anchor_position(&alpha[n], &pts);
            assert!((Vec3::from(got[n]) - want).norm() < 1e-14);
        }
    }
}
