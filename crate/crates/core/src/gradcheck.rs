//! Finite-difference suite over every tape op, every custom op, the losses
//! and a small end-to-end training loss.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{anchor_positions_var, nested_to_tensor, sparse_combine_frames_var, sparse_combine_var, AnchorSet};
use crate::autodiff::check::{check_gradients, random_tensor, CheckOptions, FD_TOLERANCE};
use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::Result;
use crate::geometry::{face_normal_sum_var, flatten, grid_mesh, laplacian_var, uniform_laplacian, unflatten, vertex_normals_var, Vec3};
use crate::losses::{
    anchor_terms_var, chamfer_var, collision_var, consis_var, dir_var, lap_var, rec_var, total_loss_var, AnchorGraphInputs, ComponentVars,
    LossWeights, Stage,
};
use crate::model::{encode_sequence, gru_cell, heads, mlp_head, BoundParams, ModelConfig, ModelParams};
use crate::skinning::{compose_transforms_var, euler_rotations_var, euler_to_rotation, lbs_var, transform_points_var, ComposeBase, Mat3, RigidTransform};

/// Every op name a tape can record. The suite must exercise all of them.
pub const ALL_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "concat_rows",
    "concat_cols",
    "slice",
    "reshape",
    "sum",
    "mean",
    "sum_axis",
    "square",
    "sqrt",
    "tanh",
    "sigmoid",
    "relu",
    "prelu",
    "softmax",
    "norm_sq",
    "normalize_rows",
    "cosine_similarity",
    "euler_rotations",
    "compose_transforms",
    "lbs",
    "transform_points",
    "laplacian",
    "face_normal_sum",
    "sparse_combine",
    "chamfer",
];

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub ops: BTreeSet<&'static str>,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub cases: Vec<CaseResult>,
    pub tolerance: f64,
}

impl Report {
    pub fn failures(&self) -> Vec<&'static str> {
        self.cases.iter().filter(|c| !(c.max_rel_error < self.tolerance)).map(|c| c.name).collect()
    }

    /// Ops from [`ALL_OPS`] that no case recorded.
    pub fn uncovered(&self) -> Vec<&'static str> {
        let seen: BTreeSet<&str> = self.cases.iter().flat_map(|c| c.ops.iter().copied()).collect();
        ALL_OPS.iter().copied().filter(|op| !seen.contains(op)).collect()
    }

    /// Worst error among the cases that record each op.
    pub fn per_op(&self) -> BTreeMap<&'static str, f64> {
        let mut out = BTreeMap::new();
        for c in &self.cases {
            for op in &c.ops {
                let e = out.entry(*op).or_insert(0.0f64);
                *e = e.max(c.max_rel_error);
            }
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty() && self.uncovered().is_empty()
    }
}

/// Values in `±[lo, hi]` with random sign, keeping clear of kinks at zero.
fn signed_tensor(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let m = rng.gen_range(lo..hi);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

fn unit_rows(rng: &mut impl Rng, rows: usize) -> Vec<Vec3> {
    (0..rows)
        .map(|_| {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            v.normalize()
        })
        .collect()
}

fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    euler_to_rotation([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
}

fn random_vec(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn elementwise_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let a = random_tensor(rng, 3, 4, -1.0, 1.0);
    let b = random_tensor(rng, 3, 4, -1.0, 1.0);
    let row = random_tensor(rng, 1, 4, -1.0, 1.0);
    let s = random_tensor(rng, 1, 1, 0.5, 1.5);
    let pos = random_tensor(rng, 3, 4, 0.5, 2.0);
    let kinked = signed_tensor(rng, 3, 4, 0.05, 1.0);
    let slope = random_tensor(rng, 1, 1, 0.05, 0.5);
    vec![
        case("add", vec![a.clone(), b.clone(), row.clone(), s.clone()], |t, v| {
            let x = t.add(v[0], v[1])?;
            let x = t.add(x, v[2])?;
            t.add(x, v[3])
        }),
        case("sub", vec![a.clone(), b.clone(), row.clone(), s.clone()], |t, v| {
            let x = t.sub(v[0], v[1])?;
            let x = t.sub(x, v[2])?;
            t.sub(x, v[3])
        }),
        case("mul", vec![a.clone(), b.clone(), row.clone(), s.clone()], |t, v| {
            let x = t.mul(v[0], v[1])?;
            let x = t.mul(x, v[2])?;
            t.mul(x, v[3])
        }),
        case("scale", vec![a.clone()], |t, v| {
            let x = t.scale(v[0], 2.5);
            Ok(t.neg(x))
        }),
        case("add_scalar", vec![a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.7))),
        case("square", vec![a.clone()], |t, v| Ok(t.square(v[0]))),
        case("sqrt", vec![pos], |t, v| Ok(t.sqrt(v[0]))),
        case("tanh", vec![a.clone()], |t, v| Ok(t.tanh(v[0]))),
        case("sigmoid", vec![a.clone()], |t, v| Ok(t.sigmoid(v[0]))),
        case("relu", vec![kinked.clone()], |t, v| Ok(t.relu(v[0]))),
        case("prelu", vec![kinked, slope], |t, v| t.prelu(v[0], v[1])),
    ]
}

fn structural_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let a = random_tensor(rng, 3, 4, -1.0, 1.0);
    let b = random_tensor(rng, 4, 2, -1.0, 1.0);
    let c = random_tensor(rng, 2, 4, -1.0, 1.0);
    let d = random_tensor(rng, 3, 2, -1.0, 1.0);
    vec![
        case("matmul", vec![a.clone(), b], |t, v| t.matmul(v[0], v[1])),
        case("concat_rows", vec![a.clone(), c], |t, v| t.concat(&[v[0], v[1]], Axis::Rows)),
        case("concat_cols", vec![a.clone(), d], |t, v| t.concat(&[v[0], v[1]], Axis::Cols)),
        case("slice", vec![a.clone()], |t, v| t.slice(v[0], 1, 2, 1, 3)),
        case("reshape", vec![a.clone()], |t, v| t.reshape(v[0], 2, 6)),
        case("sum", vec![a.clone()], |t, v| Ok(t.sum(v[0]))),
        case("mean", vec![a.clone()], |t, v| Ok(t.mean(v[0]))),
        case("sum_axis", vec![a.clone()], |t, v| {
            let r = t.sum_axis(v[0], Axis::Rows);
            let c = t.sum_axis(v[0], Axis::Cols);
            let c = t.reshape(c, 1, 3)?;
            t.concat(&[r, c], Axis::Cols)
        }),
        case("softmax", vec![a.clone()], |t, v| {
            let r = t.softmax(v[0], Axis::Rows);
            let c = t.softmax(v[0], Axis::Cols);
            t.concat(&[r, c], Axis::Rows)
        }),
        case("norm_sq", vec![a.clone()], |t, v| Ok(t.norm_sq(v[0]))),
        case("normalize_rows", vec![a.clone()], |t, v| Ok(t.normalize_rows(v[0]))),
        case("cosine_similarity", vec![a.clone(), random_tensor(rng, 3, 4, -1.0, 1.0)], |t, v| t.cosine_similarity(v[0], v[1])),
    ]
}

fn geometry_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mesh = grid_mesh(3, 4, 0.2);
    let m = mesh.vertex_count();
    let jitter = |rng: &mut ChaCha8Rng, frames: usize| {
        let mut d = Vec::new();
        for _ in 0..frames {
            d.extend(flatten(mesh.vertices()).iter().map(|x| x + rng.gen_range(-0.03..0.03)));
        }
        Tensor::from_vec(frames * m, 3, d)
    };
    let adj = Arc::new(mesh.adjacency());
    let faces = Arc::new(mesh.faces().to_vec());
    let faces2 = faces.clone();
    let x = jitter(rng, 2);

    let n = 5;
    let k = 3;
    let neighbors: Arc<Vec<Vec<usize>>> = Arc::new((0..n).map(|_| (0..k).map(|_| rng.gen_range(0..m)).collect()).collect());
    let nb2 = neighbors.clone();
    let nb3 = neighbors.clone();
    let alpha = random_tensor(rng, n, k, -1.0, 1.0);

    let bases = Arc::new(
        (0..4)
            .map(|i| ComposeBase {
                rotation: random_rotation(rng),
                pivot: if i % 2 == 0 { random_vec(rng) } else { Vec3::zeros() },
                offset: random_vec(rng),
            })
            .collect::<Vec<_>>(),
    );
    // Three vertices, two frames of two anchors, two anchors per vertex.
    let vidx: Arc<Vec<Vec<usize>>> = Arc::new(vec![vec![0, 1], vec![1, 0], vec![0, 1]]);
    vec![
        case("euler_rotations", vec![random_tensor(rng, 4, 3, -1.2, 1.2)], |t, v| euler_rotations_var(t, v[0])),
        case(
            "compose_transforms",
            vec![random_tensor(rng, 4, 9, -1.0, 1.0), random_tensor(rng, 4, 3, -1.0, 1.0)],
            move |t, v| compose_transforms_var(t, v[0], v[1], &bases),
        ),
        case(
            "lbs",
            vec![random_tensor(rng, 6, 3, -1.0, 1.0), random_tensor(rng, 4, 12, -1.0, 1.0), random_tensor(rng, 3, 2, -1.0, 1.0)],
            move |t, v| {
                let w = t.softmax(v[2], Axis::Cols);
                lbs_var(t, v[0], v[1], w, &vidx)
            },
        ),
        case(
            "transform_points",
            vec![random_tensor(rng, 3, 3, -1.0, 1.0), random_tensor(rng, 6, 12, -1.0, 1.0)],
            |t, v| transform_points_var(t, v[0], v[1]),
        ),
        case("laplacian", vec![x.clone()], move |t, v| laplacian_var(t, v[0], &adj)),
        case("face_normal_sum", vec![x.clone()], move |t, v| face_normal_sum_var(t, v[0], &faces, m)),
        case("vertex_normals", vec![x.clone()], move |t, v| vertex_normals_var(t, v[0], &faces2, m)),
        case("sparse_combine", vec![random_tensor(rng, n, k, 0.0, 1.0), x.clone()], move |t, v| {
            sparse_combine_frames_var(t, v[0], v[1], &neighbors, m)
        }),
        case("anchor_positions", vec![alpha, jitter(rng, 1)], move |t, v| anchor_positions_var(t, v[0], v[1], &nb2)),
        case("sparse_combine_single", vec![random_tensor(rng, n, k, 0.0, 1.0), jitter(rng, 1)], move |t, v| {
            sparse_combine_var(t, v[0], v[1], &nb3)
        }),
    ]
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mesh = grid_mesh(4, 4, 0.1);
    let m = mesh.vertex_count();
    let frames = 2;
    let jitter = |rng: &mut ChaCha8Rng| {
        let mut d = Vec::new();
        for _ in 0..frames {
            d.extend(flatten(mesh.vertices()).iter().map(|x| x + rng.gen_range(-0.02..0.02)));
        }
        Tensor::from_vec(frames * m, 3, d)
    };
    let pred = jitter(rng);
    let gt = jitter(rng);
    let adj = Arc::new(mesh.adjacency());
    let faces = Arc::new(mesh.faces().to_vec());
    let set = AnchorSet::initialize(&mesh, 4, 4, 2, rng.gen()).expect("fixture anchors");
    let nb = Arc::new(set.neighbor_indices.clone());
    let n = set.count();
    let alpha = nested_to_tensor(&set.alpha);
    let alpha = Tensor::from_vec(alpha.rows(), alpha.cols(), alpha.data().iter().map(|a| a + rng.gen_range(-0.5..0.5)).collect());
    let trs = Tensor::from_vec(
        frames * n,
        12,
        (0..frames * n)
            .flat_map(|_| {
                let r = euler_to_rotation([rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)]);
                let t = random_vec(rng) * 0.03;
                RigidTransform::new(r, t).to_array()
            })
            .collect(),
    );
    let positions = Tensor::from_points(&set.positions);

    // Pred sits at signed distance ±[0.1, 0.3] from its body point, so the
    // hinge at margin 0.05 is never within a finite-difference step.
    let normals = unit_rows(rng, frames * m);
    let pts = unflatten(pred.data());
    let body: Vec<Vec3> = pts
        .iter()
        .zip(&normals)
        .map(|(p, n)| {
            let s = rng.gen_range(0.1..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            p - n * s
        })
        .collect();
    let body = Tensor::from_vec(frames * m, 3, flatten(&body));
    let normals = Tensor::from_vec(frames * m, 3, flatten(&normals));

    let gt_lap = {
        let g = unflatten(gt.data());
        let l: Vec<f64> = g.chunks(m).flat_map(|f| flatten(&uniform_laplacian(&adj, f))).collect();
        Tensor::from_vec(frames * m, 3, l)
    };

    let anchor_case = {
        let (gt, nb, faces) = (gt.clone(), nb.clone(), faces.clone());
        move |t: &mut Tape, v: &[Var], which: &str| -> Result<Var> {
            let gv = t.constant(gt.clone());
            let aw = t.softmax(v[1], Axis::Cols);
            let terms = anchor_terms_var(
                t,
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
            if which == "consis" {
                consis_var(t, &terms, 0.1)
            } else {
                dir_var(t, &terms)
            }
        }
    };
    let anchor_case2 = anchor_case.clone();
    let anchor_inputs = vec![pred.clone(), alpha.clone(), trs, positions.clone()];
    let simplified = random_tensor(rng, 7, 3, -0.2, 0.2);
    let (gt_r, gt_l, adj_l) = (gt.clone(), gt_lap, adj.clone());
    vec![
        case("loss_rec", vec![pred.clone()], move |t, v| {
            let g = t.constant(gt_r.clone());
            rec_var(t, v[0], g)
        }),
        case("loss_lap", vec![pred.clone()], move |t, v| {
            let g = t.constant(gt_l.clone());
            lap_var(t, v[0], g, &adj_l)
        }),
        case("loss_collision", vec![pred.clone()], move |t, v| {
            let b = t.constant(body.clone());
            let n = t.constant(normals.clone());
            collision_var(t, v[0], b, n, 0.05)
        }),
        case("loss_consis", anchor_inputs.clone(), move |t, v| anchor_case(t, v, "consis")),
        case("loss_dir", anchor_inputs, move |t, v| anchor_case2(t, v, "dir")),
        case("loss_anchor_chamfer", vec![positions, simplified], |t, v| chamfer_var(t, v[0], v[1])),
        case(
            "chamfer",
            vec![random_tensor(rng, 7, 3, -1.0, 1.0), random_tensor(rng, 11, 3, -1.0, 1.0)],
            |t, v| chamfer_var(t, v[0], v[1]),
        ),
    ]
}

fn model_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let h = 3;
    let x = random_tensor(rng, 2, 4, -1.0, 1.0);
    let h0 = random_tensor(rng, 2, h, -0.5, 0.5);
    let mut gru_inputs = vec![x, h0];
    for i in 0..6 {
        gru_inputs.push(if i < 3 { random_tensor(rng, 4 + h, h, -0.5, 0.5) } else { random_tensor(rng, 1, h, -0.3, 0.3) });
    }
    let head_inputs = vec![
        random_tensor(rng, 2, h, -1.0, 1.0),
        random_tensor(rng, h, 4, -0.5, 0.5),
        random_tensor(rng, 1, 4, -0.3, 0.3),
        random_tensor(rng, 1, 1, 0.05, 0.5),
        random_tensor(rng, 4, 5, -0.5, 0.5),
        random_tensor(rng, 1, 5, -0.3, 0.3),
    ];
    vec![
        case("gru_cell", gru_inputs, |t, v| {
            let p = crate::model::GruVars {
                wz: v[2],
                wr: v[3],
                wh: v[4],
                bz: v[5],
                br: v[6],
                bh: v[7],
            };
            gru_cell(t, v[0], v[1], &p)
        }),
        case("mlp_head", head_inputs, |t, v| {
            let p = crate::model::HeadVars {
                fc1_w: v[1],
                fc1_b: v[2],
                prelu: v[3],
                fc2_w: v[4],
                fc2_b: v[5],
            };
            mlp_head(t, v[0], &p)
        }),
    ]
}

/// Tiny instance of the whole training graph: GRU encoder, heads, Euler
/// rotations, composition, skinning and the late-stage total loss with
/// targets left attached.
struct EndToEnd {
    mcfg: ModelConfig,
    n_params: usize,
    template: Tensor,
    gt: Tensor,
    gt_lap: Tensor,
    xs: Vec<Tensor>,
    h0: Tensor,
    bases: Arc<Vec<ComposeBase>>,
    neighbors: Arc<Vec<Vec<usize>>>,
    vertex_idx: Arc<Vec<Vec<usize>>>,
    adjacency: Arc<crate::geometry::VertexAdjacency>,
    faces: Arc<Vec<[usize; 3]>>,
    simplified: Tensor,
    body: Option<(Tensor, Tensor)>,
}

impl EndToEnd {
    fn new(rng: &mut ChaCha8Rng) -> Result<(Self, Vec<Tensor>)> {
        let mesh = grid_mesh(4, 4, 0.1);
        let m = mesh.vertex_count();
        let set = AnchorSet::initialize(&mesh, 4, 4, 2, rng.gen())?;
        let n = set.count();
        let frames = 2;
        let mcfg = ModelConfig {
            hidden_size: 3,
            mlp_hidden: 3,
            output_init_scale: 1.0,
            ..ModelConfig::new(3, n, m)
        };
        let params = ModelParams::init(&mcfg, rng.gen())?;
        let mut inputs: Vec<Tensor> = params.tensors().to_vec();
        for t in inputs.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let n_params = inputs.len();
        let mut alpha = nested_to_tensor(&set.alpha);
        alpha.data_mut().iter_mut().for_each(|a| *a += rng.gen_range(-0.5..0.5));
        let mut logits = nested_to_tensor(&set.weight_logits);
        logits.data_mut().iter_mut().for_each(|a| *a += rng.gen_range(-0.5..0.5));
        inputs.push(alpha);
        inputs.push(logits);

        let gt: Vec<f64> = (0..frames).flat_map(|_| flatten(mesh.vertices()).into_iter().map(|x| x + rng.gen_range(-0.02..0.02)).collect::<Vec<_>>()).collect();
        let adjacency = Arc::new(mesh.adjacency());
        let gt_pts = unflatten(&gt);
        let gt_lap: Vec<f64> = gt_pts.chunks(m).flat_map(|f| flatten(&uniform_laplacian(&adjacency, f))).collect();
        let bases = (0..frames * n)
            .map(|i| ComposeBase {
                rotation: euler_to_rotation([0.1 * i as f64, -0.05, 0.02]),
                pivot: if i % 2 == 0 { Vec3::new(0.01, 0.02, 0.0) } else { Vec3::zeros() },
                offset: random_vec(rng) * 0.02,
            })
            .collect();
        let mut e = EndToEnd {
            n_params,
            template: Tensor::from_vec(m, 3, flatten(mesh.vertices())),
            gt: Tensor::from_vec(frames * m, 3, gt),
            gt_lap: Tensor::from_vec(frames * m, 3, gt_lap),
            xs: (0..frames).map(|_| random_tensor(rng, 1, mcfg.input_dim(), -1.0, 1.0)).collect(),
            h0: random_tensor(rng, 1, 3, -0.1, 0.1),
            bases: Arc::new(bases),
            neighbors: Arc::new(set.neighbor_indices.clone()),
            vertex_idx: Arc::new(set.vertex_anchor_indices.clone()),
            adjacency,
            faces: Arc::new(mesh.faces().to_vec()),
            simplified: Tensor::from_vec(
                n + 2,
                3,
                set.positions.iter().cycle().take(n + 2).flatten().map(|x| x + rng.gen_range(-0.01..0.01)).collect(),
            ),
            body: None,
            mcfg,
        };
        // Body points placed at signed distance ±[0.1, 0.3] from the nominal
        // prediction, clear of the collision hinge.
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let (pred, _) = e.graph(&mut tape, &vars)?;
        let pts = unflatten(tape.value(pred).data());
        let normals = unit_rows(rng, pts.len());
        let body: Vec<Vec3> = pts
            .iter()
            .zip(&normals)
            .map(|(p, nn)| p - nn * (rng.gen_range(0.1..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }))
            .collect();
        e.body = Some((Tensor::from_vec(pts.len(), 3, flatten(&body)), Tensor::from_vec(pts.len(), 3, flatten(&normals))));
        Ok((e, inputs))
    }

    fn graph(&self, tape: &mut Tape, v: &[Var]) -> Result<(Var, Var)> {
        let m = self.template.rows();
        let frames = self.xs.len();
        let bound = BoundParams::from_vars(self.mcfg.gru_layers, v[..self.n_params].to_vec());
        let (alpha, logits) = (v[self.n_params], v[self.n_params + 1]);
        let template = tape.constant(self.template.clone());
        let alpha_w = tape.softmax(alpha, Axis::Cols);
        let positions = sparse_combine_var(tape, alpha_w, template, &self.neighbors)?;
        let weights = tape.softmax(logits, Axis::Cols);
        let xs: Vec<Var> = self.xs.iter().map(|x| tape.constant(x.clone())).collect();
        let init: Vec<Var> = (0..self.mcfg.gru_layers).map(|_| tape.constant(self.h0.clone())).collect();
        let feats = encode_sequence(tape, &xs, &bound, &init)?;
        let feat = tape.concat(&feats, Axis::Rows)?;
        let out = heads(tape, feat, &bound, &self.mcfg)?;
        let rot = euler_rotations_var(tape, out.euler)?;
        let transforms = compose_transforms_var(tape, rot, out.translation, &self.bases)?;
        let tiled: Vec<f64> = (0..frames).flat_map(|_| self.template.data().iter().copied()).collect();
        let tiled = tape.constant(Tensor::from_vec(frames * m, 3, tiled));
        let points = tape.add(tiled, out.displacement)?;
        let pred = lbs_var(tape, points, transforms, weights, &self.vertex_idx)?;

        let gt = tape.constant(self.gt.clone());
        let rec = rec_var(tape, pred, gt)?;
        let gl = tape.constant(self.gt_lap.clone());
        let lap = lap_var(tape, pred, gl, &self.adjacency)?;
        let terms = anchor_terms_var(
            tape,
            &AnchorGraphInputs {
                positions,
                alpha_weights: alpha_w,
                transforms,
                pred,
                gt,
                neighbors: &self.neighbors,
                faces: &self.faces,
                vertices: m,
                detach_targets: false,
            },
        )?;
        let consis = consis_var(tape, &terms, 0.1)?;
        let simp = tape.constant(self.simplified.clone());
        let anchor = chamfer_var(tape, positions, simp)?;
        let (collision, dir) = match &self.body {
            Some((b, n)) => {
                let b = tape.constant(b.clone());
                let n = tape.constant(n.clone());
                (Some(collision_var(tape, pred, b, n, 0.05)?), Some(dir_var(tape, &terms)?))
            }
            None => (None, None),
        };
        let comps = ComponentVars {
            rec,
            lap: Some(lap),
            collision,
            consis: Some(consis),
            dir,
            anchor: Some(anchor),
        };
        let total = total_loss_var(tape, &comps, &LossWeights::default(), Stage::Late)?;
        Ok((pred, total))
    }
}

/// The full suite for `seed`.
pub fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = elementwise_cases(&mut rng);
    out.extend(structural_cases(&mut rng));
    out.extend(geometry_cases(&mut rng));
    out.extend(loss_cases(&mut rng));
    out.extend(model_cases(&mut rng));
    let (e2e, inputs) = EndToEnd::new(&mut rng)?;
    out.push(case("end_to_end", inputs, move |t, v| Ok(e2e.graph(t, v)?.1)));
    Ok(out)
}

/// Runs every case. `corrupt` scales the backward pass of the named op, as a
/// negative control.
pub fn run(seed: u64, corrupt: Option<(&str, f64)>) -> Result<Report> {
    let opts = CheckOptions {
        seed,
        corrupt: corrupt.map(|(op, k)| (op.to_string(), k)),
        ..CheckOptions::default()
    };
    let mut results = Vec::new();
    for c in cases(seed)? {
        let mut tape = Tape::new();
        let vars: Vec<Var> = c.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        (c.build)(&mut tape, &vars)?;
        let ops = tape.op_names();
        let rep = check_gradients(&c.inputs, &c.build, &opts)?;
        results.push(CaseResult {
            name: c.name,
            max_rel_error: rep.max_rel_error(),
            ops,
        });
    }
    Ok(Report {
        cases: results,
        tolerance: FD_TOLERANCE,
    })
}
