//! Training loop, checkpoints, inference, evaluation and reference
//! baselines.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::{nested_to_tensor, sparse_combine_var, tensor_to_nested, AnchorSet, DEFAULT_NEIGHBORS, DEFAULT_VERTEX_ANCHORS};
use crate::autodiff::{Adam, AdamHyper, AdamMoments, Axis, Tape, Tensor, Var};
use crate::data::{write_text_atomic, MotionFrame, SequenceDataset};
use crate::error::{Error, Result};
use crate::geometry::{flatten, nearest, unflatten, uniform_laplacian, write_obj, Mesh, Vec3, VertexAdjacency};
use crate::losses::{
    anchor_terms_var, chamfer_var, collision_var, consis_var, dir_var, hausdorff, lap_var, metric_rmse, metric_sted, nearest_body,
    rec_var, total_loss, total_loss_var, AnchorGraphInputs, ComponentVars, LossComponents, LossWeights, Stage, COLLISION_MARGIN,
};
use crate::model::{encode_sequence, heads, init_hidden, pack_tensors, predict_sequence, unpack_tensors, HiddenMode, ModelConfig, ModelParams, TensorEntry};
use crate::parallel::par_map;
use crate::simplify::simplified_to;
use crate::skinning::{
    compose_transforms_var, euler_rotations_var, euler_to_rotation, lbs, lbs_var, AnchorStrategy, ComposeBase, FrameBasis, RigidTransform,
    DEFAULT_TIGHT_THRESHOLD,
};

pub const CHECKPOINT_VERSION: &str = "anchordef-checkpoint/1";

/// How anchor transforms are composed with the body motion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyMode {
    /// Relative to the root joint for every anchor.
    Loose,
    /// Relative to the nearest body vertex for every anchor.
    Tight,
    /// Tight within `tight_threshold` of the body, loose elsewhere.
    #[default]
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_late: f64,
    /// Last epoch trained at `lr`; defaults to 60% of `epochs`.
    pub lr_drop_epoch: Option<usize>,
    pub batch_size: usize,
    pub sequence_length: usize,
    /// First epoch (1-based) of the late stage; defaults to the last 20% of
    /// the epochs.
    pub late_stage_start: Option<usize>,
    pub seed: u64,
    pub weights: LossWeights,
    pub n_anchors: usize,
    pub neighbors: usize,
    pub vertex_anchors: usize,
    /// Simplified vertex count for the anchor Chamfer term; defaults to twice
    /// the anchor count, capped at the template size.
    pub simplify_target: Option<usize>,
    pub hidden_size: usize,
    pub mlp_hidden: usize,
    pub gru_layers: usize,
    pub init_state_std: f64,
    pub output_init_scale: f64,
    pub strategy: StrategyMode,
    pub tight_threshold: f64,
    pub collision_margin: f64,
    pub grad_clip: f64,
    /// Abort when a batch loss exceeds this multiple of the first one.
    pub divergence_factor: f64,
    pub detach_targets: bool,
    pub reassociate: bool,
    pub normalize_inputs: bool,
    pub threads: usize,
    /// Directory for the per-frame simplification cache; memory only if unset.
    pub cache_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-3,
            lr_late: 1e-4,
            lr_drop_epoch: None,
            batch_size: 8,
            sequence_length: 30,
            late_stage_start: None,
            seed: 0,
            weights: LossWeights::default(),
            n_anchors: 160,
            neighbors: DEFAULT_NEIGHBORS,
            vertex_anchors: DEFAULT_VERTEX_ANCHORS,
            simplify_target: None,
            hidden_size: 32,
            mlp_hidden: 32,
            gru_layers: 2,
            init_state_std: 0.1,
            output_init_scale: 0.01,
            strategy: StrategyMode::Mixed,
            tight_threshold: DEFAULT_TIGHT_THRESHOLD,
            collision_margin: COLLISION_MARGIN,
            grad_clip: 10.0,
            divergence_factor: 100.0,
            detach_targets: true,
            reassociate: true,
            normalize_inputs: true,
            threads: 1,
            cache_dir: None,
        }
    }
}

impl TrainConfig {
    /// Reads a TOML or JSON config (by extension; TOML otherwise).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn lr_drop(&self) -> usize {
        self.lr_drop_epoch.unwrap_or_else(|| (0.6 * self.epochs as f64).round() as usize)
    }

    pub fn late_start(&self) -> usize {
        self.late_stage_start
            .unwrap_or_else(|| self.epochs + 1 - (0.2 * self.epochs as f64).round() as usize)
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_drop() {
            self.lr
        } else {
            self.lr_late
        }
    }

    pub fn stage_at(&self, epoch: usize) -> Stage {
        if epoch >= self.late_start() {
            Stage::Late
        } else {
            Stage::Early
        }
    }

    pub fn simplify_count(&self, vertices: usize, anchors: usize) -> usize {
        self.simplify_target.unwrap_or(2 * anchors).min(vertices).max(4.min(vertices))
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("batch_size", self.batch_size),
            ("sequence_length", self.sequence_length),
            ("n_anchors", self.n_anchors),
            ("neighbors", self.neighbors),
            ("vertex_anchors", self.vertex_anchors),
            ("hidden_size", self.hidden_size),
            ("mlp_hidden", self.mlp_hidden),
            ("gru_layers", self.gru_layers),
            ("threads", self.threads),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("train config: {name} must be positive")));
        }
        if self.epochs > 0 && self.late_start() > self.epochs + 1 {
            return Err(Error::invalid(format!(
                "train config: late_stage_start {} is past the last epoch {}",
                self.late_start(),
                self.epochs
            )));
        }
        if self.late_start() == 0 {
            return Err(Error::invalid("train config: late_stage_start is 1-based"));
        }
        let rates = [self.lr, self.lr_late, self.grad_clip, self.divergence_factor];
        if rates.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("train config: learning rates, clip and divergence factor must be positive"));
        }
        if !(self.tight_threshold >= 0.0) || !(self.collision_margin >= 0.0) || !(self.init_state_std >= 0.0) {
            return Err(Error::invalid("train config: thresholds and margins must be non-negative"));
        }
        self.weights.validate()
    }

    fn model_config(&self, pose_dim: usize, n_anchors: usize, n_vertices: usize) -> ModelConfig {
        ModelConfig {
            hidden_size: self.hidden_size,
            mlp_hidden: self.mlp_hidden,
            gru_layers: self.gru_layers,
            init_state_std: self.init_state_std,
            output_init_scale: self.output_init_scale,
            ..ModelConfig::new(pose_dim, n_anchors, n_vertices)
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Everything needed to resume inference: model, anchors, strategy,
/// template and optimiser state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config: TrainConfig,
    pub model: ModelParams,
    pub anchors: AnchorSet,
    pub strategy: AnchorStrategy,
    pub template: Mesh,
    /// Moments for the model tensors, then α, then the blend logits.
    pub optimizer: Adam,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: String,
    epoch: usize,
    train: TrainConfig,
    model: ModelConfig,
    strategy: AnchorStrategy,
    template_obj: String,
    tensors: Vec<TensorEntry>,
    optimizer: OptimizerManifest,
}

#[derive(Serialize, Deserialize)]
struct OptimizerManifest {
    step: u64,
    hyper: AdamHyper,
    tensors: Vec<TensorEntry>,
}

fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Schema(e.to_string()))
}

fn optimizer_names(model: &ModelParams) -> Vec<String> {
    let mut names: Vec<String> = model.names().to_vec();
    names.push("anchors.alpha".into());
    names.push("anchors.weight_logits".into());
    names
}

fn optimizer_shapes(model: &ModelParams, anchors: &AnchorSet) -> Vec<(usize, usize)> {
    let mut shapes: Vec<(usize, usize)> = model.tensors().iter().map(|t| (t.rows(), t.cols())).collect();
    shapes.push((anchors.count(), anchors.neighbors_per_anchor()));
    shapes.push((anchors.vertex_anchor_indices.len(), anchors.anchors_per_vertex()));
    shapes
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text_atomic(&dir.join("anchors.json"), &to_json(&self.anchors)?)?;
        write_text_atomic(&dir.join("template.obj"), &write_obj(&self.template))?;
        let (table, bytes) = self.model.pack();
        write_bytes_atomic(&dir.join("model.bin"), &bytes)?;

        let names = optimizer_names(&self.model);
        let shapes = optimizer_shapes(&self.model, &self.anchors);
        let moments: Vec<(String, Tensor)> = names
            .iter()
            .zip(&shapes)
            .zip(&self.optimizer.moments)
            .flat_map(|((n, &(r, c)), st)| {
                [
                    (format!("m/{n}"), Tensor::from_vec(r, c, st.m.clone())),
                    (format!("v/{n}"), Tensor::from_vec(r, c, st.v.clone())),
                ]
            })
            .collect();
        let (otable, obytes) = pack_tensors(moments.iter().map(|(n, t)| (n.as_str(), t)));
        write_bytes_atomic(&dir.join("optim.bin"), &obytes)?;

        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION.into(),
            epoch: self.epoch,
            train: self.config.clone(),
            model: self.model.config.clone(),
            strategy: self.strategy.clone(),
            template_obj: "template.obj".into(),
            tensors: table,
            optimizer: OptimizerManifest {
                step: self.optimizer.step,
                hyper: self.optimizer.hyper,
                tensors: otable,
            },
        };
        write_text_atomic(&dir.join("model.manifest.json"), &to_json(&manifest)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(&dir.join("model.manifest.json"))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint version {:?} (expected {CHECKPOINT_VERSION:?})",
                manifest.version
            )));
        }
        let anchors: AnchorSet = read_json(&dir.join("anchors.json"))?;
        let template = crate::geometry::load_obj(dir.join(&manifest.template_obj))?;
        anchors.validate(template.vertex_count())?;
        let bin = dir.join("model.bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let model = ModelParams::unpack(&manifest.model, &manifest.tensors, &bytes)?;
        if model.config.n_vertices != template.vertex_count() || model.config.n_anchors != anchors.count() {
            return Err(Error::Schema(format!(
                "checkpoint model expects {} vertices and {} anchors; template has {}, anchor set has {}",
                model.config.n_vertices,
                model.config.n_anchors,
                template.vertex_count(),
                anchors.count()
            )));
        }
        manifest.strategy.validate(anchors.count(), usize::MAX)?;

        let opath = dir.join("optim.bin");
        let obytes = fs::read(&opath).map_err(|e| Error::io(&opath, e))?;
        let otensors = unpack_tensors(&manifest.optimizer.tensors, &obytes)?;
        let names = optimizer_names(&model);
        if otensors.len() != 2 * names.len() {
            return Err(Error::Schema(format!(
                "optimizer state has {} tensors, expected {}",
                otensors.len(),
                2 * names.len()
            )));
        }
        let shapes = optimizer_shapes(&model, &anchors);
        let mut moments = Vec::with_capacity(names.len());
        for (i, ((name, &(r, c)), pair)) in names.iter().zip(&shapes).zip(otensors.chunks_exact(2)).enumerate() {
            let (m, v) = (&pair[0], &pair[1]);
            let entry = &manifest.optimizer.tensors[2 * i];
            if entry.name != format!("m/{name}") || m.rows() != r || m.cols() != c || v.rows() != r || v.cols() != c {
                return Err(Error::Schema(format!("optimizer tensor {} does not match parameter {name}", entry.name)));
            }
            moments.push(AdamMoments {
                m: m.data().to_vec(),
                v: v.data().to_vec(),
            });
        }
        Ok(Checkpoint {
            epoch: manifest.epoch,
            config: manifest.train,
            model,
            anchors,
            strategy: manifest.strategy,
            template,
            optimizer: Adam {
                hyper: manifest.optimizer.hyper,
                step: manifest.optimizer.step,
                moments,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Logs

/// Mean loss components of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub batches: usize,
    pub rec: f64,
    pub lap: f64,
    pub collision: f64,
    pub consis: f64,
    pub dir: f64,
    pub anchor: f64,
    /// `rec + β₁·lap (+ β₂·collision in the late stage)`.
    pub vert: f64,
    pub total: f64,
    /// Set on the epoch that re-associated anchors and vertices.
    #[serde(default)]
    pub reassociated: bool,
}

pub fn loss_curve_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,stage,lr,rec,lap,collision,consis,dir,anchor,vert,total\n");
    for e in log {
        let stage = match e.stage {
            Stage::Early => "early",
            Stage::Late => "late",
        };
        let _ = writeln!(
            s,
            "{},{stage},{},{},{},{},{},{},{},{},{}",
            e.epoch, e.lr, e.rec, e.lap, e.collision, e.consis, e.dir, e.anchor, e.vert, e.total
        );
    }
    s
}

/// Line chart of log10 total and reconstruction loss per epoch.
pub fn loss_curve_svg(log: &[EpochLog]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let series: [(&str, &str, Vec<f64>); 2] = [
        ("total", "#1f77b4", log.iter().map(|e| e.total).collect()),
        ("rec", "#d62728", log.iter().map(|e| e.rec).collect()),
    ];
    let logs: Vec<f64> = series
        .iter()
        .flat_map(|(_, _, v)| v.iter().filter(|x| **x > 0.0).map(|x| x.log10()))
        .collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (-1.0, 0.0) };
    let n = log.len().max(2) - 1;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v.max(1e-300).log10() - lo) / (hi - lo);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n\
         <text x=\"12\" y=\"{cy}\" font-size=\"12\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">log10 loss</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        ty = h - 12.0,
        cy = h / 2.0
    );
    for k in lo as i64..=hi as i64 {
        let yy = h - pad - (h - 2.0 * pad) * (k as f64 - lo) / (hi - lo);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{k}</text>", pad - 4.0, yy + 3.0);
    }
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        let _ = writeln!(s, "<text x=\"{pad}\" y=\"{}\" font-size=\"10\">{}</text>", h - pad + 14.0, first.epoch);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{}</text>", w - pad, h - pad + 14.0, last.epoch);
    }
    for (i, (name, colour, values)) in series.iter().enumerate() {
        let pts: Vec<String> = values.iter().enumerate().map(|(j, v)| format!("{:.2},{:.2}", x(j), y(*v))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let ly = pad + 14.0 * i as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\" font-size=\"11\" fill=\"{colour}\">{name}</text>", w - pad - 40.0);
    }
    s.push_str("</svg>\n");
    s
}

fn write_logs(dir: &Path, log: &[EpochLog]) -> Result<()> {
    let mut jsonl = String::new();
    for e in log {
        jsonl.push_str(&serde_json::to_string(e).map_err(|e| Error::Schema(e.to_string()))?);
        jsonl.push('\n');
    }
    write_text_atomic(&dir.join("train_log.jsonl"), &jsonl)?;
    write_text_atomic(&dir.join("loss_curve.csv"), &loss_curve_csv(log))?;
    write_text_atomic(&dir.join("loss_curve.svg"), &loss_curve_svg(log))
}

// ---------------------------------------------------------------------------
// Simplification cache

/// Memoised QEM simplification of ground-truth frames, keyed by a hash of
/// the positions and the target count.
pub struct SimplifyCache {
    dir: Option<PathBuf>,
    memory: HashMap<[u8; 32], Vec<Vec3>>,
}

impl SimplifyCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        SimplifyCache {
            dir,
            memory: HashMap::new(),
        }
    }

    pub fn key(positions: &[Vec3], target: usize) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((target as u64).to_le_bytes());
        for v in positions {
            for c in v.iter() {
                h.update(c.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }

    pub fn get(&mut self, template: &Mesh, positions: &[Vec3], target: usize) -> Result<Vec<Vec3>> {
        let key = Self::key(positions, target);
        if let Some(v) = self.memory.get(&key) {
            return Ok(v.clone());
        }
        let hex: String = key.iter().map(|b| format!("{b:02x}")).collect();
        let file = self.dir.as_ref().map(|d| d.join(format!("{hex}.bin")));
        if let Some(f) = &file {
            if let Ok(bytes) = fs::read(f) {
                if bytes.len() % 24 == 0 {
                    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    let pts = unflatten(&vals);
                    self.memory.insert(key, pts.clone());
                    return Ok(pts);
                }
            }
        }
        let pts = simplified_to(&template.with_positions(positions.to_vec())?, target)?;
        if let (Some(f), Some(d)) = (&file, &self.dir) {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let bytes: Vec<u8> = flatten(&pts).iter().flat_map(|v| v.to_le_bytes()).collect();
            write_bytes_atomic(f, &bytes)?;
        }
        self.memory.insert(key, pts.clone());
        Ok(pts)
    }
}

// ---------------------------------------------------------------------------
// Training

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Anchor strategy for `mode`, classified on the rest body.
pub fn build_strategy(mode: StrategyMode, anchors: &AnchorSet, body_rest: &[Vec3], threshold: f64) -> AnchorStrategy {
    match mode {
        StrategyMode::Loose => AnchorStrategy::all_loose(anchors.count()),
        StrategyMode::Tight => AnchorStrategy::classify(&anchors.position_vecs(), body_rest, f64::INFINITY),
        StrategyMode::Mixed => AnchorStrategy::classify(&anchors.position_vecs(), body_rest, threshold),
    }
}

fn frame_basis(frame: &MotionFrame) -> FrameBasis<'_> {
    FrameBasis {
        r_global: &frame.r_global,
        j_root: &frame.j_root,
        translation: &frame.translation,
        body_transforms: frame.body_vertex_transforms.as_deref(),
    }
}

fn check_training_data(ds: &SequenceDataset, template: &Mesh, cfg: &TrainConfig) -> Result<()> {
    if ds.clips.is_empty() || ds.frame_count() == 0 {
        return Err(Error::invalid("training dataset is empty"));
    }
    ds.validate()?;
    for (c, clip) in ds.clips.iter().enumerate() {
        if clip.frames.len() < cfg.sequence_length {
            return Err(Error::invalid(format!(
                "clip {c} ({}) has {} frames, shorter than the training window of {}",
                clip.name,
                clip.frames.len(),
                cfg.sequence_length
            )));
        }
        for (f, frame) in clip.frames.iter().enumerate() {
            match &frame.gt_garment_vertices {
                None => return Err(Error::invalid(format!("clip {c}, frame {f}: training needs ground-truth garment vertices"))),
                Some(gt) if gt.len() != template.vertex_count() => {
                    return Err(Error::invalid(format!(
                        "clip {c}, frame {f}: ground truth has {} vertices, template has {}",
                        gt.len(),
                        template.vertex_count()
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Per-feature mean and standard deviation of the training inputs.
fn input_normalisation(ds: &SequenceDataset) -> (Vec<f64>, Vec<f64>) {
    let inputs: Vec<Vec<f64>> = ds.clips.iter().flat_map(|c| c.frames.iter().map(MotionFrame::input_vector)).collect();
    let d = inputs[0].len();
    let n = inputs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| inputs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let scale = (0..d)
        .map(|j| {
            let var = inputs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-8 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Initial checkpoint: anchors (given or k-means), strategy, model and a
/// fresh optimiser.
pub fn initialize(ds: &SequenceDataset, template: &Mesh, cfg: &TrainConfig, anchors: Option<AnchorSet>) -> Result<Checkpoint> {
    cfg.validate()?;
    let anchors = match anchors {
        Some(a) => {
            a.validate(template.vertex_count())?;
            a
        }
        None => AnchorSet::initialize(template, cfg.n_anchors, cfg.neighbors, cfg.vertex_anchors, cfg.seed)?,
    };
    let strategy = build_strategy(cfg.strategy, &anchors, &ds.body_rest(), cfg.tight_threshold);
    let mut mcfg = cfg.model_config(ds.pose_dim(), anchors.count(), template.vertex_count());
    if cfg.normalize_inputs && ds.frame_count() > 0 {
        let (shift, scale) = input_normalisation(ds);
        mcfg.input_shift = shift;
        mcfg.input_scale = scale;
    }
    let model = ModelParams::init(&mcfg, cfg.seed.wrapping_add(1))?;
    let sizes: Vec<usize> = optimizer_shapes(&model, &anchors).iter().map(|(r, c)| r * c).collect();
    let optimizer = Adam::new(
        AdamHyper {
            lr: cfg.lr,
            ..AdamHyper::default()
        },
        &sizes,
    );
    Ok(Checkpoint {
        epoch: 0,
        config: cfg.clone(),
        model,
        anchors,
        strategy,
        template: template.clone(),
        optimizer,
    })
}

struct Trainer<'a> {
    ds: &'a SequenceDataset,
    cfg: &'a TrainConfig,
    ck: Checkpoint,
    adjacency: Arc<VertexAdjacency>,
    faces: Arc<Vec<[usize; 3]>>,
    simplified_template: Vec<Vec3>,
    simplify_target: usize,
    cache: SimplifyCache,
    rng: ChaCha8Rng,
    initial_loss: Option<f64>,
}

struct BatchResult {
    components: LossComponents,
    total: f64,
}

impl Trainer<'_> {
    fn windows(&mut self) -> Vec<(usize, usize)> {
        let t = self.cfg.sequence_length;
        let mut w = Vec::new();
        for (c, clip) in self.ds.clips.iter().enumerate() {
            for _ in 0..clip.frames.len() / t {
                w.push((c, self.rng.gen_range(0..=clip.frames.len() - t)));
            }
        }
        w.shuffle(&mut self.rng);
        w
    }

    fn batch(&mut self, windows: &[(usize, usize)], epoch: usize, step: usize, stage: Stage) -> Result<BatchResult> {
        let cfg = self.cfg;
        let ds = self.ds;
        let b = windows.len();
        let t_len = cfg.sequence_length;
        let f_count = b * t_len;
        let m = self.ck.template.vertex_count();
        let n = self.ck.anchors.count();
        let frame_at = |f: usize| -> &MotionFrame {
            let (t, bi) = (f / b, f % b);
            let (c, s) = windows[bi];
            &ds.clips[c].frames[s + t]
        };
        let gt_of = |f: usize| frame_at(f).gt_garment_vertices.as_deref().expect("checked ground truth");
        let mcfg = self.ck.model.config.clone();

        let mut tape = Tape::new();
        let bound = self.ck.model.bind(&mut tape, true);
        let alpha = tape.leaf(nested_to_tensor(&self.ck.anchors.alpha));
        let logits = tape.leaf(nested_to_tensor(&self.ck.anchors.weight_logits));
        let neighbors = Arc::new(self.ck.anchors.neighbor_indices.clone());
        let vertex_idx = Arc::new(self.ck.anchors.vertex_anchor_indices.clone());
        let template_flat = flatten(self.ck.template.vertices());
        let template = tape.constant(Tensor::from_vec(m, 3, template_flat.clone()));
        let alpha_w = tape.softmax(alpha, Axis::Cols);
        let positions = sparse_combine_var(&mut tape, alpha_w, template, &neighbors)?;
        let weights = tape.softmax(logits, Axis::Cols);

        // Encoder over T steps of B windows; stacked row order is f = t·B + b.
        let in_dim = mcfg.input_dim();
        let xs: Vec<Var> = (0..t_len)
            .map(|t| {
                let data: Vec<f64> = (0..b).flat_map(|bi| mcfg.normalize_input(&frame_at(t * b + bi).input_vector())).collect();
                tape.constant(Tensor::from_vec(b, in_dim, data))
            })
            .collect();
        let init: Vec<Var> = init_hidden(&mcfg, HiddenMode::Train, b, &mut self.rng)
            .into_iter()
            .map(|h| tape.constant(h))
            .collect();
        let feats = encode_sequence(&mut tape, &xs, &bound, &init)?;
        let feat = tape.concat(&feats, Axis::Rows)?;
        let out = heads(&mut tape, feat, &bound, &mcfg)?;
        let rot = euler_rotations_var(&mut tape, out.euler)?;
        let mut bases: Vec<ComposeBase> = Vec::with_capacity(f_count * n);
        for f in 0..f_count {
            bases.extend(self.ck.strategy.bases(&frame_basis(frame_at(f)))?);
        }
        let transforms = compose_transforms_var(&mut tape, rot, out.translation, &Arc::new(bases))?;
        let tiled: Vec<f64> = (0..f_count).flat_map(|_| template_flat.iter().copied()).collect();
        let tiled = tape.constant(Tensor::from_vec(f_count * m, 3, tiled));
        let points = tape.add(tiled, out.displacement)?;
        let pred = lbs_var(&mut tape, points, transforms, weights, &vertex_idx)?;

        let gt_data: Vec<f64> = (0..f_count).flat_map(|f| flatten(gt_of(f))).collect();
        let gt = tape.constant(Tensor::from_vec(f_count * m, 3, gt_data));
        let rec = rec_var(&mut tape, pred, gt)?;
        let gt_lap: Vec<f64> = (0..f_count).flat_map(|f| flatten(&uniform_laplacian(&self.adjacency, gt_of(f)))).collect();
        let gt_lap = tape.constant(Tensor::from_vec(f_count * m, 3, gt_lap));
        let lap = lap_var(&mut tape, pred, gt_lap, &self.adjacency)?;
        let terms = anchor_terms_var(
            &mut tape,
            &AnchorGraphInputs {
                positions,
                alpha_weights: alpha_w,
                transforms,
                pred,
                gt,
                neighbors: &neighbors,
                faces: &self.faces,
                vertices: m,
                detach_targets: cfg.detach_targets,
            },
        )?;
        let consis = consis_var(&mut tape, &terms, cfg.weights.gamma)?;

        // Anchor Chamfer: anchors on the template against the simplified
        // template, and the same α-combination evaluated on one sampled
        // ground-truth frame against that frame's simplification.
        let simp_t = tape.constant(Tensor::from_vec(self.simplified_template.len(), 3, flatten(&self.simplified_template)));
        let ch_t = chamfer_var(&mut tape, positions, simp_t)?;
        let fs_idx = self.rng.gen_range(0..f_count);
        let simp_f = self.cache.get(&self.ck.template, gt_of(fs_idx), self.simplify_target)?;
        let simp_f = tape.constant(Tensor::from_vec(simp_f.len(), 3, flatten(&simp_f)));
        let gt_f = tape.constant(Tensor::from_vec(m, 3, flatten(gt_of(fs_idx))));
        let p_f = sparse_combine_var(&mut tape, alpha_w, gt_f, &neighbors)?;
        let ch_f = chamfer_var(&mut tape, p_f, simp_f)?;
        let anchor = tape.add(ch_t, ch_f)?;

        let (collision, dir) = if stage == Stage::Late {
            let pred_pts = unflatten(tape.value(pred).data());
            let frames: Vec<usize> = (0..f_count).collect();
            let near: Vec<Vec<f64>> = par_map(cfg.threads, &frames, |_, &f| {
                let fr = frame_at(f);
                let idx = nearest_body(&pred_pts[f * m..(f + 1) * m], &fr.body_vertices)?;
                Ok::<_, Error>(
                    idx.iter()
                        .flat_map(|&i| {
                            let (p, nn) = (fr.body_vertices[i], fr.body_normals[i]);
                            [p.x, p.y, p.z, nn.x, nn.y, nn.z]
                        })
                        .collect(),
                )
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let (mut bp, mut bn) = (Vec::with_capacity(f_count * m * 3), Vec::with_capacity(f_count * m * 3));
            for row in near.iter().flat_map(|v| v.chunks_exact(6)) {
                bp.extend_from_slice(&row[..3]);
                bn.extend_from_slice(&row[3..]);
            }
            let bp = tape.constant(Tensor::from_vec(f_count * m, 3, bp));
            let bn = tape.constant(Tensor::from_vec(f_count * m, 3, bn));
            let col = collision_var(&mut tape, pred, bp, bn, cfg.collision_margin)?;
            (Some(col), Some(dir_var(&mut tape, &terms)?))
        } else {
            (None, None)
        };
        let comps = ComponentVars {
            rec,
            lap: Some(lap),
            collision,
            consis: Some(consis),
            dir,
            anchor: Some(anchor),
        };
        let total = total_loss_var(&mut tape, &comps, &cfg.weights, stage)?;
        let value = |v: Option<Var>, tape: &Tape| v.map_or(0.0, |v| tape.value(v).item());
        let components = LossComponents {
            rec: tape.value(rec).item(),
            lap: tape.value(lap).item(),
            collision: value(collision, &tape),
            consis: tape.value(consis).item(),
            dir: value(dir, &tape),
            anchor: tape.value(anchor).item(),
        };
        let total_value = tape.value(total).item();
        if !total_value.is_finite() {
            return Err(Error::Training(format!("non-finite loss at epoch {epoch}, step {step}: {components:?}")));
        }
        match self.initial_loss {
            None => self.initial_loss = Some(total_value),
            Some(l0) if total_value > cfg.divergence_factor * l0 => {
                return Err(Error::Training(format!(
                    "loss diverged at epoch {epoch}, step {step}: {total_value:.4e} exceeds {} times the initial {l0:.4e}",
                    cfg.divergence_factor
                )))
            }
            _ => {}
        }

        tape.backward(total)?;
        let mut vars = bound.vars.clone();
        vars.push(alpha);
        vars.push(logits);
        let mut grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
            .collect();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient at epoch {epoch}, step {step}")));
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let k = cfg.grad_clip / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= k);
        }
        drop(tape);

        let mut alpha_t = nested_to_tensor(&self.ck.anchors.alpha);
        let mut logits_t = nested_to_tensor(&self.ck.anchors.weight_logits);
        {
            let mut params: Vec<&mut [f64]> = self.ck.model.tensors_mut().iter_mut().map(Tensor::data_mut).collect();
            params.push(alpha_t.data_mut());
            params.push(logits_t.data_mut());
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            self.ck.optimizer.step(&mut params, &grad_refs);
        }
        self.ck.anchors.alpha = tensor_to_nested(&alpha_t);
        self.ck.anchors.weight_logits = tensor_to_nested(&logits_t);
        self.ck.anchors.refresh_positions(&self.ck.template);
        Ok(BatchResult {
            components,
            total: total_value,
        })
    }

    fn epoch(&mut self, epoch: usize) -> Result<EpochLog> {
        let cfg = self.cfg;
        let stage = cfg.stage_at(epoch);
        let lr = cfg.lr_at(epoch);
        self.ck.optimizer.set_lr(lr);
        let mut reassociated = false;
        if stage == Stage::Late && epoch == cfg.late_start() && cfg.reassociate {
            self.ck.anchors = self.ck.anchors.reassociate(&self.ck.template)?;
            self.ck.anchors.validate(self.ck.template.vertex_count())?;
            let k = self.ck.optimizer.moments.len();
            self.ck.optimizer.reset(k - 2);
            self.ck.optimizer.reset(k - 1);
            reassociated = true;
            log::info!("epoch {epoch}: re-associated anchors and vertices");
        }
        let windows = self.windows();
        let mut sum = LossComponents::default();
        let mut total = 0.0;
        let batches: Vec<&[(usize, usize)]> = windows.chunks(cfg.batch_size).collect();
        for (i, w) in batches.iter().enumerate() {
            let r = self.batch(w, epoch, i + 1, stage)?;
            sum.rec += r.components.rec;
            sum.lap += r.components.lap;
            sum.collision += r.components.collision;
            sum.consis += r.components.consis;
            sum.dir += r.components.dir;
            sum.anchor += r.components.anchor;
            total += r.total;
        }
        let k = batches.len().max(1) as f64;
        let mean = LossComponents {
            rec: sum.rec / k,
            lap: sum.lap / k,
            collision: sum.collision / k,
            consis: sum.consis / k,
            dir: sum.dir / k,
            anchor: sum.anchor / k,
        };
        let w = &cfg.weights;
        let vert = mean.rec + w.beta1 * mean.lap + if stage == Stage::Late { w.beta2 * mean.collision } else { 0.0 };
        debug_assert!((total_loss(&mean, w, stage) - total / k).abs() <= 1e-9 * (1.0 + total.abs()));
        Ok(EpochLog {
            epoch,
            stage,
            lr,
            batches: batches.len(),
            rec: mean.rec,
            lap: mean.lap,
            collision: mean.collision,
            consis: mean.consis,
            dir: mean.dir,
            anchor: mean.anchor,
            vert,
            total: total / k,
            reassociated,
        })
    }
}

/// Trains on `ds` (its own template unless `template` is given). With
/// `out_dir`, writes the initial checkpoint and one per epoch plus logs.
pub fn train(
    ds: &SequenceDataset,
    template: Option<&Mesh>,
    cfg: &TrainConfig,
    anchors: Option<AnchorSet>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let template = template.unwrap_or(&ds.template).clone();
    cfg.validate()?;
    check_training_data(ds, &template, cfg)?;
    let ck = initialize(ds, &template, cfg, anchors)?;
    let target = cfg.simplify_count(template.vertex_count(), ck.anchors.count());
    let simplified_template = simplified_to(&template, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut trainer = Trainer {
        ds,
        cfg,
        adjacency: Arc::new(template.adjacency()),
        faces: Arc::new(template.faces().to_vec()),
        ck,
        simplified_template,
        simplify_target: target,
        cache: SimplifyCache::new(cfg.cache_dir.clone()),
        rng,
        initial_loss: None,
    };
    if let Some(dir) = out_dir {
        trainer.ck.save(dir)?;
        write_logs(dir, &[])?;
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let entry = trainer.epoch(epoch)?;
        trainer.ck.epoch = epoch;
        log::info!(
            "epoch {epoch}/{} [{:?}] rec {:.4e} total {:.4e} ({:.1}s)",
            cfg.epochs,
            entry.stage,
            entry.rec,
            entry.total,
            start.elapsed().as_secs_f64()
        );
        log.push(entry);
        if let Some(dir) = out_dir {
            trainer.ck.save(dir)?;
            write_logs(dir, &log)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: trainer.ck,
        log,
    })
}

// ---------------------------------------------------------------------------
// Inference

/// Deformed garment for every frame, from a zero initial state.
pub fn infer(ck: &Checkpoint, frames: &[MotionFrame]) -> Result<Vec<Vec<Vec3>>> {
    let cfg = &ck.model.config;
    if let Some(f) = frames.iter().find(|f| f.input_vector().len() != cfg.input_dim()) {
        return Err(Error::invalid(format!(
            "motion has pose dimension {}, the checkpoint expects {}",
            f.theta.len(),
            cfg.pose_dim
        )));
    }
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let inputs: Vec<Vec<f64>> = frames.iter().map(MotionFrame::input_vector).collect();
    let preds = predict_sequence(&ck.model, &inputs)?;
    frames
        .iter()
        .zip(preds)
        .map(|(frame, p)| {
            let bases = ck.strategy.bases(&frame_basis(frame))?;
            let transforms: Vec<RigidTransform> = bases
                .iter()
                .zip(p.euler.iter().zip(&p.translation))
                .map(|(b, (e, t))| b.apply(&RigidTransform::new(euler_to_rotation(*e), Vec3::from(*t))))
                .collect();
            let disp: Vec<Vec3> = p.displacement.iter().map(|d| Vec3::from(*d)).collect();
            lbs(ck.template.vertices(), &disp, &transforms, &ck.anchors)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Baselines

/// Template moved rigidly by the root motion: `R_g(v − J) + J + t`.
pub fn baseline_rigid(template: &Mesh, frames: &[MotionFrame]) -> Vec<Vec<Vec3>> {
    frames
        .iter()
        .map(|f| {
            template
                .vertices()
                .iter()
                .map(|v| f.r_global * (v - f.j_root) + f.j_root + f.translation)
                .collect()
        })
        .collect()
}

/// Every garment vertex follows the transform of its nearest rest body vertex.
pub fn baseline_body_skinning(template: &Mesh, body_rest: &[Vec3], frames: &[MotionFrame]) -> Result<Vec<Vec<Vec3>>> {
    let near: Vec<usize> = template
        .vertices()
        .iter()
        .map(|v| nearest(v, body_rest).map(|(i, _)| i).ok_or_else(|| Error::invalid("empty body template")))
        .collect::<Result<_>>()?;
    frames
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let tr = f
                .body_vertex_transforms
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("frame {fi} has no per-vertex body transforms")))?;
            template
                .vertices()
                .iter()
                .zip(&near)
                .map(|(v, &i)| {
                    tr.get(i)
                        .map(|t| t.apply(v))
                        .ok_or_else(|| Error::invalid(format!("frame {fi}: body vertex {i} has no transform")))
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    /// 1-based frame number.
    pub frame: usize,
    pub rmse_mm: f64,
    pub hausdorff_mm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Over all frames.
    pub rmse_mm: f64,
    /// Mean over frames.
    pub hausdorff_mm: f64,
    /// Absent for single-frame sequences.
    pub sted: Option<f64>,
}

pub fn evaluate(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], mesh: &Mesh, threads: usize) -> Result<EvalReport> {
    let rmse_mm = metric_rmse(pred, gt)?;
    let pairs: Vec<(&Vec<Vec3>, &Vec<Vec3>)> = pred.iter().zip(gt).collect();
    let rows = par_map(threads, &pairs, |i, (p, g)| {
        Ok::<_, Error>(EvalRow {
            frame: i + 1,
            rmse_mm: metric_rmse(std::slice::from_ref(*p), std::slice::from_ref(*g))?,
            hausdorff_mm: hausdorff(p, g)? * 1000.0,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let hausdorff_mm = rows.iter().map(|r| r.hausdorff_mm).sum::<f64>() / rows.len() as f64;
    let sted = if pred.len() >= 2 { Some(metric_sted(pred, gt, mesh)?) } else { None };
    Ok(EvalReport {
        rows,
        rmse_mm,
        hausdorff_mm,
        sted,
    })
}

impl EvalReport {
    /// `frame,rmse_mm,hausdorff_mm,sted`; STED appears only in the closing
    /// `summary` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,rmse_mm,hausdorff_mm,sted\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},", r.frame, r.rmse_mm, r.hausdorff_mm);
        }
        let sted = self.sted.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "summary,{},{},{sted}", self.rmse_mm, self.hausdorff_mm);
        s
    }
}
