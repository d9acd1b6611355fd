//! Recurrent motion encoder and the two output heads.
//!
//! Parameters live in [`ModelParams`] as named tensors; a forward pass binds
//! them onto a [`Tape`] (as trainable leaves or constants) and runs there, so
//! the same code serves training and inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Length of the pose vector θ; the encoder input is `[θ, t]`.
    pub pose_dim: usize,
    pub hidden_size: usize,
    pub gru_layers: usize,
    pub mlp_hidden: usize,
    pub n_anchors: usize,
    pub n_vertices: usize,
    pub init_state_std: f64,
    /// Multiplier on the initial output-layer weights of both heads.
    #[serde(default = "default_output_scale")]
    pub output_init_scale: f64,
    /// Per-feature input normalisation `(x − shift) / scale`; empty means none.
    #[serde(default)]
    pub input_shift: Vec<f64>,
    #[serde(default)]
    pub input_scale: Vec<f64>,
}

fn default_output_scale() -> f64 {
    0.01
}

impl ModelConfig {
    pub fn new(pose_dim: usize, n_anchors: usize, n_vertices: usize) -> Self {
        ModelConfig {
            pose_dim,
            hidden_size: 32,
            gru_layers: 2,
            mlp_hidden: 32,
            n_anchors,
            n_vertices,
            init_state_std: 0.1,
            output_init_scale: default_output_scale(),
            input_shift: Vec::new(),
            input_scale: Vec::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.pose_dim + 3
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("pose_dim", self.pose_dim),
            ("hidden_size", self.hidden_size),
            ("gru_layers", self.gru_layers),
            ("mlp_hidden", self.mlp_hidden),
            ("n_anchors", self.n_anchors),
            ("n_vertices", self.n_vertices),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        if !(self.init_state_std >= 0.0) {
            return Err(Error::invalid("model config: init_state_std must be non-negative"));
        }
        let d = self.input_dim();
        if !(self.input_shift.is_empty() || self.input_shift.len() == d)
            || self.input_scale.len() != self.input_shift.len()
            || self.input_scale.iter().any(|s| !(*s > 0.0))
        {
            return Err(Error::invalid(format!("model config: input normalisation must have {d} positive scales")));
        }
        Ok(())
    }

    /// Applies the input normalisation to a raw `[θ, t]` vector.
    pub fn normalize_input(&self, x: &[f64]) -> Vec<f64> {
        if self.input_shift.is_empty() {
            return x.to_vec();
        }
        x.iter()
            .zip(self.input_shift.iter().zip(&self.input_scale))
            .map(|(v, (s, k))| (v - s) / k)
            .collect()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Shapes of every parameter, in storage order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let h = cfg.hidden_size;
    let mut out = Vec::new();
    for layer in 1..=cfg.gru_layers {
        let input = if layer == 1 { cfg.input_dim() } else { h };
        for g in ["wz", "wr", "wh"] {
            out.push((format!("gru{layer}.{g}"), input + h, h));
        }
        for g in ["bz", "br", "bh"] {
            out.push((format!("gru{layer}.{g}"), 1, h));
        }
    }
    for (head, width) in [("head_rt", 6 * cfg.n_anchors), ("head_d", 3 * cfg.n_vertices)] {
        out.push((format!("{head}.fc1.w"), h, cfg.mlp_hidden));
        out.push((format!("{head}.fc1.b"), 1, cfg.mlp_hidden));
        out.push((format!("{head}.prelu"), 1, 1));
        out.push((format!("{head}.fc2.w"), cfg.mlp_hidden, width));
        out.push((format!("{head}.fc2.b"), 1, width));
    }
    out
}

impl ModelParams {
    /// Weights uniform in `±1/√fan_in`, biases zero, PReLU slopes 0.25; the
    /// head output layers are additionally scaled by `output_init_scale`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, rows, cols) in parameter_layout(config) {
            let t = if name.ends_with(".prelu") {
                Tensor::filled(rows, cols, 0.25)
            } else if rows == 1 {
                Tensor::zeros(rows, cols)
            } else {
                let bound = 1.0 / (rows as f64).sqrt();
                let scale = if name.ends_with(".fc2.w") { config.output_init_scale } else { 1.0 };
                Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound) * scale).collect())
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Builds from tensors given in [`parameter_layout`] order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(config);
        if layout.len() != tensors.len() {
            return Err(Error::Schema(format!("expected {} parameter tensors, got {}", layout.len(), tensors.len())));
        }
        for ((name, r, c), t) in layout.iter().zip(&tensors) {
            if t.rows() != *r || t.cols() != *c {
                return Err(Error::Schema(format!("parameter {name}: expected [{r}, {c}], got {}", t.shape())));
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            names: layout.into_iter().map(|(n, ..)| n).collect(),
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the tape, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundParams {
            layers: self.config.gru_layers,
            vars,
        }
    }
}

/// Tape handles for one [`ModelParams`], in layout order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    layers: usize,
    pub vars: Vec<Var>,
}

/// Tape handles for one GRU layer.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub wz: Var,
    pub wr: Var,
    pub wh: Var,
    pub bz: Var,
    pub br: Var,
    pub bh: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub prelu: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl BoundParams {
    /// Handles already on a tape, in [`parameter_layout`] order.
    pub fn from_vars(layers: usize, vars: Vec<Var>) -> Self {
        BoundParams { layers, vars }
    }

    pub fn gru(&self, layer: usize) -> GruVars {
        let v = &self.vars[6 * layer..6 * layer + 6];
        GruVars {
            wz: v[0],
            wr: v[1],
            wh: v[2],
            bz: v[3],
            br: v[4],
            bh: v[5],
        }
    }

    fn head(&self, index: usize) -> HeadVars {
        let base = 6 * self.layers + 5 * index;
        let v = &self.vars[base..base + 5];
        HeadVars {
            fc1_w: v[0],
            fc1_b: v[1],
            prelu: v[2],
            fc2_w: v[3],
            fc2_b: v[4],
        }
    }

    pub fn head_rt(&self) -> HeadVars {
        self.head(0)
    }

    pub fn head_d(&self) -> HeadVars {
        self.head(1)
    }
}

/// One GRU step on a batch: `x` is `B × in`, `h` is `B × H`.
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let xh = tape.concat(&[x, h], Axis::Cols)?;
    let z = tape.matmul(xh, p.wz)?;
    let z = tape.add(z, p.bz)?;
    let z = tape.sigmoid(z);
    let r = tape.matmul(xh, p.wr)?;
    let r = tape.add(r, p.br)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat(&[x, rh], Axis::Cols)?;
    let c = tape.matmul(xrh, p.wh)?;
    let c = tape.add(c, p.bh)?;
    let c = tape.tanh(c);
    // h' = h + z ⊙ (h̃ − h)
    let diff = tape.sub(c, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

/// Runs the stacked GRU over `frames` (each `B × in`) and returns the top
/// layer's hidden state per frame.
pub fn encode_sequence(tape: &mut Tape, frames: &[Var], params: &BoundParams, init: &[Var]) -> Result<Vec<Var>> {
    if frames.is_empty() {
        return Err(Error::invalid("encode_sequence: empty sequence"));
    }
    if init.len() != params.layers {
        return Err(Error::invalid(format!("encode_sequence: {} initial states for {} layers", init.len(), params.layers)));
    }
    let mut h = init.to_vec();
    let mut out = Vec::with_capacity(frames.len());
    for &x in frames {
        let mut input = x;
        for (layer, state) in h.iter_mut().enumerate() {
            *state = gru_cell(tape, input, *state, &params.gru(layer))?;
            input = *state;
        }
        out.push(input);
    }
    Ok(out)
}

/// FC → PReLU → FC.
pub fn mlp_head(tape: &mut Tape, feature: Var, p: &HeadVars) -> Result<Var> {
    let a = tape.matmul(feature, p.fc1_w)?;
    let a = tape.add(a, p.fc1_b)?;
    let a = tape.prelu(a, p.prelu)?;
    let o = tape.matmul(a, p.fc2_w)?;
    tape.add(o, p.fc2_b)
}

/// Head outputs for `R` feature rows.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `R·N × 3` Euler angles, row `r·N + n`.
    pub euler: Var,
    /// `R·N × 3` translations.
    pub translation: Var,
    /// `R·M × 3` canonical displacements.
    pub displacement: Var,
}

pub fn heads(tape: &mut Tape, feature: Var, params: &BoundParams, cfg: &ModelConfig) -> Result<HeadOutputs> {
    let rows = tape.shape(feature).rows;
    let rt = mlp_head(tape, feature, &params.head_rt())?;
    let rt = tape.reshape(rt, rows * cfg.n_anchors, 6)?;
    let euler = tape.slice(rt, 0, rows * cfg.n_anchors, 0, 3)?;
    let translation = tape.slice(rt, 0, rows * cfg.n_anchors, 3, 3)?;
    let d = mlp_head(tape, feature, &params.head_d())?;
    let displacement = tape.reshape(d, rows * cfg.n_vertices, 3)?;
    Ok(HeadOutputs {
        euler,
        translation,
        displacement,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenMode {
    Train,
    Infer,
}

/// Per-layer `batch × H` initial states: `N(0, std²)` when training, zero
/// at inference.
pub fn init_hidden(cfg: &ModelConfig, mode: HiddenMode, batch: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    (0..cfg.gru_layers)
        .map(|_| match mode {
            HiddenMode::Infer => Tensor::zeros(batch, cfg.hidden_size),
            HiddenMode::Train => {
                let normal = Normal::new(0.0, cfg.init_state_std).expect("validated std");
                Tensor::from_vec(batch, cfg.hidden_size, (0..batch * cfg.hidden_size).map(|_| normal.sample(rng)).collect())
            }
        })
        .collect()
}

/// Plain per-frame outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct FramePrediction {
    pub euler: Vec<[f64; 3]>,
    pub translation: Vec<[f64; 3]>,
    pub displacement: Vec<[f64; 3]>,
}

/// Inference over one sequence of raw `[θ, t]` vectors from a zero state.
pub fn predict_sequence(params: &ModelParams, inputs: &[Vec<f64>]) -> Result<Vec<FramePrediction>> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let frames = inputs
        .iter()
        .map(|x| {
            if x.len() != cfg.input_dim() {
                return Err(Error::Shape {
                    op: "predict_sequence",
                    detail: format!("input of length {}, expected {}", x.len(), cfg.input_dim()),
                });
            }
            Ok(tape.constant(Tensor::from_vec(1, x.len(), cfg.normalize_input(x))))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let init: Vec<Var> = init_hidden(cfg, HiddenMode::Infer, 1, &mut rng)
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    let feats = encode_sequence(&mut tape, &frames, &bound, &init)?;
    let feat = tape.concat(&feats, Axis::Rows)?;
    let out = heads(&mut tape, feat, &bound, cfg)?;
    let (e, t, d) = (
        tape.value(out.euler).to_points(),
        tape.value(out.translation).to_points(),
        tape.value(out.displacement).to_points(),
    );
    let (n, m) = (cfg.n_anchors, cfg.n_vertices);
    Ok((0..inputs.len())
        .map(|f| FramePrediction {
            euler: e[f * n..(f + 1) * n].to_vec(),
            translation: t[f * n..(f + 1) * n].to_vec(),
            displacement: d[f * m..(f + 1) * m].to_vec(),
        })
        .collect())
}

/// Entry of the binary tensor table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in f64 elements into the sidecar file.
    pub offset: usize,
}

/// Concatenates tensors as little-endian f64 and returns the table.
pub fn pack_tensors<'a>(named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut table = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (name, t) in named {
        table.push(TensorEntry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (table, bytes)
}

/// Reads the tensors listed in `table` back from `bytes`.
pub fn unpack_tensors(table: &[TensorEntry], bytes: &[u8]) -> Result<Vec<Tensor>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Schema(format!("tensor file length {} is not a multiple of 8", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    table
        .iter()
        .map(|e| {
            let len = e.shape[0] * e.shape[1];
            let data = values
                .get(e.offset..e.offset + len)
                .ok_or_else(|| Error::Schema(format!("tensor {} extends past the end of the data", e.name)))?;
            Tensor::new(crate::autodiff::Shape::new(e.shape[0], e.shape[1]), data.to_vec())
        })
        .collect()
}

impl ModelParams {
    pub fn pack(&self) -> (Vec<TensorEntry>, Vec<u8>) {
        pack_tensors(self.names.iter().map(String::as_str).zip(&self.tensors))
    }

    pub fn unpack(config: &ModelConfig, table: &[TensorEntry], bytes: &[u8]) -> Result<Self> {
        let layout = parameter_layout(config);
        for ((name, ..), e) in layout.iter().zip(table) {
            if *name != e.name {
                return Err(Error::Schema(format!("tensor table has {} where {name} was expected", e.name)));
            }
        }
        Self::from_tensors(config, unpack_tensors(table, bytes)?)
    }
}
