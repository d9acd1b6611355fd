//! Motion/garment dataset schema, on-disk format and a synthetic
//! mass-spring cloth generator.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{load_obj, save_obj, Mesh, Vec3};
use crate::skinning::{axis_angle_to_rotation, Mat3, RigidTransform};

pub const DATASET_VERSION: &str = "anchordef-dataset/1";

/// One frame of body motion with optional ground-truth garment.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFrame {
    /// Pose vector; treated opaquely by the model.
    pub theta: Vec<f64>,
    /// Root translation (m).
    pub translation: Vec3,
    pub r_global: Mat3,
    /// Root joint in rest space (m).
    pub j_root: Vec3,
    pub body_vertices: Vec<Vec3>,
    pub body_normals: Vec<Vec3>,
    pub body_vertex_transforms: Option<Vec<RigidTransform>>,
    pub gt_garment_vertices: Option<Vec<Vec3>>,
}

impl MotionFrame {
    /// `[θ, t]`.
    pub fn input_vector(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.extend_from_slice(self.translation.as_slice());
        v
    }

    pub fn validate(&self, template_vertices: usize) -> Result<()> {
        if self.body_normals.len() != self.body_vertices.len() {
            return Err(Error::Schema(format!(
                "{} body vertices but {} normals",
                self.body_vertices.len(),
                self.body_normals.len()
            )));
        }
        if let Some(t) = &self.body_vertex_transforms {
            if t.len() != self.body_vertices.len() {
                return Err(Error::Schema(format!("{} body vertices but {} transforms", self.body_vertices.len(), t.len())));
            }
        }
        if let Some(n) = self.body_normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-4) {
            return Err(Error::Schema(format!("body normal {n} is not unit length")));
        }
        if let Some(gt) = &self.gt_garment_vertices {
            if gt.len() != template_vertices {
                return Err(Error::Schema(format!(
                    "ground truth has {} vertices, template has {template_vertices}",
                    gt.len()
                )));
            }
        }
        let finite = self.theta.iter().chain(self.translation.iter()).all(|v| v.is_finite())
            && self.body_vertices.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.gt_garment_vertices.iter().flatten().all(|v| v.iter().all(|c| c.is_finite()));
        if !finite {
            return Err(Error::Schema("non-finite value".into()));
        }
        Ok(())
    }

    pub fn body_transform(&self) -> RigidTransform {
        RigidTransform::new(self.r_global, self.j_root + self.translation - self.r_global * self.j_root)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub name: String,
    pub frames: Vec<MotionFrame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub template: Mesh,
    /// Body in rest pose; falls back to the first frame's body when absent.
    pub body_template: Option<Mesh>,
    pub fps: f64,
    pub clips: Vec<Clip>,
}

impl SequenceDataset {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) {
            return Err(Error::Schema("fps must be positive".into()));
        }
        let pose_dim = self.clips.iter().flat_map(|c| c.frames.first()).map(|f| f.theta.len()).next();
        for (ci, clip) in self.clips.iter().enumerate() {
            for (fi, frame) in clip.frames.iter().enumerate() {
                frame
                    .validate(self.template.vertex_count())
                    .map_err(|e| Error::Schema(format!("clip {ci} ({}), frame {fi}: {e}", clip.name)))?;
                if Some(frame.theta.len()) != pose_dim {
                    return Err(Error::Schema(format!("clip {ci}, frame {fi}: pose length differs from the dataset")));
                }
            }
        }
        Ok(())
    }

    pub fn pose_dim(&self) -> usize {
        self.clips.iter().flat_map(|c| c.frames.first()).map(|f| f.theta.len()).next().unwrap_or(0)
    }

    pub fn frame_count(&self) -> usize {
        self.clips.iter().map(|c| c.frames.len()).sum()
    }

    pub fn body_rest(&self) -> Vec<Vec3> {
        match &self.body_template {
            Some(m) => m.vertices().to_vec(),
            None => self
                .clips
                .iter()
                .flat_map(|c| c.frames.first())
                .map(|f| f.body_vertices.clone())
                .next()
                .unwrap_or_default(),
        }
    }

    pub fn with_clips(&self, clips: Vec<Clip>) -> Self {
        SequenceDataset {
            template: self.template.clone(),
            body_template: self.body_template.clone(),
            fps: self.fps,
            clips,
        }
    }
}

// ---------------------------------------------------------------------------
// On-disk format

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub template_obj: String,
    pub fps: f64,
    pub clips: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_template_obj: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    theta: Vec<f64>,
    t: [f64; 3],
    r_global: [f64; 9],
    j_root: [f64; 3],
    body_vertices: String,
    body_normals: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body_vertex_transforms: Option<String>,
    /// One transform shared by every body vertex (rigid bodies).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body_transform: Option<[f64; 12]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_garment_vertices: Option<String>,
}

pub fn encode_f64s(values: impl IntoIterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.into_iter().flat_map(f64::to_le_bytes).collect();
    B64.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(text).map_err(|e| Error::Schema(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Schema(format!("payload of {} bytes is not a float array", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn encode_points(p: &[Vec3]) -> String {
    encode_f64s(p.iter().flat_map(|v| [v.x, v.y, v.z]))
}

fn decode_points(text: &str) -> Result<Vec<Vec3>> {
    let v = decode_f64s(text)?;
    if v.len() % 3 != 0 {
        return Err(Error::Schema("point payload length is not a multiple of 3".into()));
    }
    Ok(v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

impl FrameRecord {
    fn from_frame(f: &MotionFrame) -> Self {
        let mut r = [0.0; 9];
        for i in 0..9 {
            r[i] = f.r_global[(i / 3, i % 3)];
        }
        // Store a single transform when every body vertex shares it.
        let (per_vertex, shared) = match &f.body_vertex_transforms {
            Some(t) if !t.is_empty() && t.iter().all(|x| *x == t[0]) => (None, Some(t[0].to_array())),
            Some(t) => (Some(encode_f64s(t.iter().flat_map(|x| x.to_array()))), None),
            None => (None, None),
        };
        FrameRecord {
            theta: f.theta.clone(),
            t: f.translation.into(),
            r_global: r,
            j_root: f.j_root.into(),
            body_vertices: encode_points(&f.body_vertices),
            body_normals: encode_points(&f.body_normals),
            body_vertex_transforms: per_vertex,
            body_transform: shared,
            gt_garment_vertices: f.gt_garment_vertices.as_deref().map(encode_points),
        }
    }

    fn into_frame(self) -> Result<MotionFrame> {
        let body_vertices = decode_points(&self.body_vertices)?;
        let transforms = match (self.body_vertex_transforms, self.body_transform) {
            (Some(_), Some(_)) => return Err(Error::Schema("both per-vertex and shared body transforms given".into())),
            (Some(t), None) => {
                let v = decode_f64s(&t)?;
                if v.len() % 12 != 0 {
                    return Err(Error::Schema("transform payload length is not a multiple of 12".into()));
                }
                Some(v.chunks_exact(12).map(RigidTransform::from_slice).collect())
            }
            (None, Some(t)) => Some(vec![RigidTransform::from_slice(&t); body_vertices.len()]),
            (None, None) => None,
        };
        Ok(MotionFrame {
            theta: self.theta,
            translation: Vec3::from(self.t),
            r_global: Mat3::from_row_slice(&self.r_global),
            j_root: Vec3::from(self.j_root),
            body_normals: decode_points(&self.body_normals)?,
            body_vertices,
            body_vertex_transforms: transforms,
            gt_garment_vertices: self.gt_garment_vertices.as_deref().map(decode_points).transpose()?,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json`, `template.obj`, optional `body.obj` and one
/// JSON-lines file per clip into `dir`; returns the manifest path.
pub fn save_dataset(ds: &SequenceDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_obj(&ds.template, &dir.join("template.obj"))?;
    let body_template_obj = match &ds.body_template {
        Some(b) => {
            save_obj(b, &dir.join("body.obj"))?;
            Some("body.obj".to_string())
        }
        None => None,
    };
    let mut clips = Vec::new();
    for (i, clip) in ds.clips.iter().enumerate() {
        let stem: String = clip
            .name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let name = if stem.is_empty() { format!("clip_{i:03}.jsonl") } else { format!("{i:03}_{stem}.jsonl") };
        let mut out = Vec::new();
        for f in &clip.frames {
            serde_json::to_writer(&mut out, &FrameRecord::from_frame(f)).map_err(|e| Error::Schema(e.to_string()))?;
            out.push(b'\n');
        }
        write_atomic(&dir.join(&name), &out)?;
        clips.push(name);
    }
    let manifest = Manifest {
        version: DATASET_VERSION.into(),
        template_obj: "template.obj".into(),
        fps: ds.fps,
        clips,
        body_template_obj,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Schema(e.to_string()))?;
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Clip name from its file name: the stem without the `NNN_` index prefix.
fn clip_name(file: &str) -> String {
    let stem = Path::new(file).file_stem().and_then(|s| s.to_str()).unwrap_or(file);
    match stem.split_once('_') {
        Some((idx, rest)) if idx.len() == 3 && idx.bytes().all(|b| b.is_ascii_digit()) && !rest.is_empty() => rest.to_string(),
        _ => stem.to_string(),
    }
}

fn read_clip(path: &Path, clip_index: usize) -> Result<Vec<MotionFrame>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("clip {clip_index}, frame {}: {e}", frames.len())))?;
        let frame = rec
            .into_frame()
            .map_err(|e| Error::Schema(format!("clip {clip_index}, frame {} (line {}): {e}", frames.len(), i + 1)))?;
        frames.push(frame);
    }
    Ok(frames)
}

/// A single JSON-lines clip file outside any manifest.
pub fn load_clip(path: &Path) -> Result<Clip> {
    let file = path.file_name().and_then(|s| s.to_str()).unwrap_or("clip");
    Ok(Clip {
        name: clip_name(file),
        frames: read_clip(path, 0)?,
    })
}

pub fn load_dataset(manifest_path: &Path) -> Result<SequenceDataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Schema(format!(
            "unsupported dataset version {:?} (expected {DATASET_VERSION:?})",
            manifest.version
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let template = load_obj(dir.join(&manifest.template_obj))?;
    let body_template = manifest
        .body_template_obj
        .as_ref()
        .map(|p| load_obj(dir.join(p)))
        .transpose()?;
    let clips = manifest
        .clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(Clip {
                name: clip_name(c),
                frames: read_clip(&dir.join(c), i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = SequenceDataset {
        template,
        body_template,
        fps: manifest.fps,
        clips,
    };
    ds.validate()?;
    Ok(ds)
}

/// Seeded clip-level split into `(train, test)`.
pub fn split(ds: &SequenceDataset, n_test_clips: usize, seed: u64) -> Result<(SequenceDataset, SequenceDataset)> {
    if n_test_clips > 0 && ds.clips.len() <= n_test_clips {
        return Err(Error::invalid(format!("cannot hold out {n_test_clips} of {} clips", ds.clips.len())));
    }
    let mut order: Vec<usize> = (0..ds.clips.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test_idx = order[..n_test_clips].to_vec();
    test_idx.sort_unstable();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, c) in ds.clips.iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(c.clone());
        } else {
            train.push(c.clone());
        }
    }
    Ok((ds.with_clips(train), ds.with_clips(test)))
}

// ---------------------------------------------------------------------------
// Mass-spring simulation

#[derive(Clone, Copy, Debug)]
pub struct Spring {
    pub a: usize,
    pub b: usize,
    pub rest: f64,
    pub stiffness: f64,
}

/// Particles joined by damped springs, advanced by semi-implicit Euler.
#[derive(Clone, Debug)]
pub struct MassSpring {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub masses: Vec<f64>,
    pub springs: Vec<Spring>,
    pub pinned: Vec<bool>,
    pub gravity: Vec3,
    /// Damping along each spring (N·s/m).
    pub spring_damping: f64,
    /// Linear drag on absolute velocity (N·s/m per particle).
    pub air_drag: f64,
}

impl MassSpring {
    pub fn momentum(&self) -> Vec3 {
        self.velocities.iter().zip(&self.masses).fold(Vec3::zeros(), |s, (v, m)| s + v * *m)
    }

    pub fn forces(&self) -> Vec<Vec3> {
        let mut f: Vec<Vec3> = self.masses.iter().map(|m| self.gravity * *m).collect();
        for (fi, v) in f.iter_mut().zip(&self.velocities) {
            *fi -= v * self.air_drag;
        }
        for s in &self.springs {
            let d = self.positions[s.b] - self.positions[s.a];
            let len = d.norm();
            if len < 1e-12 {
                continue;
            }
            let dir = d / len;
            let rel = (self.velocities[s.b] - self.velocities[s.a]).dot(&dir);
            let mag = s.stiffness * (len - s.rest) + self.spring_damping * rel;
            f[s.a] += dir * mag;
            f[s.b] -= dir * mag;
        }
        f
    }

    /// One step: `v += dt·F/m`, then `x += dt·v`, for free particles.
    pub fn step(&mut self, dt: f64) {
        let f = self.forces();
        for i in 0..self.positions.len() {
            if self.pinned[i] {
                continue;
            }
            self.velocities[i] += f[i] * (dt / self.masses[i]);
            self.positions[i] += self.velocities[i] * dt;
        }
    }

    pub fn max_speed(&self) -> f64 {
        self.velocities.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Capsule: segment `a`–`b` swept by radius `r`.
#[derive(Clone, Copy, Debug)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl Capsule {
    /// Signed distance and outward unit gradient at `p`.
    pub fn sdf(&self, p: &Vec3) -> (f64, Vec3) {
        let ab = self.b - self.a;
        let t = ((p - self.a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        let c = self.a + ab * t;
        let d = p - c;
        let n = d.norm();
        let dir = if n > 1e-12 {
            d / n
        } else {
            ab.cross(&Vec3::x()).try_normalize(1e-12).unwrap_or_else(Vec3::z)
        };
        (n - self.radius, dir)
    }

    /// Surface mesh with analytic normals: `segments` around the axis,
    /// `rings` along the cylinder and `cap_rings` per hemisphere.
    pub fn mesh(&self, segments: usize, rings: usize, cap_rings: usize) -> (Mesh, Vec<Vec3>) {
        let axis = (self.b - self.a).normalize();
        let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = axis.cross(&helper).normalize();
        let w = axis.cross(&u);
        let mut verts = Vec::new();
        let mut normals = Vec::new();
        // Latitude rows from the `a` pole to the `b` pole, pole vertices excluded.
        let mut rows: Vec<(Vec3, f64)> = Vec::new();
        for k in 1..=cap_rings {
            let phi = -PI / 2.0 + PI / 2.0 * k as f64 / cap_rings as f64;
            rows.push((self.a, phi));
        }
        for k in 1..rings {
            let t = k as f64 / rings as f64;
            rows.push((self.a + (self.b - self.a) * t, 0.0));
        }
        for k in 0..cap_rings {
            let phi = PI / 2.0 * k as f64 / cap_rings as f64;
            rows.push((self.b, phi));
        }
        verts.push(self.a - axis * self.radius);
        normals.push(-axis);
        for (centre, phi) in &rows {
            for s in 0..segments {
                let th = 2.0 * PI * s as f64 / segments as f64;
                let n = (u * th.cos() + w * th.sin()) * phi.cos() + axis * phi.sin();
                verts.push(centre + n * self.radius);
                normals.push(n);
            }
        }
        verts.push(self.b + axis * self.radius);
        normals.push(axis);
        let last = verts.len() - 1;
        let ring = |r: usize, s: usize| 1 + r * segments + s % segments;
        let mut faces = Vec::new();
        for s in 0..segments {
            faces.push([0, ring(0, s + 1), ring(0, s)]);
        }
        for r in 0..rows.len() - 1 {
            for s in 0..segments {
                faces.push([ring(r, s), ring(r, s + 1), ring(r + 1, s + 1)]);
                faces.push([ring(r, s), ring(r + 1, s + 1), ring(r + 1, s)]);
            }
        }
        let top = rows.len() - 1;
        for s in 0..segments {
            faces.push([last, ring(top, s), ring(top, s + 1)]);
        }
        (Mesh::new(verts, faces).expect("capsule mesh is valid"), normals)
    }
}

/// Random smooth rigid motion of the body: swing about x, yaw about y and
/// a translation, each a sum of sinusoids eased in from rest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionScript {
    pub swing: Vec<Wave>,
    pub yaw: Vec<Wave>,
    pub shift: [Vec<Wave>; 3],
    /// Ease-in duration (s).
    pub ramp: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Wave {
    fn eval(waves: &[Wave], t: f64) -> f64 {
        waves.iter().map(|w| w.amplitude * ((2.0 * PI * w.frequency * t + w.phase).sin() - w.phase.sin())).sum()
    }
}

/// Amplitude ranges for random scripts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionRanges {
    pub swing: f64,
    pub yaw: f64,
    pub shift: [f64; 3],
    pub min_frequency: f64,
    pub max_frequency: f64,
}

impl Default for MotionRanges {
    fn default() -> Self {
        MotionRanges {
            swing: 0.5,
            yaw: 0.4,
            shift: [0.08, 0.04, 0.1],
            min_frequency: 0.3,
            max_frequency: 1.2,
        }
    }
}

impl MotionScript {
    pub fn still() -> Self {
        MotionScript {
            swing: Vec::new(),
            yaw: Vec::new(),
            shift: [Vec::new(), Vec::new(), Vec::new()],
            ramp: 0.0,
        }
    }

    pub fn random(rng: &mut impl Rng, r: &MotionRanges) -> Self {
        let mut waves = |amp: f64| -> Vec<Wave> {
            (0..2)
                .map(|_| Wave {
                    amplitude: rng.gen_range(0.0..=amp) / 2.0,
                    frequency: rng.gen_range(r.min_frequency..=r.max_frequency),
                    phase: rng.gen_range(0.0..2.0 * PI),
                })
                .collect()
        };
        MotionScript {
            swing: waves(r.swing),
            yaw: waves(r.yaw),
            shift: [waves(r.shift[0]), waves(r.shift[1]), waves(r.shift[2])],
            ramp: 1.0,
        }
    }

    fn ease(&self, t: f64) -> f64 {
        if self.ramp <= 0.0 {
            return 1.0;
        }
        let s = (t / self.ramp).clamp(0.0, 1.0);
        s * s * (3.0 - 2.0 * s)
    }

    /// Rotation and translation at time `t`; the rotation pivots on the origin.
    pub fn pose(&self, t: f64) -> (Mat3, Vec3) {
        let e = self.ease(t);
        let swing = e * Wave::eval(&self.swing, t);
        let yaw = e * Wave::eval(&self.yaw, t);
        let r = axis_angle_to_rotation(&(Vec3::y() * yaw)) * axis_angle_to_rotation(&(Vec3::x() * swing));
        let shift = Vec3::new(
            Wave::eval(&self.shift[0], t),
            Wave::eval(&self.shift[1], t),
            Wave::eval(&self.shift[2], t),
        ) * e;
        (r, shift)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Particles per side (≥ 8).
    pub grid: usize,
    /// Cloth side length (m).
    pub size: f64,
    /// Total cloth mass (kg).
    pub mass: f64,
    pub k_struct: f64,
    pub k_shear: f64,
    pub k_bend: f64,
    pub spring_damping: f64,
    pub air_drag: f64,
    pub gravity: f64,
    pub dt: f64,
    pub fps: f64,
    pub clips: usize,
    pub frames: usize,
    /// Simulated seconds at rest before recording starts.
    pub settle: f64,
    pub body_radius: f64,
    pub torso_length: f64,
    pub gap: f64,
    pub collision_margin: f64,
    pub motion: MotionRanges,
    /// Every clip holds the body still when set.
    pub still: bool,
    pub seed: u64,
    /// Speed above which the run is declared unstable (m/s).
    pub max_speed: f64,
}

impl SynthConfig {
    /// Reads a TOML or JSON config (by extension; TOML otherwise).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: 16,
            size: 0.6,
            mass: 0.3,
            k_struct: 40.0,
            k_shear: 8.0,
            k_bend: 2.0,
            spring_damping: 0.02,
            air_drag: 0.01,
            gravity: 9.81,
            dt: 1.0 / 480.0,
            fps: 30.0,
            clips: 10,
            frames: 300,
            settle: 2.0,
            body_radius: 0.08,
            torso_length: 0.45,
            gap: 0.01,
            collision_margin: 0.004,
            motion: MotionRanges::default(),
            still: false,
            seed: 0,
            max_speed: 30.0,
        }
    }
}

/// Body of the synthetic scenes: a horizontal shoulder bar with a vertical
/// torso hanging from its centre. Both are capsules in rest space.
pub struct SynthBody {
    pub capsules: Vec<Capsule>,
    pub mesh: Mesh,
    pub normals: Vec<Vec3>,
}

impl SynthBody {
    pub fn new(cfg: &SynthConfig) -> Self {
        let r = cfg.body_radius;
        let half = cfg.size / 2.0 + r;
        let capsules = vec![
            Capsule {
                a: Vec3::new(-half, 0.0, 0.0),
                b: Vec3::new(half, 0.0, 0.0),
                radius: r,
            },
            Capsule {
                a: Vec3::new(0.0, 0.0, 0.0),
                b: Vec3::new(0.0, -cfg.torso_length, 0.0),
                radius: r,
            },
        ];
        let mut verts = Vec::new();
        let mut normals = Vec::new();
        let mut faces = Vec::new();
        let segments = 12;
        let spacing = 2.0 * PI * r / segments as f64;
        for c in &capsules {
            let rings = (((c.b - c.a).norm() / spacing).ceil() as usize).max(1);
            let (m, n) = c.mesh(segments, rings, 3);
            let off = verts.len();
            verts.extend_from_slice(m.vertices());
            normals.extend(n);
            faces.extend(m.faces().iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
        }
        SynthBody {
            capsules,
            mesh: Mesh::new(verts, faces).expect("body mesh is valid"),
            normals,
        }
    }

    fn sdf(&self, p: &Vec3) -> (f64, Vec3) {
        self.capsules
            .iter()
            .map(|c| c.sdf(p))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("body has capsules")
    }
}

fn cloth_rest(cfg: &SynthConfig) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let n = cfg.grid;
    let h = cfg.size / (n - 1) as f64;
    let z = cfg.body_radius + cfg.gap;
    let mut verts = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            verts.push(Vec3::new(-cfg.size / 2.0 + c as f64 * h, -(r as f64) * h, z));
        }
    }
    let mut faces = Vec::new();
    for r in 0..n - 1 {
        for c in 0..n - 1 {
            let i = r * n + c;
            // Counter-clockwise seen from +z, so normals face away from the body.
            faces.push([i, i + n + 1, i + 1]);
            faces.push([i, i + n, i + n + 1]);
        }
    }
    (verts, faces)
}

fn cloth_system(cfg: &SynthConfig, rest: &[Vec3]) -> MassSpring {
    let n = cfg.grid;
    let h = cfg.size / (n - 1) as f64;
    let mut springs = Vec::new();
    let mut add = |a: usize, b: usize, rest: f64, k: f64| springs.push(Spring { a, b, rest, stiffness: k });
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            if c + 1 < n {
                add(i, i + 1, h, cfg.k_struct);
            }
            if r + 1 < n {
                add(i, i + n, h, cfg.k_struct);
            }
            if r + 1 < n && c + 1 < n {
                add(i, i + n + 1, h * 2f64.sqrt(), cfg.k_shear);
                add(i + 1, i + n, h * 2f64.sqrt(), cfg.k_shear);
            }
            if c + 2 < n {
                add(i, i + 2, 2.0 * h, cfg.k_bend);
            }
            if r + 2 < n {
                add(i, i + 2 * n, 2.0 * h, cfg.k_bend);
            }
        }
    }
    MassSpring {
        positions: rest.to_vec(),
        velocities: vec![Vec3::zeros(); rest.len()],
        masses: vec![cfg.mass / rest.len() as f64; rest.len()],
        springs,
        pinned: (0..rest.len()).map(|i| i < n).collect(),
        gravity: Vec3::new(0.0, -cfg.gravity, 0.0),
        spring_damping: cfg.spring_damping,
        air_drag: cfg.air_drag,
    }
}

fn validate_synth(cfg: &SynthConfig) -> Result<()> {
    if cfg.grid < 8 {
        return Err(Error::invalid(format!("synthetic cloth needs a grid of at least 8, got {}", cfg.grid)));
    }
    let positive = [cfg.size, cfg.mass, cfg.dt, cfg.fps, cfg.body_radius, cfg.torso_length, cfg.max_speed];
    if positive.iter().any(|v| !(*v > 0.0)) || cfg.frames == 0 {
        return Err(Error::invalid("synthetic config: sizes, rates and counts must be positive"));
    }
    let sub = 1.0 / (cfg.fps * cfg.dt);
    if (sub - sub.round()).abs() > 1e-9 {
        return Err(Error::invalid("synthetic config: 1/fps must be a whole number of time steps"));
    }
    Ok(())
}

struct Scene<'a> {
    cfg: &'a SynthConfig,
    body: &'a SynthBody,
    sys: MassSpring,
    pins_rest: Vec<(usize, Vec3)>,
}

impl Scene<'_> {
    /// Advances one step from body pose `g0` to `g1`.
    fn step(&mut self, g0: &RigidTransform, g1: &RigidTransform) -> Result<()> {
        let dt = self.cfg.dt;
        for &(i, p) in &self.pins_rest {
            let next = g1.apply(&p);
            self.sys.velocities[i] = (next - self.sys.positions[i]) / dt;
            self.sys.positions[i] = next;
        }
        self.sys.step(dt);
        let inv1 = g1.inverse();
        for i in 0..self.sys.positions.len() {
            if self.sys.pinned[i] {
                continue;
            }
            let local = inv1.apply(&self.sys.positions[i]);
            let (d, n_local) = self.body.sdf(&local);
            if d < self.cfg.collision_margin {
                let pushed = local + n_local * (self.cfg.collision_margin - d);
                let n = g1.rotation * n_local;
                let p = g1.apply(&pushed);
                // Body surface velocity at the contact point.
                let vb = (p - g0.apply(&inv1.apply(&p))) / dt;
                let v = self.sys.velocities[i];
                let rel = (v - vb).dot(&n);
                if rel < 0.0 {
                    self.sys.velocities[i] = v - n * rel;
                }
                self.sys.positions[i] = p;
            }
        }
        let speed = self.sys.max_speed();
        if !speed.is_finite() || speed > self.cfg.max_speed {
            return Err(Error::Unstable(format!(
                "cloth speed reached {speed:.3e} m/s; try a smaller dt or softer springs"
            )));
        }
        Ok(())
    }
}

/// Simulates `clips` clips of cloth pinned along its top edge to a moving
/// rigid body and records body and cloth at `fps`.
pub fn synth_cloth(cfg: &SynthConfig) -> Result<SequenceDataset> {
    synth_cloth_threaded(cfg, 1)
}

/// [`synth_cloth`] with clips simulated on up to `threads` workers. Each
/// clip draws its motion from its own random stream, so the result does not
/// depend on the thread count.
pub fn synth_cloth_threaded(cfg: &SynthConfig, threads: usize) -> Result<SequenceDataset> {
    validate_synth(cfg)?;
    let body = SynthBody::new(cfg);
    let (rest, faces) = cloth_rest(cfg);

    // Settle once at rest; the draped rest state is the template and the
    // starting state of every clip.
    let identity = RigidTransform::identity();
    let mut scene = Scene {
        cfg,
        body: &body,
        sys: cloth_system(cfg, &rest),
        pins_rest: (0..cfg.grid).map(|i| (i, rest[i])).collect(),
    };
    for _ in 0..(cfg.settle / cfg.dt).round() as usize {
        scene.step(&identity, &identity)?;
    }
    let template = Mesh::new(scene.sys.positions.clone(), faces)?;

    let ids: Vec<usize> = (0..cfg.clips).collect();
    let clips = crate::parallel::par_map(threads, &ids, |_, &c| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64 + 1);
        let script = if cfg.still { MotionScript::still() } else { MotionScript::random(&mut rng, &cfg.motion) };
        simulate_clip(cfg, &body, scene.sys.clone(), &script).map(|frames| Clip {
            name: format!("synth_{c:03}"),
            frames,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SequenceDataset {
        template,
        body_template: Some(body.mesh.clone()),
        fps: cfg.fps,
        clips,
    })
}

fn simulate_clip(cfg: &SynthConfig, body: &SynthBody, settled: MassSpring, script: &MotionScript) -> Result<Vec<MotionFrame>> {
    let substeps = (1.0 / (cfg.fps * cfg.dt)).round() as usize;
    let mut scene = Scene {
        cfg,
        body,
        pins_rest: (0..cfg.grid).map(|i| (i, settled.positions[i])).collect(),
        sys: settled,
    };
    let pose_at = |t: f64| {
        let (r, s) = script.pose(t);
        RigidTransform::new(r, s)
    };
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut time = 0.0;
    for f in 0..cfg.frames {
        if f > 0 {
            for _ in 0..substeps {
                let g0 = pose_at(time);
                time += cfg.dt;
                let g1 = pose_at(time);
                scene.step(&g0, &g1)?;
            }
        }
        frames.push(record_frame(body, &pose_at, time, cfg.dt, &scene.sys.positions));
    }
    Ok(frames)
}

fn rotation_log(r: &Mat3) -> Vec3 {
    nalgebra::Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

fn record_frame(body: &SynthBody, pose_at: &dyn Fn(f64) -> RigidTransform, t: f64, dt: f64, cloth: &[Vec3]) -> MotionFrame {
    let g = pose_at(t);
    let prev = pose_at(t - dt);
    let omega = rotation_log(&(g.rotation * prev.rotation.transpose())) / dt;
    let w = rotation_log(&g.rotation);
    MotionFrame {
        theta: vec![w.x, w.y, w.z, omega.x, omega.y, omega.z],
        translation: g.translation,
        r_global: g.rotation,
        j_root: Vec3::zeros(),
        body_vertices: body.mesh.vertices().iter().map(|v| g.apply(v)).collect(),
        body_normals: body.normals.iter().map(|n| g.rotation * n).collect(),
        body_vertex_transforms: Some(vec![g; body.normals.len()]),
        gt_garment_vertices: Some(cloth.to_vec()),
    }
}

/// Writes a text file atomically.
pub fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Appends a line to a file, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(clips: usize, frames: usize) -> SynthConfig {
        SynthConfig {
            grid: 8,
            clips,
            frames,
            settle: 0.5,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn two_particle_spring_matches_analytic_equilibrium() {
        let (k, m, l, g) = (20.0, 0.05, 0.1, 9.81);
        let mut sys = MassSpring {
            positions: vec![Vec3::zeros(), Vec3::new(0.0, -l, 0.0)],
            velocities: vec![Vec3::zeros(); 2],
            masses: vec![m, m],
            springs: vec![Spring { a: 0, b: 1, rest: l, stiffness: k }],
            pinned: vec![true, false],
            gravity: Vec3::new(0.0, -g, 0.0),
            spring_damping: 0.05,
            air_drag: 0.01,
        };
        for _ in 0..20_000 {
            sys.step(1.0 / 240.0);
        }
        let want = -(l + m * g / k);
        assert!((sys.positions[1].y - want).abs() < 1e-6, "{} vs {want}", sys.positions[1].y);
    }

    #[test]
    fn momentum_is_conserved_without_external_forces() {
        let cfg = tiny(1, 1);
        let (rest, _) = cloth_rest(&cfg);
        let mut sys = cloth_system(&cfg, &rest);
        sys.pinned = vec![false; rest.len()];
        sys.gravity = Vec3::zeros();
        sys.air_drag = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in sys.velocities.iter_mut() {
            *v = Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
        }
        let p0 = sys.momentum();
        let scale: f64 = sys.velocities.iter().zip(&sys.masses).map(|(v, m)| v.norm() * m).sum();
        for _ in 0..500 {
            let before = sys.momentum();
            sys.step(cfg.dt);
            assert!((sys.momentum() - before).norm() <= 1e-6 * scale);
        }
        assert!((sys.momentum() - p0).norm() <= 1e-6 * scale);
    }

    #[test]
    fn hanging_cloth_reaches_rest() {
        let cfg = SynthConfig {
            still: true,
            settle: 3.0,
            spring_damping: 0.2,
            air_drag: 0.02,
            ..tiny(1, 3)
        };
        let ds = synth_cloth(&cfg).unwrap();
        let frames = &ds.clips[0].frames;
        let a = frames[1].gt_garment_vertices.as_ref().unwrap();
        let b = frames[2].gt_garment_vertices.as_ref().unwrap();
        let shift = a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        assert!(shift < 1e-3, "{shift}");
        let n = cfg.grid;
        let rest_len = cfg.size;
        let top = a[..n].iter().map(|v| v.y).sum::<f64>() / n as f64;
        let bottom = a[n * (n - 1)..].iter().map(|v| v.y).sum::<f64>() / n as f64;
        assert!(top - bottom >= 0.8 * rest_len, "{}", top - bottom);
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let cfg = tiny(2, 6);
        let a = synth_cloth(&cfg).unwrap();
        let b = synth_cloth(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(synth_cloth_threaded(&cfg, 2).unwrap(), a);
        a.validate().unwrap();
        assert_eq!(a.clips.len(), 2);
        assert_eq!(a.clips[0].frames.len(), 6);
        assert_eq!(a.pose_dim(), 6);
        // Pinned row follows the body transform exactly.
        let f = &a.clips[1].frames[5];
        let g = f.body_transform();
        let gt = f.gt_garment_vertices.as_ref().unwrap();
        for i in 0..cfg.grid {
            assert!((gt[i] - g.apply(&a.template.vertices()[i])).norm() < 1e-12);
        }
        // Cloth stays outside the body.
        let body = SynthBody::new(&cfg);
        for frame in &a.clips[1].frames {
            let inv = frame.body_transform().inverse();
            for v in frame.gt_garment_vertices.as_ref().unwrap() {
                assert!(body.sdf(&inv.apply(v)).0 > 0.0);
            }
        }
        assert!(synth_cloth(&SynthConfig { grid: 7, ..cfg.clone() }).is_err());
    }

    #[test]
    fn explosion_is_reported() {
        let cfg = SynthConfig {
            k_struct: 5000.0,
            dt: 1.0 / 30.0,
            ..tiny(1, 2)
        };
        match synth_cloth(&cfg) {
            Err(Error::Unstable(msg)) => assert!(msg.contains("smaller dt")),
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn capsule_sdf_and_mesh() {
        let c = Capsule {
            a: Vec3::zeros(),
            b: Vec3::new(1.0, 0.0, 0.0),
            radius: 0.1,
        };
        let (d, n) = c.sdf(&Vec3::new(0.5, 0.3, 0.0));
        assert!((d - 0.2).abs() < 1e-15 && (n - Vec3::y()).norm() < 1e-15);
        let (d, _) = c.sdf(&Vec3::new(-0.2, 0.0, 0.0));
        assert!((d - 0.1).abs() < 1e-15);
        let (m, normals) = c.mesh(8, 4, 2);
        for (v, n) in m.vertices().iter().zip(&normals) {
            assert!(c.sdf(v).0.abs() < 1e-12);
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
        // Mesh winding agrees with the analytic normals.
        let computed = crate::geometry::vertex_normals(&m);
        for (a, b) in computed.normals.iter().zip(&normals) {
            assert!(a.dot(b) > 0.5);
        }
    }

    #[test]
    fn round_trip_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_cloth(&tiny(2, 3)).unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);

        // Minimal hand-written dataset: 1 clip of 2 frames, no ground truth.
        let d2 = tempfile::tempdir().unwrap();
        fs::write(d2.path().join("t.obj"), "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let frame = MotionFrame {
            theta: vec![0.0; 3],
            translation: Vec3::zeros(),
            r_global: Mat3::identity(),
            j_root: Vec3::zeros(),
            body_vertices: vec![Vec3::zeros()],
            body_normals: vec![Vec3::z()],
            body_vertex_transforms: None,
            gt_garment_vertices: None,
        };
        let line = serde_json::to_string(&FrameRecord::from_frame(&frame)).unwrap();
        fs::write(d2.path().join("c.jsonl"), format!("{line}\n{line}\n")).unwrap();
        let manifest = serde_json::json!({"version": DATASET_VERSION, "template_obj": "t.obj", "fps": 30.0, "clips": ["c.jsonl"]});
        fs::write(d2.path().join("m.json"), manifest.to_string()).unwrap();
        let small = load_dataset(&d2.path().join("m.json")).unwrap();
        assert_eq!(small.clips[0].frames.len(), 2);
        assert_eq!(small.body_rest(), vec![Vec3::zeros()]);

        // Ground truth with the wrong vertex count.
        let bad = MotionFrame {
            gt_garment_vertices: Some(vec![Vec3::zeros(); 4]),
            ..frame.clone()
        };
        let line = serde_json::to_string(&FrameRecord::from_frame(&bad)).unwrap();
        fs::write(d2.path().join("c.jsonl"), format!("{line}\n")).unwrap();
        let err = load_dataset(&d2.path().join("m.json")).unwrap_err().to_string();
        assert!(err.contains("4 vertices") && err.contains("template has 3") && err.contains("clip 0"), "{err}");

        let manifest = serde_json::json!({"version": "other/9", "template_obj": "t.obj", "fps": 30.0, "clips": []});
        fs::write(d2.path().join("m.json"), manifest.to_string()).unwrap();
        assert!(load_dataset(&d2.path().join("m.json")).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn split_contract() {
        let ds = synth_cloth(&tiny(4, 1)).unwrap();
        let (tr, te) = split(&ds, 0, 1).unwrap();
        assert_eq!(tr.clips.len(), 4);
        assert!(te.clips.is_empty());
        let (tr, te) = split(&ds, 2, 5).unwrap();
        let mut names: Vec<&String> = tr.clips.iter().chain(&te.clips).map(|c| &c.name).collect();
        names.sort();
        assert_eq!(names, ds.clips.iter().map(|c| &c.name).collect::<Vec<_>>());
        let (tr2, te2) = split(&ds, 2, 5).unwrap();
        assert_eq!((tr2.clips, te2.clips), (tr.clips, te.clips));
        assert!(split(&ds, 4, 0).is_err());
    }

    #[test]
    fn base64_round_trip() {
        let v = vec![1.5, -0.0, f64::MAX, 1e-300];
        assert_eq!(decode_f64s(&encode_f64s(v.clone())).unwrap(), v);
        assert!(decode_f64s("AAA=").is_err());
    }
}
