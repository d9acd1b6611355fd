//! `anchor-deform`: prepare anchors, synthesise data, train, infer, evaluate
//! and check gradients.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anchor_deform::anchors::{AnchorSet, DEFAULT_NEIGHBORS, DEFAULT_VERTEX_ANCHORS};
use anchor_deform::data::{load_clip, load_dataset, save_dataset, synth_cloth_threaded, MotionFrame, SynthConfig};
use anchor_deform::geometry::{load_obj, save_obj, Mesh, Vec3};
use anchor_deform::simplify::qem_simplify;
use anchor_deform::training::{evaluate, infer, train, Checkpoint, StrategyMode, TrainConfig};
use anchor_deform::{gradcheck, Error};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "anchor-deform", version, about = "Anchor-based garment deformation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialise anchors on a template and write its simplified mesh.
    Prepare(PrepareArgs),
    /// Simulate a synthetic cloth dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Predict garment meshes for a motion sequence.
    Infer(InferArgs),
    /// Compare predicted meshes against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Parser)]
struct PrepareArgs {
    /// Garment template (OBJ).
    #[arg(long)]
    template: PathBuf,
    /// Number of anchors.
    #[arg(long, default_value_t = 160)]
    anchors: usize,
    /// Template vertices each anchor position is blended from.
    #[arg(long, default_value_t = DEFAULT_NEIGHBORS)]
    neighbors: usize,
    /// Anchors influencing each vertex.
    #[arg(long, default_value_t = DEFAULT_VERTEX_ANCHORS)]
    vertex_anchors: usize,
    /// Fraction of vertices kept in simplified.obj [default: twice the anchor count].
    #[arg(long)]
    simplify_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Parser)]
struct SynthArgs {
    /// TOML or JSON synthesis config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the manifest and clip files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Loose,
    Tight,
    Mixed,
}

#[derive(Parser)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Template OBJ replacing the dataset's own.
    #[arg(long)]
    template: Option<PathBuf>,
    /// anchors.json from `prepare`.
    #[arg(long)]
    anchors: Option<PathBuf>,
    /// TOML or JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_late: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    sequence_length: Option<usize>,
    #[arg(long)]
    late_stage_start: Option<usize>,
    /// Seed for initialisation and batching [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_anchors: Option<usize>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    vertex_anchors: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long)]
    threads: Option<usize>,
    /// Any other config field, e.g. `weights.lambda2=0` or `reassociate=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Parser)]
struct InferArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip file (JSON lines) or dataset manifest.
    #[arg(long)]
    motion: PathBuf,
    /// Clip name or index when `--motion` is a manifest with several clips.
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Parser)]
struct EvalArgs {
    /// Directory of predicted `frame_*.obj` files.
    #[arg(long)]
    pred_dir: PathBuf,
    /// Directory of ground-truth OBJs, a clip file or a manifest.
    #[arg(long)]
    gt: PathBuf,
    /// Clip name or index when `--gt` is a manifest with several clips.
    #[arg(long)]
    clip: Option<String>,
    /// Per-frame metrics CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Parser)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the backward pass of this op (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

/// Failure carrying its exit code: 2 for bad input, 1 otherwise.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Parse { .. } | Error::Schema(_) | Error::Invalid(_) | Error::NonManifold(_) => 2,
            Error::Shape { .. } | Error::Training(_) | Error::Unstable(_) => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::from(Error::Io { path: path.to_path_buf(), source: e }))
}

fn prepare(a: PrepareArgs) -> Outcome {
    let mesh = load_obj(&a.template)?;
    let set = AnchorSet::initialize(&mesh, a.anchors, a.neighbors, a.vertex_anchors, a.seed)?;
    let v = mesh.vertex_count();
    let target = match a.simplify_ratio {
        Some(r) if r > 0.0 && r <= 1.0 => ((r * v as f64).round() as usize).max(1),
        Some(r) => return Err(usage(format!("--simplify-ratio must be in (0, 1], got {r}"))),
        None => (2 * a.anchors).min(v),
    };
    let simplified = qem_simplify(&mesh, target)?;
    create_dir(&a.out)?;
    let json = serde_json::to_string_pretty(&set).map_err(|e| usage(e.to_string()))?;
    write_file(&a.out.join("anchors.json"), &json)?;
    save_obj(&simplified.mesh, a.out.join("simplified.obj"))?;
    log::info!(
        "{} anchors, simplified {} -> {} vertices, written to {}",
        set.count(),
        v,
        simplified.mesh.vertex_count(),
        a.out.display()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_file(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.clips {
        cfg.clips = c;
    }
    if let Some(f) = a.frames {
        cfg.frames = f;
    }
    let ds = synth_cloth_threaded(&cfg, a.threads.max(1))?;
    let manifest = save_dataset(&ds, &a.out)?;
    log::info!("{} clips of {} frames, manifest {}", ds.clips.len(), cfg.frames, manifest.display());
    Ok(())
}

/// Applies `key=value` (dotted keys reach nested tables) to a config.
fn apply_set(cfg: TrainConfig, assignments: &[String]) -> Result<TrainConfig, Failure> {
    if assignments.is_empty() {
        return Ok(cfg);
    }
    let mut value = serde_json::to_value(&cfg).map_err(|e| usage(e.to_string()))?;
    for a in assignments {
        let (key, raw) = a.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {a:?}")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut slot = &mut value;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| usage(format!("unknown config key {key:?}")))?;
        }
        *slot = parsed;
    }
    serde_json::from_value(value).map_err(|e| usage(format!("--set: {e}")))
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => {$( if let Some(v) = a.$f { cfg.$f = v; } )*};
    }
    over!(epochs, lr, lr_late, batch_size, sequence_length, seed, n_anchors, neighbors, vertex_anchors, hidden_size, mlp_hidden, threads);
    if a.late_stage_start.is_some() {
        cfg.late_stage_start = a.late_stage_start;
    }
    if let Some(s) = a.strategy {
        cfg.strategy = match s {
            Strategy::Loose => StrategyMode::Loose,
            Strategy::Tight => StrategyMode::Tight,
            Strategy::Mixed => StrategyMode::Mixed,
        };
    }
    let cfg = apply_set(cfg, &a.set)?;
    let ds = load_dataset(&a.data)?;
    let template = a.template.as_deref().map(load_obj).transpose()?;
    let anchors = match &a.anchors {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::from(Error::Io { path: p.clone(), source: e }))?;
            let set: AnchorSet = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            if a.n_anchors.is_none() && set.count() != cfg.n_anchors {
                log::info!("using {} anchors from {}", set.count(), p.display());
            }
            Some(set)
        }
        None => None,
    };
    let out = train(&ds, template.as_ref(), &cfg, anchors, Some(&a.out))?;
    if let Some(last) = out.log.last() {
        println!("epoch {} rec {:.6e} total {:.6e}", last.epoch, last.rec, last.total);
    }
    Ok(())
}

/// Picks a clip from a manifest by name or index; a single clip needs no choice.
fn pick_clip(path: &Path, clip: Option<&str>) -> Result<Vec<MotionFrame>, Failure> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(load_clip(path)?.frames);
    }
    let ds = load_dataset(path)?;
    let idx = match clip {
        None if ds.clips.len() == 1 => 0,
        None => return Err(usage(format!("{} has {} clips; choose one with --clip", path.display(), ds.clips.len()))),
        Some(c) => match ds.clips.iter().position(|x| x.name == c) {
            Some(i) => i,
            None => c
                .parse::<usize>()
                .ok()
                .filter(|i| *i < ds.clips.len())
                .ok_or_else(|| usage(format!("no clip {c:?} in {}", path.display())))?,
        },
    };
    Ok(ds.clips.into_iter().nth(idx).map(|c| c.frames).unwrap_or_default())
}

fn frame_file(i: usize) -> String {
    format!("frame_{:06}.obj", i + 1)
}

fn infer_cmd(a: InferArgs) -> Outcome {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let frames = pick_clip(&a.motion, a.clip.as_deref())?;
    let pred = infer(&ck, &frames)?;
    create_dir(&a.out_dir)?;
    for (i, p) in pred.iter().enumerate() {
        let mesh = ck.template.with_positions(p.clone())?;
        save_obj(&mesh, a.out_dir.join(frame_file(i)))?;
    }
    log::info!("wrote {} frames to {}", pred.len(), a.out_dir.display());
    Ok(())
}

/// `*.obj` files of a directory in name order.
fn obj_sequence(dir: &Path) -> Result<Vec<Mesh>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::from(Error::Io { path: dir.to_path_buf(), source: e }))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "obj"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no OBJ files in {}", dir.display())));
    }
    paths.iter().map(|p| load_obj(p).map_err(Failure::from)).collect()
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let pred_meshes = obj_sequence(&a.pred_dir)?;
    let gt: Vec<Vec<Vec3>> = if a.gt.is_dir() {
        obj_sequence(&a.gt)?.iter().map(|m| m.vertices().to_vec()).collect()
    } else {
        let frames = pick_clip(&a.gt, a.clip.as_deref())?;
        frames
            .into_iter()
            .enumerate()
            .map(|(i, f)| f.gt_garment_vertices.ok_or_else(|| usage(format!("frame {} of {} has no ground truth", i + 1, a.gt.display()))))
            .collect::<Result<_, _>>()?
    };
    if gt.len() != pred_meshes.len() {
        return Err(usage(format!("{} predicted frames but {} ground-truth frames", pred_meshes.len(), gt.len())));
    }
    let pred: Vec<Vec<Vec3>> = pred_meshes.iter().map(|m| m.vertices().to_vec()).collect();
    let report = evaluate(&pred, &gt, &pred_meshes[0], a.threads.max(1))?;
    write_file(&a.out, &report.to_csv())?;
    let sted = report.sted.map_or_else(|| "n/a".to_string(), |s| format!("{s:.6}"));
    println!("rmse_mm {:.4} hausdorff_mm {:.4} sted {sted}", report.rmse_mm, report.hausdorff_mm);
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    let corrupt = a.corrupt.as_deref().map(|op| (op, 1.05));
    let report = gradcheck::run(a.seed, corrupt)?;
    for c in &report.cases {
        let status = if c.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
        println!("{:<24} {:>12.3e}  {status}", c.name, c.max_rel_error);
    }
    println!("per op (worst case containing it):");
    for (op, err) in report.per_op() {
        println!("  {op:<22} {err:>12.3e}");
    }
    let uncovered = report.uncovered();
    if !uncovered.is_empty() {
        return Err(Failure {
            code: 1,
            message: format!("ops without a check: {}", uncovered.join(", ")),
        });
    }
    let failed = report.failures();
    if !failed.is_empty() {
        return Err(Failure {
            code: 1,
            message: format!("gradient check failed for {} (tolerance {:e})", failed.join(", "), report.tolerance),
        });
    }
    println!("all {} checks below {:e}", report.cases.len(), report.tolerance);
    Ok(())
}
