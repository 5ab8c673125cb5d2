use std::fs;
use std::path::{Path, PathBuf};

use emomod_core::emotion::{encode_label, interpolate_emotions, EmotionLabel, EmotionVector};
use emomod_core::eval::{self, frame_state, EvalOptions, EvalReport};
use emomod_core::forge::{target_colors, Dataset, MANIFEST_FILE};
use emomod_core::gradsuite::{run_suite, SuiteRow};
use emomod_core::head::synthesize_sequence;
use emomod_core::metrics;
use emomod_core::model::{Checkpoint, Model};
use emomod_core::render::{self, Raster};
use emomod_core::tape::Faults;
use emomod_core::tensor::Tensor;
use emomod_core::train::{self, AblationReport, LossCurve, TrainOutput};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub const CURVE_FILE: &str = "loss_curve.csv";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

pub fn parse_emotion(name: &str) -> Result<EmotionLabel, CliError> {
    name.parse::<EmotionLabel>().map_err(CliError::from)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::read(dir)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(dir)?)
}

/// The dataset must have the template shape the config describes.
fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<(), CliError> {
    let (v, e) = (ds.template.vertex_count(), ds.template.expr_dims());
    if v != cfg.forge.vertices || e != cfg.forge.expr_dims {
        return Err(CliError::mismatch(format!(
            "dataset template has V={v}, E={e}; config says V={}, E={}",
            cfg.forge.vertices, cfg.forge.expr_dims
        )));
    }
    Ok(())
}

fn check_model(cfg: &RunConfig, ds: &Dataset, ck: &Checkpoint) -> Result<(), CliError> {
    ck.check_compatible(ds.template.expr_dims(), cfg.emotion.token_dim)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForgeSummary {
    pub records: usize,
    pub anchors: usize,
    pub identities: usize,
    pub train_identities: usize,
    pub held_out_identities: usize,
    pub emotions: usize,
    pub frames: usize,
    pub sync_max_error: f64,
    pub sync_pass: bool,
    pub hash: String,
    /// `Some(true)` when a dataset already at the destination hashed the same.
    pub identical_to_existing: Option<bool>,
}

pub fn forge(cfg: &RunConfig, out: &Path) -> Result<ForgeSummary, CliError> {
    let previous = out.join(MANIFEST_FILE).exists().then(|| Dataset::hash(out).ok()).flatten();
    let ds = Dataset::forge(&cfg.forge, cfg.seed)?;
    let sync = ds.sync_check()?;
    create_dir(out)?;
    ds.write(out)?;
    let hash = Dataset::hash(out)?;
    let m = &ds.manifest;
    Ok(ForgeSummary {
        records: ds.record_count(),
        anchors: m.counts.anchors,
        identities: m.counts.identities,
        train_identities: m.splits.train_identities.len(),
        held_out_identities: m.splits.held_out_identities.len(),
        emotions: m.counts.emotions,
        frames: m.counts.frames,
        sync_max_error: sync.max_error,
        sync_pass: sync.pass,
        identical_to_existing: previous.map(|p| p == hash),
        hash,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub geo_step: u64,
    pub app_step: u64,
    pub final_rows: Vec<train::CurveRow>,
}

fn finish_training(out: &Path, result: TrainOutput) -> Result<TrainSummary, CliError> {
    create_dir(out)?;
    result.checkpoint.save(out)?;
    let curve = out.join(CURVE_FILE);
    result.curve.write_csv(&curve)?;
    let last = result.curve.rows.iter().map(|r| r.step).max().unwrap_or(0);
    Ok(TrainSummary {
        checkpoint: out.to_path_buf(),
        curve,
        geo_step: result.checkpoint.header.geo_step,
        app_step: result.checkpoint.header.app_step,
        final_rows: result.curve.rows.iter().filter(|r| r.step == last).cloned().collect(),
    })
}

pub fn train_geo(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<TrainSummary, CliError> {
    let ds = load_dataset(dataset)?;
    check_dataset(cfg, &ds)?;
    finish_training(out, train::train_geo(&ds, &cfg.setup(), cfg.seed)?)
}

pub fn train_app(cfg: &RunConfig, dataset: &Path, geo: &Path, out: &Path) -> Result<TrainSummary, CliError> {
    let ds = load_dataset(dataset)?;
    check_dataset(cfg, &ds)?;
    let geo = load_checkpoint(geo)?;
    finish_training(out, train::train_app(&ds, &geo, &cfg.setup(), cfg.seed)?)
}

/// Both branches in the configured mode (staged or joint).
pub fn train_all(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<TrainSummary, CliError> {
    let ds = load_dataset(dataset)?;
    check_dataset(cfg, &ds)?;
    finish_training(out, train::train(&ds, &cfg.setup(), cfg.seed)?)
}

pub fn ablate(cfg: &RunConfig, dataset: &Path) -> Result<AblationReport, CliError> {
    let ds = load_dataset(dataset)?;
    check_dataset(cfg, &ds)?;
    Ok(train::run_ablation(&ds, &cfg.setup(), cfg.seed)?)
}

pub fn eval_options(cfg: &RunConfig) -> Result<EvalOptions, CliError> {
    Ok(EvalOptions {
        camera: cfg.render.camera()?,
        frames: cfg.train.eval_frames,
        loss: cfg.train.loss.clone(),
        source: cfg.train.driving_source,
    })
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<EvalReport, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    check_model(cfg, &ds, &ck)?;
    Ok(eval::evaluate(&ck.model, &ds, &eval_options(cfg)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferReport {
    pub identity: usize,
    pub anchor: usize,
    pub src: EmotionLabel,
    pub tgt: EmotionLabel,
    /// AED of the modulated sequence to the target.
    pub aed_modulated: f64,
    /// AED of the unmodified driving sequence to the target.
    pub aed_driving: f64,
    pub frames_written: usize,
    pub params_csv: PathBuf,
}

/// Inputs shared by transfer and interpolation.
struct Scene {
    ds: Dataset,
    model: Model,
    driving: Tensor,
    cam: render::Camera,
}

fn scene(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, identity: usize, anchor: usize, src: EmotionLabel) -> Result<Scene, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    check_model(cfg, &ds, &ck)?;
    if identity >= ds.identities.len() {
        return Err(CliError::usage(format!("identity {identity} out of range 0..{}", ds.identities.len())));
    }
    if anchor >= ds.anchors.len() {
        return Err(CliError::usage(format!("anchor {anchor} out of range 0..{}", ds.anchors.len())));
    }
    let driving = ds.sequence(anchor, src)?;
    Ok(Scene {
        driving,
        model: ck.model,
        ds,
        cam: cfg.render.camera()?,
    })
}

/// Modulated parameters and colors of every frame for emotion code `e`.
fn modulated(s: &Scene, identity: usize, e: &EmotionVector) -> Result<(Tensor, Tensor, Tensor), CliError> {
    let p = s.model.modulate(&s.driving, e)?;
    let reference = s.ds.identity(identity)?.reference(&s.ds.template)?;
    let colors = s.model.colors(&reference, &s.ds.template, &p, e)?;
    let verts = synthesize_sequence(&s.ds.template, &p)?;
    Ok((p, verts, colors))
}

/// Writes `frame,kind,p0..` rows for each named sequence.
fn write_params(path: &Path, seqs: &[(&str, &Tensor)]) -> Result<(), CliError> {
    let cols = seqs.first().map_or(0, |(_, t)| t.cols());
    let mut text = String::from("frame,kind");
    for j in 0..cols {
        text.push_str(&format!(",p{j}"));
    }
    text.push('\n');
    for (kind, t) in seqs {
        for f in 0..t.rows() {
            text.push_str(&format!("{f},{kind}"));
            for v in t.row(f) {
                text.push_str(&format!(",{v:e}"));
            }
            text.push('\n');
        }
    }
    fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
pub fn transfer(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    identity: usize,
    anchor: usize,
    src: EmotionLabel,
    tgt: EmotionLabel,
    out: &Path,
) -> Result<TransferReport, CliError> {
    let s = scene(cfg, checkpoint, dataset, identity, anchor, src)?;
    create_dir(out)?;
    let (p, verts, colors) = modulated(&s, identity, &encode_label(tgt))?;
    let t = &s.ds.template;
    let id = s.ds.identity(identity)?;
    let target = s.ds.sequence(anchor, tgt)?;
    let tv = synthesize_sequence(t, &target)?;
    let tc = target_colors(id, t, s.ds.map(tgt), &target, s.ds.manifest.kappa)?;
    let dv = synthesize_sequence(t, &s.driving)?;
    let dc = target_colors(id, t, s.ds.map(src), &s.driving, s.ds.manifest.kappa)?;
    for f in 0..p.rows() {
        let d = render::render(&frame_state(&dv, &dc, f)?, &s.cam)?;
        let m = render::render(&frame_state(&verts, &colors, f)?, &s.cam)?;
        let g = render::render(&frame_state(&tv, &tc, f)?, &s.cam)?;
        Raster::hstack(&[&d, &m, &g])?.write_ppm(&out.join(format!("frame_{f:03}.ppm")))?;
    }
    let params_csv = out.join("params.csv");
    write_params(&params_csv, &[("driving", &s.driving), ("modulated", &p), ("target", &target)])?;
    let report = TransferReport {
        identity,
        anchor,
        src,
        tgt,
        aed_modulated: metrics::aed(&eval::expression_part(&p), &eval::expression_part(&target))?,
        aed_driving: metrics::aed(&eval::expression_part(&s.driving), &eval::expression_part(&target))?,
        frames_written: p.rows(),
        params_csv,
    };
    write_json(&out.join("transfer.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterpolationReport {
    pub from: EmotionLabel,
    pub via: Option<EmotionLabel>,
    pub to: EmotionLabel,
    pub steps: usize,
    pub frame: usize,
    /// Path coordinate of each grid point, in `[0, 1]`.
    pub positions: Vec<f64>,
    /// Max over frames of the parameter change between adjacent grid points.
    pub param_deltas: Vec<f64>,
    pub max_param_delta: f64,
    /// Max per-vertex color change of the rendered frame between adjacent points.
    pub max_color_delta: f64,
    /// Norm of the emotion-driven color residual (vs. the neutral decode) per point.
    pub color_residual_norms: Vec<f64>,
}

/// Emotion code at path position `s`: straight from `from` to `to`, or
/// through `via` at `s = 0.5`.
pub fn path_code(from: EmotionLabel, via: Option<EmotionLabel>, to: EmotionLabel, s: f64) -> Result<EmotionVector, CliError> {
    let (a, b) = (encode_label(from), encode_label(to));
    let e = match via {
        None => interpolate_emotions(&a, &b, s)?,
        Some(v) => {
            let m = encode_label(v);
            if s <= 0.5 {
                interpolate_emotions(&a, &m, 2.0 * s)?
            } else {
                interpolate_emotions(&m, &b, 2.0 * s - 1.0)?
            }
        }
    };
    Ok(e)
}

/// Interpolation output: the report plus the per-point parameter sequences.
pub struct Interpolation {
    pub report: InterpolationReport,
    pub params: Vec<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn interpolate(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    identity: usize,
    anchor: usize,
    from: EmotionLabel,
    via: Option<EmotionLabel>,
    to: EmotionLabel,
    steps: usize,
    frame: usize,
    out: &Path,
) -> Result<Interpolation, CliError> {
    if steps < 2 {
        return Err(CliError::usage(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let s = scene(cfg, checkpoint, dataset, identity, anchor, EmotionLabel::Neutral)?;
    if frame >= s.driving.rows() {
        return Err(CliError::usage(format!("frame {frame} out of range 0..{}", s.driving.rows())));
    }
    create_dir(out)?;
    let v = s.ds.template.vertex_count();
    let frame_colors = |c: &Tensor| Tensor::matrix(v, 3, c.data()[frame * v * 3..(frame + 1) * v * 3].to_vec());
    let (_, _, neutral_colors) = modulated(&s, identity, &EmotionVector::NEUTRAL)?;
    let neutral_frame = frame_colors(&neutral_colors);
    let mut positions = Vec::with_capacity(steps);
    let mut params = Vec::with_capacity(steps);
    let mut colors = Vec::with_capacity(steps);
    let mut residuals = Vec::with_capacity(steps);
    for i in 0..steps {
        let pos = i as f64 / (steps - 1) as f64;
        let e = path_code(from, via, to, pos)?;
        let (p, verts, c) = modulated(&s, identity, &e)?;
        render::render(&frame_state(&verts, &c, frame)?, &s.cam)?.write_ppm(&out.join(format!("step_{i:03}.ppm")))?;
        let fc = frame_colors(&c);
        residuals.push(fc.sub(&neutral_frame)?.norm());
        positions.push(pos);
        params.push(p);
        colors.push(fc);
    }
    let row_delta = |a: &Tensor, b: &Tensor| -> f64 {
        (0..a.rows())
            .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    };
    let param_deltas: Vec<f64> = params.windows(2).map(|w| row_delta(&w[0], &w[1])).collect();
    let max_color_delta = colors.windows(2).map(|w| row_delta(&w[0], &w[1])).fold(0.0, f64::max);
    let report = InterpolationReport {
        from,
        via,
        to,
        steps,
        frame,
        positions,
        max_param_delta: param_deltas.iter().copied().fold(0.0, f64::max),
        param_deltas,
        max_color_delta,
        color_residual_norms: residuals,
    };
    write_json(&out.join("interpolation.json"), &report)?;
    Ok(Interpolation { report, params })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RenderSummary {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub modulated: bool,
}

/// Renders one frame of a dataset sequence, or of its modulated version
/// (driven from neutral) when a checkpoint is given.
#[allow(clippy::too_many_arguments)]
pub fn render_frame(
    cfg: &RunConfig,
    dataset: &Path,
    checkpoint: Option<&Path>,
    identity: usize,
    anchor: usize,
    emotion: EmotionLabel,
    frame: usize,
    out: &Path,
) -> Result<RenderSummary, CliError> {
    let raster = match checkpoint {
        Some(ck) => {
            let s = scene(cfg, ck, dataset, identity, anchor, EmotionLabel::Neutral)?;
            if frame >= s.driving.rows() {
                return Err(CliError::usage(format!("frame {frame} out of range 0..{}", s.driving.rows())));
            }
            let (_, verts, colors) = modulated(&s, identity, &encode_label(emotion))?;
            render::render(&frame_state(&verts, &colors, frame)?, &s.cam)?
        }
        None => {
            let ds = load_dataset(dataset)?;
            let rec = ds.record(anchor, identity, emotion, emotion)?;
            if frame >= rec.target.rows() {
                return Err(CliError::usage(format!("frame {frame} out of range 0..{}", rec.target.rows())));
            }
            render::render(&frame_state(&rec.target_vertices, &rec.target_colors, frame)?, &cfg.render.camera()?)?
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    raster.write_ppm(out)?;
    Ok(RenderSummary {
        path: out.to_path_buf(),
        width: raster.width,
        height: raster.height,
        modulated: checkpoint.is_some(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckTable {
    pub rows: Vec<SuiteRow>,
    pub pass: bool,
}

pub fn gradcheck(faults: Faults) -> Result<GradcheckTable, CliError> {
    let rows = run_suite(faults)?;
    let pass = rows.iter().all(|r| r.pass);
    Ok(GradcheckTable { rows, pass })
}

impl GradcheckTable {
    pub fn render(&self) -> String {
        let mut s = format!("{:<24} {:>12} {:>8}  result\n", "check", "max_rel_err", "coords");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<24} {:>12.3e} {:>8}  {}\n",
                r.name,
                r.max_rel_err,
                r.coordinates,
                if r.pass { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

pub fn read_curve(dir: &Path) -> Result<LossCurve, CliError> {
    Ok(LossCurve::read_csv(&dir.join(CURVE_FILE))?)
}
