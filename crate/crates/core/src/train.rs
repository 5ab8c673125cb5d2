//! Losses, the Adam optimizer and the training loops.
//!
//! Geometry and appearance are supervised separately: the geometry loss
//! compares parameters and surfaces, the appearance loss compares rendered
//! pixels with the splat assignment held fixed so gradients reach colors
//! only. By default the branches are trained in stages (geometry first, then
//! appearance against the frozen geometry); a joint mode updates both every
//! step.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::app::{self, AppModulatorConfig, AppearanceModWeights};
use crate::emotion::{encode_label, masked_token_var, EmotionLabel, EmotionTable};
use crate::error::{Error, Result};
use crate::eval::{even_frames, expression_part, select_rows};
use crate::forge::{sub_seed, Dataset};
use crate::geo::{GeoModulatorConfig, GeoModulatorWeights};
use crate::head::{synthesize_sequence, HeadTemplate, TemplateVars};
use crate::metrics;
use crate::model::{Checkpoint, Model};
use crate::params::{Bound, ParamStore};
use crate::render::{self, Camera, Raster};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeoLossWeights {
    pub lambda_param: f64,
    pub lambda_surf: f64,
}

impl Default for GeoLossWeights {
    fn default() -> Self {
        Self {
            lambda_param: 1.0,
            lambda_surf: 1.0,
        }
    }
}

impl GeoLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_param >= 0.0 && self.lambda_surf >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config("geometry loss weights must be nonnegative".into()))
        }
    }
}

/// Records `mean_t λ_param‖p̃_t − p*_t‖² + λ_surf‖Ṽ_t − V*_t‖²`.
pub fn geo_loss_var(
    tape: &mut Tape,
    tv: &TemplateVars,
    pred: Var,
    target: &Tensor,
    target_vertices: &Tensor,
    w: &GeoLossWeights,
) -> Result<Var> {
    let frames = tape.value(pred).rows() as f64;
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let param = tape.sumsq(d)?;
    let param = tape.scale(param, w.lambda_param / frames)?;
    if w.lambda_surf == 0.0 {
        return Ok(param);
    }
    let verts = tv.synthesize(tape, pred)?;
    let tv_const = tape.constant(target_vertices.clone());
    let dv = tape.sub(verts, tv_const)?;
    let surf = tape.sumsq(dv)?;
    let surf = tape.scale(surf, w.lambda_surf / frames)?;
    tape.add(param, surf)
}

pub fn geo_loss(pred: &Tensor, target: &Tensor, template: &HeadTemplate, w: &GeoLossWeights) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("geo_loss", pred.shape(), target.shape()));
    }
    let mut tape = Tape::new();
    let tv = TemplateVars::record(&mut tape, template)?;
    let p = tape.constant(pred.clone());
    let target_vertices = synthesize_sequence(template, target)?;
    let l = geo_loss_var(&mut tape, &tv, p, target, &target_vertices, w)?;
    Ok(tape.value(l).item())
}

/// Mean squared pixel error.
pub fn app_loss(rendered: &Raster, target: &Raster) -> Result<f64> {
    metrics::mse(rendered, target)
}

pub fn app_loss_var(tape: &mut Tape, pixels: Var, target: &Tensor) -> Result<Var> {
    let n = target.numel() as f64;
    let t = tape.constant(target.clone());
    let d = tape.sub(pixels, t)?;
    let s = tape.sumsq(d)?;
    tape.scale(s, 1.0 / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update; `grads` follow the order of `params`.
pub fn adam_step(state: &mut OptimizerState, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dim {
            what: "gradient count",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }
    state.step += 1;
    let c = &state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
        }
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(state.m[i].data()).zip(state.v[i].data()) {
            *pj -= c.lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Staged,
    Joint,
}

/// Which emotion variant of an anchor drives the modulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrivingSource {
    /// The neutral performance of the anchor.
    Neutral,
    /// Every emotion variant.
    Any,
}

impl DrivingSource {
    pub fn sources(self) -> Vec<EmotionLabel> {
        match self {
            DrivingSource::Neutral => vec![EmotionLabel::Neutral],
            DrivingSource::Any => EmotionLabel::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Geometry optimizer steps (also the joint-mode step count).
    pub steps: usize,
    /// Appearance optimizer steps in staged mode.
    pub app_steps: usize,
    /// Records whose gradients are averaged into one step.
    pub accumulate: usize,
    /// Steps between loss-curve rows.
    pub steps_per_epoch: usize,
    pub adam: AdamConfig,
    pub loss: GeoLossWeights,
    pub mode: TrainMode,
    pub driving_source: DrivingSource,
    /// Frames sampled per record for the appearance loss.
    pub app_frames: usize,
    /// Evenly spaced frames per record used for appearance evaluation.
    pub eval_frames: usize,
    /// Whether the geometry objective also updates the emotion table.
    pub train_emotion_table: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            app_steps: 300,
            accumulate: 8,
            steps_per_epoch: 100,
            adam: AdamConfig::default(),
            loss: GeoLossWeights::default(),
            mode: TrainMode::Staged,
            driving_source: DrivingSource::Neutral,
            app_frames: 2,
            eval_frames: 8,
            train_emotion_table: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.accumulate == 0 || self.steps_per_epoch == 0 || self.app_frames == 0 || self.eval_frames == 0 {
            return Err(Error::Config("accumulate, steps_per_epoch and frame counts must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && (0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2)) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub resolution: usize,
    pub splat_radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            splat_radius: 1.0,
        }
    }
}

impl RenderConfig {
    pub fn camera(&self) -> Result<Camera> {
        Camera::front(self.resolution, self.splat_radius)
    }
}

/// Model shapes plus optimization settings for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Setup {
    pub token_dim: usize,
    pub geo: GeoModulatorConfig,
    pub app: AppModulatorConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
}

impl Default for Setup {
    fn default() -> Self {
        Self {
            token_dim: 32,
            geo: GeoModulatorConfig::default(),
            app: AppModulatorConfig::default(),
            train: TrainConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl Setup {
    pub fn validate(&self, param_dims: usize) -> Result<()> {
        if self.token_dim == 0 {
            return Err(Error::Config("token_dim must be positive".into()));
        }
        self.geo.validate(param_dims)?;
        self.app.validate()?;
        self.train.validate()?;
        self.render.camera()?;
        Ok(())
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

/// Rows of `step,split,loss_name,value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub rows: Vec<CurveRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub split: String,
    pub loss_name: String,
    pub value: f64,
}

impl LossCurve {
    pub fn push(&mut self, step: usize, split: &str, loss_name: &str, value: f64) {
        self.rows.push(CurveRow {
            step,
            split: split.into(),
            loss_name: loss_name.into(),
            value,
        });
    }

    pub fn series(&self, split: &str, loss_name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.loss_name == loss_name)
            .map(|r| r.value)
            .collect()
    }

    pub fn extend(&mut self, other: &LossCurve) {
        self.rows.extend(other.rows.iter().cloned());
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<CurveRow>, _>>()?;
        Ok(Self { rows })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub curve: LossCurve,
}

/// Endless stream over `items`, reshuffled at every pass.
struct Sampler<T> {
    items: Vec<T>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<T: Clone> Sampler<T> {
    fn new(items: Vec<T>, seed: u64) -> Self {
        let mut s = Self {
            items,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.items.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self) -> T {
        if self.pos == self.items.len() {
            self.items.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.items[self.pos - 1].clone()
    }
}

const SEED_TABLE: u64 = 20;
const SEED_GEO: u64 = 21;
const SEED_APP: u64 = 22;
const SEED_GEO_ORDER: u64 = 23;
const SEED_APP_ORDER: u64 = 24;

/// One geometry example: anchor performed under `src`, retargeted to `tgt`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GeoPair {
    pub anchor: usize,
    pub src: EmotionLabel,
    pub tgt: EmotionLabel,
}

pub fn geo_pairs(anchors: &[usize], source: DrivingSource) -> Vec<GeoPair> {
    let mut out = Vec::new();
    for &anchor in anchors {
        for src in source.sources() {
            for tgt in EmotionLabel::ALL {
                out.push(GeoPair { anchor, src, tgt });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AppPair {
    pub geo: GeoPair,
    pub identity: usize,
}

pub fn app_pairs(anchors: &[usize], identities: &[usize], source: DrivingSource) -> Vec<AppPair> {
    let mut out = Vec::new();
    for geo in geo_pairs(anchors, source) {
        for &identity in identities {
            out.push(AppPair { geo, identity });
        }
    }
    out
}

/// Driving/target sequences and target surfaces, computed once per run.
pub struct GeoCache {
    sequences: HashMap<(usize, EmotionLabel), Tensor>,
    vertices: HashMap<(usize, EmotionLabel), Tensor>,
}

impl GeoCache {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let mut sequences = HashMap::new();
        let mut vertices = HashMap::new();
        for a in 0..ds.anchors.len() {
            for l in EmotionLabel::ALL {
                let s = ds.sequence(a, l)?;
                vertices.insert((a, l), synthesize_sequence(&ds.template, &s)?);
                sequences.insert((a, l), s);
            }
        }
        Ok(Self { sequences, vertices })
    }

    pub fn sequence(&self, anchor: usize, label: EmotionLabel) -> &Tensor {
        &self.sequences[&(anchor, label)]
    }

    pub fn target_vertices(&self, anchor: usize, label: EmotionLabel) -> &Tensor {
        &self.vertices[&(anchor, label)]
    }
}

fn grads_in_order(grads: &crate::tape::Gradients, bound: &Bound) -> Vec<Tensor> {
    bound.iter().map(|(_, v)| grads.wrt(v).clone()).collect()
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, g: Vec<Tensor>) -> Result<()> {
    match acc {
        None => *acc = Some(g),
        Some(sum) => {
            for (s, x) in sum.iter_mut().zip(&g) {
                *s = s.add(x)?;
            }
        }
    }
    Ok(())
}

fn averaged(acc: Option<Vec<Tensor>>, n: usize) -> Vec<Tensor> {
    acc.unwrap_or_default()
        .into_iter()
        .map(|t| t.scale(1.0 / n as f64))
        .collect()
}

fn table_store(table: &EmotionTable) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("emotion_table", table.weights.clone());
    p
}

/// Held-out (or any) mean geometry loss and stacked predictions.
pub struct GeoEval {
    pub loss: f64,
    pub pred: Tensor,
    pub target: Tensor,
    pub driving: Tensor,
}

pub fn evaluate_geo(model: &Model, ds: &Dataset, cache: &GeoCache, pairs: &[GeoPair], w: &GeoLossWeights) -> Result<GeoEval> {
    let mut loss = 0.0;
    let (mut pred, mut target, mut driving) = (Vec::new(), Vec::new(), Vec::new());
    let mut rows = 0;
    for pair in pairs {
        let mut tape = Tape::new();
        let tv = TemplateVars::record(&mut tape, &ds.template)?;
        let drv = cache.sequence(pair.anchor, pair.src);
        let tgt = cache.sequence(pair.anchor, pair.tgt);
        let p = model.modulate(drv, &encode_label(pair.tgt))?;
        let pv = tape.constant(p.clone());
        let l = geo_loss_var(&mut tape, &tv, pv, tgt, cache.target_vertices(pair.anchor, pair.tgt), w)?;
        loss += tape.value(l).item();
        pred.extend_from_slice(p.data());
        target.extend_from_slice(tgt.data());
        driving.extend_from_slice(drv.data());
        rows += p.rows();
    }
    if pairs.is_empty() {
        return Err(Error::Contract("no records to evaluate".into()));
    }
    let cols = model.geo.param_dims;
    Ok(GeoEval {
        loss: loss / pairs.len() as f64,
        pred: Tensor::matrix(rows, cols, pred),
        target: Tensor::matrix(rows, cols, target),
        driving: Tensor::matrix(rows, cols, driving),
    })
}

fn fresh_model(ds: &Dataset, setup: &Setup, seed: u64) -> Result<Model> {
    let param_dims = ds.template.param_dims();
    setup.validate(param_dims)?;
    Ok(Model {
        table: EmotionTable::init(setup.token_dim, sub_seed(seed, SEED_TABLE, 0)),
        geo: GeoModulatorWeights::init(&setup.geo, param_dims, setup.token_dim, sub_seed(seed, SEED_GEO, 0))?,
        app: None,
    })
}

/// One geometry optimizer step over `batch`; returns the mean record loss.
fn geo_step(
    model: &mut Model,
    ds: &Dataset,
    cache: &GeoCache,
    batch: &[GeoPair],
    setup: &Setup,
    geo_opt: &mut OptimizerState,
    table_opt: &mut OptimizerState,
) -> Result<f64> {
    let mut acc_geo = None;
    let mut acc_table = None;
    let mut total = 0.0;
    for pair in batch {
        let mut tape = Tape::new();
        let tv = TemplateVars::record(&mut tape, &ds.template)?;
        let bound = model.geo.params.bind(&mut tape, true);
        let tstore = table_store(&model.table);
        let tbound = tstore.bind(&mut tape, setup.train.train_emotion_table);
        let e = tape.constant(encode_label(pair.tgt).as_tensor());
        let token = masked_token_var(&mut tape, tbound.get("emotion_table"), e)?;
        let drv = tape.constant(cache.sequence(pair.anchor, pair.src).clone());
        let pred = model.geo.forward(&mut tape, &bound, drv, token)?;
        let loss = geo_loss_var(
            &mut tape,
            &tv,
            pred,
            cache.sequence(pair.anchor, pair.tgt),
            cache.target_vertices(pair.anchor, pair.tgt),
            &setup.train.loss,
        )?;
        total += tape.value(loss).item();
        let grads = tape.backward(loss)?;
        accumulate(&mut acc_geo, grads_in_order(&grads, &bound))?;
        if setup.train.train_emotion_table {
            accumulate(&mut acc_table, grads_in_order(&grads, &tbound))?;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("geometry loss".into()));
    }
    adam_step(geo_opt, &mut model.geo.params, &averaged(acc_geo, batch.len()))?;
    if setup.train.train_emotion_table {
        let mut ts = table_store(&model.table);
        adam_step(table_opt, &mut ts, &averaged(acc_table, batch.len()))?;
        model.table.weights = ts.expect("emotion_table")?.clone();
    }
    Ok(total / batch.len() as f64)
}

/// Trains the geometry modulator and emotion table from a zero-initialized
/// (identity) modulator.
pub fn train_geo(ds: &Dataset, setup: &Setup, seed: u64) -> Result<TrainOutput> {
    let mut model = fresh_model(ds, setup, seed)?;
    let splits = &ds.manifest.splits;
    let train_pairs = geo_pairs(&splits.train_anchors, setup.train.driving_source);
    let held_pairs = geo_pairs(&splits.held_out_anchors, setup.train.driving_source);
    if train_pairs.is_empty() {
        return Err(Error::Contract("dataset has no geometry training records".into()));
    }
    let cache = GeoCache::new(ds)?;
    let mut sampler = Sampler::new(train_pairs, sub_seed(seed, SEED_GEO_ORDER, 0));
    let mut geo_opt = OptimizerState::new(setup.train.adam.clone(), &model.geo.params);
    let mut table_opt = OptimizerState::new(setup.train.adam.clone(), &table_store(&model.table));
    let mut curve = LossCurve::default();
    let mut epoch_sum = 0.0;
    let mut epoch_steps = 0;
    for step in 0..setup.train.steps {
        let batch: Vec<GeoPair> = (0..setup.train.accumulate).map(|_| sampler.next()).collect();
        epoch_sum += geo_step(&mut model, ds, &cache, &batch, setup, &mut geo_opt, &mut table_opt)?;
        epoch_steps += 1;
        if (step + 1) % setup.train.steps_per_epoch == 0 || step + 1 == setup.train.steps {
            curve.push(step + 1, "train", "geo_loss", epoch_sum / epoch_steps as f64);
            let held = evaluate_geo(&model, ds, &cache, &held_pairs, &setup.train.loss)?;
            curve.push(step + 1, "held_out", "geo_loss", held.loss);
            epoch_sum = 0.0;
            epoch_steps = 0;
        }
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint::new(model, seed, setup.train.steps as u64, 0, None, setup.echo()),
        curve,
    })
}

/// Appearance ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AppVariant {
    /// Feed zero emotion tokens to the appearance path.
    pub zero_tokens: bool,
    /// Drive the appearance path with unmodulated parameters.
    pub identity_geometry: bool,
}

/// Tape-ready inputs for one appearance example over a subset of frames.
pub struct AppBatch {
    pub region_colors: Tensor,
    pub region_positions: Tensor,
    pub queries: Tensor,
    pub region_index: Arc<Vec<usize>>,
    /// Pixel-to-color gather over all frames; the last row is background.
    pub gather: Arc<Vec<usize>>,
    /// `frames·HW × 3` target pixels.
    pub target: Tensor,
    pub frames: usize,
}

/// Frozen geometry predictions per (anchor, src, tgt).
pub struct PredCache {
    preds: HashMap<GeoPair, Tensor>,
}

impl PredCache {
    pub fn new(model: &Model, cache: &GeoCache, pairs: &[GeoPair], identity_geometry: bool) -> Result<Self> {
        let mut preds = HashMap::new();
        for &pair in pairs {
            if preds.contains_key(&pair) {
                continue;
            }
            let drv = cache.sequence(pair.anchor, pair.src);
            let p = if identity_geometry {
                drv.clone()
            } else {
                model.modulate(drv, &encode_label(pair.tgt))?
            };
            preds.insert(pair, p);
        }
        Ok(Self { preds })
    }

    pub fn get(&self, pair: &GeoPair) -> &Tensor {
        &self.preds[pair]
    }
}

pub fn prepare_app_batch(
    ds: &Dataset,
    cache: &GeoCache,
    pair: &AppPair,
    pred: &Tensor,
    frames: &[usize],
    cam: &Camera,
) -> Result<AppBatch> {
    let t = &ds.template;
    let v = t.vertex_count();
    let identity = ds.identity(pair.identity)?;
    let reference = identity.reference(t)?;
    let (region_colors, region_positions) = app::region_summary(&reference, t)?;
    let sub = select_rows(pred, frames);
    let queries = app::query_features(t, &sub)?;
    let pred_vertices = synthesize_sequence(t, &sub)?;
    let tgt_params = cache.sequence(pair.geo.anchor, pair.geo.tgt);
    let tgt_vertices = cache.target_vertices(pair.geo.anchor, pair.geo.tgt);
    let tgt_map = ds.map(pair.geo.tgt);
    let tgt_colors = crate::forge::target_colors(identity, t, tgt_map, &select_rows(tgt_params, frames), ds.manifest.kappa)?;
    let n = frames.len();
    let mut gather = Vec::with_capacity(n * cam.pixels());
    let mut target = Vec::with_capacity(n * cam.pixels() * 3);
    for (k, &f) in frames.iter().enumerate() {
        let pv = pred_vertices.row(k).to_vec();
        let assign = render::rasterize(&Tensor::matrix(v, 3, pv), cam)?;
        gather.extend(assign.owner.iter().map(|o| o.map_or(n * v, |i| k * v + i)));
        let tv = Tensor::matrix(v, 3, tgt_vertices.row(f).to_vec());
        let tc = Tensor::matrix(v, 3, tgt_colors.data()[k * v * 3..(k + 1) * v * 3].to_vec());
        let raster = render::shade(&render::rasterize(&tv, cam)?, &tc, cam)?;
        target.extend_from_slice(&raster.data);
    }
    Ok(AppBatch {
        region_colors,
        region_positions,
        queries,
        region_index: app::region_index(t, n),
        gather: Arc::new(gather),
        target: Tensor::matrix(n * cam.pixels(), 3, target),
        frames: n,
    })
}

/// Records predicted pixels (`frames·HW × 3`) for one batch.
pub fn app_forward(
    tape: &mut Tape,
    w: &AppearanceModWeights,
    bound: &Bound,
    token: Var,
    batch: &AppBatch,
) -> Result<Var> {
    let colors = tape.constant(batch.region_colors.clone());
    let positions = tape.constant(batch.region_positions.clone());
    let a = w.encode_regions(tape, bound, colors, positions)?;
    let ae = w.emotion_tokens(tape, bound, token)?;
    let combined = tape.concat_rows(&[a, ae])?;
    let queries = tape.constant(batch.queries.clone());
    let base = tape.gather_rows(colors, batch.region_index.clone())?;
    let decoded = w.decode(tape, bound, combined, queries, base)?;
    let bg = tape.constant(Tensor::full(&[1, 3], render::BACKGROUND));
    let ext = tape.concat_rows(&[decoded, bg])?;
    tape.gather_rows(ext, batch.gather.clone())
}

fn token_var(tape: &mut Tape, table: &EmotionTable, tgt: EmotionLabel, zero: bool) -> Result<Var> {
    if zero {
        return Ok(tape.constant(Tensor::zeros(&[table.token_dim(), crate::emotion::EMOTION_DIMS])));
    }
    let t = tape.constant(table.weights.clone());
    let e = tape.constant(encode_label(tgt).as_tensor());
    masked_token_var(tape, t, e)
}

/// Mean appearance loss over `pairs` using evenly spaced frames.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_app(
    model: &Model,
    w: &AppearanceModWeights,
    ds: &Dataset,
    cache: &GeoCache,
    preds: &PredCache,
    pairs: &[AppPair],
    setup: &Setup,
    variant: AppVariant,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("no records to evaluate".into()));
    }
    let cam = setup.render.camera()?;
    let frames = even_frames(ds.manifest.counts.frames, setup.train.eval_frames);
    let mut total = 0.0;
    for pair in pairs {
        let batch = prepare_app_batch(ds, cache, pair, preds.get(&pair.geo), &frames, &cam)?;
        let mut tape = Tape::new();
        let bound = w.params.bind(&mut tape, false);
        let token = token_var(&mut tape, &model.table, pair.geo.tgt, variant.zero_tokens)?;
        let px = app_forward(&mut tape, w, &bound, token, &batch)?;
        let l = app_loss_var(&mut tape, px, &batch.target)?;
        total += tape.value(l).item();
    }
    Ok(total / pairs.len() as f64)
}

fn app_step(
    w: &mut AppearanceModWeights,
    table: &EmotionTable,
    batches: &[(AppPair, AppBatch)],
    variant: AppVariant,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let mut acc = None;
    let mut total = 0.0;
    for (pair, batch) in batches {
        let mut tape = Tape::new();
        let bound = w.params.bind(&mut tape, true);
        let token = token_var(&mut tape, table, pair.geo.tgt, variant.zero_tokens)?;
        let px = app_forward(&mut tape, w, &bound, token, batch)?;
        let loss = app_loss_var(&mut tape, px, &batch.target)?;
        total += tape.value(loss).item();
        let grads = tape.backward(loss)?;
        accumulate(&mut acc, grads_in_order(&grads, &bound))?;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("appearance loss".into()));
    }
    adam_step(opt, &mut w.params, &averaged(acc, batches.len()))?;
    Ok(total / batches.len() as f64)
}

/// Trains the appearance branch against a frozen geometry checkpoint.
pub fn train_app(ds: &Dataset, geo: &Checkpoint, setup: &Setup, seed: u64) -> Result<TrainOutput> {
    train_app_variant(ds, geo, setup, seed, AppVariant::default())
}

pub fn train_app_variant(
    ds: &Dataset,
    geo: &Checkpoint,
    setup: &Setup,
    seed: u64,
    variant: AppVariant,
) -> Result<TrainOutput> {
    let e = ds.template.expr_dims();
    geo.check_compatible(e, setup.token_dim)?;
    setup.validate(ds.template.param_dims())?;
    let splits = &ds.manifest.splits;
    let source = setup.train.driving_source;
    let train_pairs = app_pairs(&splits.train_anchors, &splits.train_identities, source);
    let held_pairs = app_pairs(&splits.held_out_anchors, &splits.held_out_identities, source);
    if train_pairs.is_empty() {
        return Err(Error::Contract("dataset has no appearance training records".into()));
    }
    let cache = GeoCache::new(ds)?;
    let model = geo.model.clone();
    let all_geo: Vec<GeoPair> = train_pairs.iter().chain(&held_pairs).map(|p| p.geo).collect();
    let preds = PredCache::new(&model, &cache, &all_geo, variant.identity_geometry)?;
    let cam = setup.render.camera()?;
    let mut w = AppearanceModWeights::init(&setup.app, setup.token_dim, sub_seed(seed, SEED_APP, 0))?;
    let mut opt = OptimizerState::new(setup.train.adam.clone(), &w.params);
    let mut sampler = Sampler::new(train_pairs, sub_seed(seed, SEED_APP_ORDER, 0));
    let mut frame_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, SEED_APP_ORDER, 1));
    let frames_total = ds.manifest.counts.frames;
    let mut curve = LossCurve::default();
    let (mut epoch_sum, mut epoch_steps) = (0.0, 0);
    let steps = setup.train.app_steps;
    for step in 0..steps {
        let mut batches = Vec::with_capacity(setup.train.accumulate);
        for _ in 0..setup.train.accumulate {
            let pair = sampler.next();
            let mut frames = sample(&mut frame_rng, frames_total, setup.train.app_frames.min(frames_total)).into_vec();
            frames.sort_unstable();
            let batch = prepare_app_batch(ds, &cache, &pair, preds.get(&pair.geo), &frames, &cam)?;
            batches.push((pair, batch));
        }
        epoch_sum += app_step(&mut w, &model.table, &batches, variant, &mut opt)?;
        epoch_steps += 1;
        if (step + 1) % setup.train.steps_per_epoch == 0 || step + 1 == steps {
            curve.push(step + 1, "train", "app_loss", epoch_sum / epoch_steps as f64);
            let held = evaluate_app(&model, &w, ds, &cache, &preds, &held_pairs, setup, variant)?;
            curve.push(step + 1, "held_out", "app_loss", held);
            epoch_sum = 0.0;
            epoch_steps = 0;
        }
    }
    let out = Model {
        app: Some(w),
        ..model
    };
    Ok(TrainOutput {
        checkpoint: Checkpoint::new(out, seed, geo.header.geo_step, steps as u64, Some(geo.header.seed), setup.echo()),
        curve,
    })
}

/// Both branches every step, each on its own objective. The appearance
/// branch sees the current geometry prediction, detached.
pub fn train_joint(ds: &Dataset, setup: &Setup, seed: u64) -> Result<TrainOutput> {
    let mut model = fresh_model(ds, setup, seed)?;
    let splits = &ds.manifest.splits;
    let source = setup.train.driving_source;
    let geo_train = geo_pairs(&splits.train_anchors, source);
    let geo_held = geo_pairs(&splits.held_out_anchors, source);
    let app_train = app_pairs(&splits.train_anchors, &splits.train_identities, source);
    let app_held = app_pairs(&splits.held_out_anchors, &splits.held_out_identities, source);
    if geo_train.is_empty() || app_train.is_empty() {
        return Err(Error::Contract("dataset has no training records".into()));
    }
    let cache = GeoCache::new(ds)?;
    let cam = setup.render.camera()?;
    let mut w = AppearanceModWeights::init(&setup.app, setup.token_dim, sub_seed(seed, SEED_APP, 0))?;
    let mut geo_opt = OptimizerState::new(setup.train.adam.clone(), &model.geo.params);
    let mut table_opt = OptimizerState::new(setup.train.adam.clone(), &table_store(&model.table));
    let mut app_opt = OptimizerState::new(setup.train.adam.clone(), &w.params);
    let mut geo_sampler = Sampler::new(geo_train, sub_seed(seed, SEED_GEO_ORDER, 0));
    let mut app_sampler = Sampler::new(app_train, sub_seed(seed, SEED_APP_ORDER, 0));
    let mut frame_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, SEED_APP_ORDER, 1));
    let frames_total = ds.manifest.counts.frames;
    let mut curve = LossCurve::default();
    let (mut geo_sum, mut app_sum, mut n) = (0.0, 0.0, 0);
    for step in 0..setup.train.steps {
        let batch: Vec<GeoPair> = (0..setup.train.accumulate).map(|_| geo_sampler.next()).collect();
        geo_sum += geo_step(&mut model, ds, &cache, &batch, setup, &mut geo_opt, &mut table_opt)?;
        let mut batches = Vec::with_capacity(setup.train.accumulate);
        for _ in 0..setup.train.accumulate {
            let pair = app_sampler.next();
            let mut frames = sample(&mut frame_rng, frames_total, setup.train.app_frames.min(frames_total)).into_vec();
            frames.sort_unstable();
            let pred = model.modulate(cache.sequence(pair.geo.anchor, pair.geo.src), &encode_label(pair.geo.tgt))?;
            batches.push((pair, prepare_app_batch(ds, &cache, &pair, &pred, &frames, &cam)?));
        }
        app_sum += app_step(&mut w, &model.table, &batches, AppVariant::default(), &mut app_opt)?;
        n += 1;
        if (step + 1) % setup.train.steps_per_epoch == 0 || step + 1 == setup.train.steps {
            curve.push(step + 1, "train", "geo_loss", geo_sum / n as f64);
            curve.push(step + 1, "train", "app_loss", app_sum / n as f64);
            curve.push(step + 1, "held_out", "geo_loss", evaluate_geo(&model, ds, &cache, &geo_held, &setup.train.loss)?.loss);
            let all: Vec<GeoPair> = app_held.iter().map(|p| p.geo).collect();
            let preds = PredCache::new(&model, &cache, &all, false)?;
            let held = evaluate_app(&model, &w, ds, &cache, &preds, &app_held, setup, AppVariant::default())?;
            curve.push(step + 1, "held_out", "app_loss", held);
            geo_sum = 0.0;
            app_sum = 0.0;
            n = 0;
        }
    }
    model.app = Some(w);
    let steps = setup.train.steps as u64;
    Ok(TrainOutput {
        checkpoint: Checkpoint::new(model, seed, steps, steps, Some(seed), setup.echo()),
        curve,
    })
}

/// Staged or joint training, as configured.
pub fn train(ds: &Dataset, setup: &Setup, seed: u64) -> Result<TrainOutput> {
    match setup.train.mode {
        TrainMode::Joint => train_joint(ds, setup, seed),
        TrainMode::Staged => {
            let geo = train_geo(ds, setup, seed)?;
            let mut app = train_app(ds, &geo.checkpoint, setup, seed)?;
            let mut curve = geo.curve;
            curve.extend(&app.curve);
            app.curve = curve;
            Ok(app)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub geo_loss: f64,
    pub app_loss: f64,
    pub aed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    /// AED of the unmodulated driving parameters.
    pub baseline_aed: f64,
    pub full: VariantMetrics,
    pub wo_geom: VariantMetrics,
    pub wo_app: VariantMetrics,
}

/// Held-out metrics of the full model, the model without geometry
/// modulation (identity `g`) and the model without emotion tokens in the
/// appearance path. Each appearance variant is trained separately.
pub fn run_ablation(ds: &Dataset, setup: &Setup, seed: u64) -> Result<AblationReport> {
    let geo = train_geo(ds, setup, seed)?.checkpoint;
    Ok(ablation_from_geo(ds, setup, seed, &geo)?.report)
}

/// Ablation outcome plus the trained full-model checkpoint.
pub struct Ablation {
    pub report: AblationReport,
    pub full: Checkpoint,
}

/// [`run_ablation`] starting from an already trained geometry checkpoint.
pub fn ablation_from_geo(ds: &Dataset, setup: &Setup, seed: u64, geo: &Checkpoint) -> Result<Ablation> {
    let mut identity = geo.clone();
    identity.model.geo = GeoModulatorWeights::init(&setup.geo, ds.template.param_dims(), setup.token_dim, 0)?;
    let variants = [
        (geo, AppVariant::default()),
        (&identity, AppVariant::default()),
        (geo, AppVariant { zero_tokens: true, identity_geometry: false }),
    ];
    let trained: Vec<Result<Checkpoint>> = std::thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|(ck, v)| s.spawn(move || train_app_variant(ds, ck, setup, seed, *v).map(|o| o.checkpoint)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    let trained = trained.into_iter().collect::<Result<Vec<_>>>()?;

    let splits = &ds.manifest.splits;
    let source = setup.train.driving_source;
    let geo_held = geo_pairs(&splits.held_out_anchors, source);
    let app_held = app_pairs(&splits.held_out_anchors, &splits.held_out_identities, source);
    let cache = GeoCache::new(ds)?;
    let metrics_for = |ck: &Checkpoint, variant: AppVariant| -> Result<(VariantMetrics, f64)> {
        let g = evaluate_geo(&ck.model, ds, &cache, &geo_held, &setup.train.loss)?;
        let aed = metrics::aed(&expression_part(&g.pred), &expression_part(&g.target))?;
        let baseline = metrics::aed(&expression_part(&g.driving), &expression_part(&g.target))?;
        let all: Vec<GeoPair> = app_held.iter().map(|p| p.geo).collect();
        let preds = PredCache::new(&ck.model, &cache, &all, false)?;
        let w = ck.model.app_weights()?;
        let app_loss = evaluate_app(&ck.model, &w, ds, &cache, &preds, &app_held, setup, variant)?;
        Ok((VariantMetrics { geo_loss: g.loss, app_loss, aed }, baseline))
    };
    let (full, baseline_aed) = metrics_for(&trained[0], AppVariant::default())?;
    let (wo_geom, _) = metrics_for(&trained[1], AppVariant::default())?;
    let (wo_app, _) = metrics_for(&trained[2], AppVariant { zero_tokens: true, identity_geometry: false })?;
    let report = AblationReport {
        seed,
        baseline_aed,
        full,
        wo_geom,
        wo_app,
    };
    let full = trained.into_iter().next().expect("three variants");
    Ok(Ablation { report, full })
}
