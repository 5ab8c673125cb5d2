//! Held-out and train-split evaluation of a model against the corpus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::emotion::{encode_label, EmotionLabel};
use crate::error::{Error, Result};
use crate::forge::{target_colors, Dataset};
use crate::head::{synthesize_sequence, AvatarState, JAW_DIMS};
use crate::metrics;
use crate::model::Model;
use crate::render::{self, Camera, Raster};
use crate::tensor::Tensor;
use crate::train::{geo_loss, geo_pairs, DrivingSource, GeoLossWeights, GeoPair};

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub camera: Camera,
    /// Evenly spaced frames per record rendered for image metrics.
    pub frames: usize,
    pub loss: GeoLossWeights,
    pub source: DrivingSource,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub aed: f64,
    pub apd: f64,
    pub vertex_rmse: f64,
    pub geo_loss: f64,
    pub app_loss: f64,
    /// Geometry records averaged into this row.
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: BTreeMap<String, Metrics>,
    /// Per split, keyed `src->tgt`.
    pub pairs: BTreeMap<String, BTreeMap<String, Metrics>>,
}

/// Expression columns of a `F × (E+3)` sequence.
pub fn expression_part(seq: &Tensor) -> Tensor {
    let e = seq.cols() - JAW_DIMS;
    Tensor::matrix(seq.rows(), e, (0..seq.rows()).flat_map(|r| seq.row(r)[..e].to_vec()).collect())
}

pub fn jaw_part(seq: &Tensor) -> Tensor {
    let e = seq.cols() - JAW_DIMS;
    Tensor::matrix(seq.rows(), JAW_DIMS, (0..seq.rows()).flat_map(|r| seq.row(r)[e..].to_vec()).collect())
}

pub fn even_frames(total: usize, count: usize) -> Vec<usize> {
    let count = count.min(total);
    (0..count).map(|i| i * total / count).collect()
}

pub fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    Tensor::matrix(rows.len(), t.cols(), rows.iter().flat_map(|&r| t.row(r).to_vec()).collect())
}

/// Frame `k` of stacked `F × 3V` vertices and `F·V × 3` colors.
pub fn frame_state(vertices: &Tensor, colors: &Tensor, k: usize) -> Result<AvatarState> {
    let v = vertices.cols() / 3;
    AvatarState::new(
        Tensor::matrix(v, 3, vertices.row(k).to_vec()),
        Tensor::matrix(v, 3, colors.data()[k * v * 3..(k + 1) * v * 3].to_vec()),
    )
}

/// Predicted and target renders of one (pair, identity) over `frames`.
pub fn render_pair(
    model: &Model,
    ds: &Dataset,
    identity: usize,
    pair: &GeoPair,
    pred: &Tensor,
    frames: &[usize],
    cam: &Camera,
) -> Result<Vec<(Raster, Raster)>> {
    let t = &ds.template;
    let id = ds.identity(identity)?;
    let reference = id.reference(t)?;
    let target = ds.sequence(pair.anchor, pair.tgt)?;
    let pred_sub = select_rows(pred, frames);
    let tgt_sub = select_rows(&target, frames);
    let pred_colors = model.colors(&reference, t, &pred_sub, &encode_label(pair.tgt))?;
    let tgt_colors = target_colors(id, t, ds.map(pair.tgt), &tgt_sub, ds.manifest.kappa)?;
    let pv = synthesize_sequence(t, &pred_sub)?;
    let tv = synthesize_sequence(t, &tgt_sub)?;
    (0..frames.len())
        .map(|k| {
            let p = render::render(&frame_state(&pv, &pred_colors, k)?, cam)?;
            let q = render::render(&frame_state(&tv, &tgt_colors, k)?, cam)?;
            Ok((p, q))
        })
        .collect()
}

#[derive(Default)]
struct Acc {
    sum: Metrics,
    geo: usize,
    img: usize,
}

impl Acc {
    fn add_geo(&mut self, aed: f64, apd: f64, rmse: f64, loss: f64) {
        self.sum.aed += aed;
        self.sum.apd += apd;
        self.sum.vertex_rmse += rmse;
        self.sum.geo_loss += loss;
        self.geo += 1;
    }

    fn add_img(&mut self, psnr: f64, ssim: f64, mse: f64) {
        self.sum.psnr += psnr;
        self.sum.ssim += ssim;
        self.sum.app_loss += mse;
        self.img += 1;
    }

    fn finish(&self) -> Metrics {
        let g = self.geo.max(1) as f64;
        let i = self.img.max(1) as f64;
        Metrics {
            psnr: self.sum.psnr / i,
            ssim: self.sum.ssim / i,
            aed: self.sum.aed / g,
            apd: self.sum.apd / g,
            vertex_rmse: self.sum.vertex_rmse / g,
            geo_loss: self.sum.geo_loss / g,
            app_loss: self.sum.app_loss / i,
            records: self.geo,
        }
    }
}

fn pair_key(p: &GeoPair) -> String {
    format!("{}->{}", p.src, p.tgt)
}

/// Every metric, per split and per emotion pair. Geometry metrics average
/// over (anchor, pair) records; image metrics additionally over the split's
/// identities and `opts.frames` evenly spaced frames.
pub fn evaluate(model: &Model, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.frames == 0 {
        return Err(Error::Config("evaluation needs at least one frame".into()));
    }
    let s = &ds.manifest.splits;
    let frames = even_frames(ds.manifest.counts.frames, opts.frames);
    let mut splits = BTreeMap::new();
    let mut pairs = BTreeMap::new();
    for (name, anchors, identities) in [
        ("train", &s.train_anchors, &s.train_identities),
        ("held_out", &s.held_out_anchors, &s.held_out_identities),
    ] {
        let mut total = Acc::default();
        let mut by_pair: BTreeMap<String, Acc> = BTreeMap::new();
        for pair in geo_pairs(anchors, opts.source) {
            let driving = ds.sequence(pair.anchor, pair.src)?;
            let target = ds.sequence(pair.anchor, pair.tgt)?;
            let pred = model.modulate(&driving, &encode_label(pair.tgt))?;
            let aed = metrics::aed(&expression_part(&pred), &expression_part(&target))?;
            let apd = metrics::apd(&jaw_part(&pred), &jaw_part(&target))?;
            let v = ds.template.vertex_count();
            let pv = synthesize_sequence(&ds.template, &pred)?.reshape(&[pred.rows() * v, 3])?;
            let tv = synthesize_sequence(&ds.template, &target)?.reshape(&[target.rows() * v, 3])?;
            let rmse = metrics::vertex_rmse(&pv, &tv)?;
            let loss = geo_loss(&pred, &target, &ds.template, &opts.loss)?;
            let acc = by_pair.entry(pair_key(&pair)).or_default();
            acc.add_geo(aed, apd, rmse, loss);
            total.add_geo(aed, apd, rmse, loss);
            for &id in identities.iter() {
                for (p, q) in render_pair(model, ds, id, &pair, &pred, &frames, &opts.camera)? {
                    let (ps, ss, ms) = (metrics::psnr(&p, &q)?, metrics::ssim(&p, &q)?, metrics::mse(&p, &q)?);
                    acc.add_img(ps, ss, ms);
                    total.add_img(ps, ss, ms);
                }
            }
        }
        splits.insert(name.to_string(), total.finish());
        pairs.insert(name.to_string(), by_pair.iter().map(|(k, a)| (k.clone(), a.finish())).collect());
    }
    Ok(EvalReport { splits, pairs })
}

/// Per-dimension Pearson correlation between the speech component
/// recovered from `pred` (under the target emotion's map) and the anchor's
/// generator track. Returns the minimum over dimensions.
pub fn speech_recovery_min_pearson(ds: &Dataset, anchor: usize, tgt: EmotionLabel, pred: &Tensor) -> Result<f64> {
    let recovered = crate::forge::recover_speech(pred, ds.map(tgt))?;
    let truth = &ds.anchor(anchor)?.speech;
    let mut worst = f64::INFINITY;
    for d in 0..truth.cols() {
        let x: Vec<f64> = (0..truth.rows()).map(|r| recovered.at(r, d)).collect();
        let y: Vec<f64> = (0..truth.rows()).map(|r| truth.at(r, d)).collect();
        worst = worst.min(pearson(&x, &y));
    }
    Ok(worst)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_of_affine_copy_is_one() {
        let x = [0.1, 0.5, -0.3, 0.9];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        assert!((pearson(&x, &y) - 1.0).abs() < 1e-12);
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &z) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn even_frames_spacing() {
        assert_eq!(even_frames(64, 4), vec![0, 16, 32, 48]);
        assert_eq!(even_frames(3, 8), vec![0, 1, 2]);
    }
}
