//! Synthetic emotion-synchronized multi-identity corpus.
//!
//! Every anchor owns one speech track shared bitwise by all seven emotion
//! variants; an emotion acts through a closed-form affine map on the
//! expression coefficients plus a jaw bias, so the ideal modulator output is
//! known exactly. Identities differ in base skin tone and in how strongly
//! each region's color responds to an emotion.
//!
//! Only primitives (template, maps, tracks, identities) are stored, each
//! rounded to `f32` at generation time; every derived sequence is recomputed
//! in `f64` from them, which keeps on-disk and in-memory corpora identical.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container;
use crate::emotion::EmotionLabel;
use crate::error::{Error, Result};
use crate::head::{make_default_template, synthesize_sequence, AvatarState, HeadTemplate, Region, JAW_DIMS};
use crate::params::ParamStore;
use crate::rotation;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "data.f32";
const FORMAT: &str = "emomod-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgeConfig {
    pub anchors: usize,
    pub frames: usize,
    pub identities: usize,
    pub held_out_identities: usize,
    pub held_out_anchors: usize,
    pub vertices: usize,
    pub expr_dims: usize,
    pub appearance_dims: usize,
    /// Gain of the expression-magnitude term in the color response.
    pub kappa: f64,
    /// Jaw speech tracks are speech-like tracks scaled by this factor.
    pub jaw_scale: f64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            anchors: 4,
            frames: 64,
            identities: 32,
            held_out_identities: 8,
            held_out_anchors: 1,
            vertices: 512,
            expr_dims: 16,
            appearance_dims: 4,
            kappa: 0.5,
            jaw_scale: 0.2,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 8 {
            return Err(Error::Config(format!("frames must be >= 8, got {}", self.frames)));
        }
        if self.held_out_anchors == 0 || self.held_out_anchors >= self.anchors {
            return Err(Error::Config("need at least one training and one held-out anchor".into()));
        }
        if self.held_out_identities == 0 || self.held_out_identities >= self.identities {
            return Err(Error::Config("need at least one training and one held-out identity".into()));
        }
        if self.appearance_dims == 0 {
            return Err(Error::Config("appearance_dims must be positive".into()));
        }
        if !(self.kappa >= 0.0 && self.jaw_scale >= 0.0 && self.jaw_scale <= 1.0) {
            return Err(Error::Config("kappa must be >= 0 and jaw_scale in [0, 1]".into()));
        }
        Ok(())
    }
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-purpose seeds derived from the corpus seed.
pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(stream)) ^ index)
}

const STREAM_TEMPLATE: u64 = 1;
const STREAM_MAPS: u64 = 2;
const STREAM_SPEECH: u64 = 3;
const STREAM_JAW: u64 = 4;
const STREAM_IDENTITY: u64 = 5;
const STREAM_RESPONSE: u64 = 6;

/// Closed-form effect of one emotion on driving parameters and colors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionMap {
    pub label: EmotionLabel,
    /// `E × E`, near identity.
    pub a: Tensor,
    pub b: Vec<f64>,
    pub jaw_bias: [f64; 3],
    /// Appearance code driving identity color responses.
    pub u: Vec<f64>,
}

impl EmotionMap {
    pub fn neutral(e: usize, appearance_dims: usize) -> Self {
        Self {
            label: EmotionLabel::Neutral,
            a: Tensor::identity(e),
            b: vec![0.0; e],
            jaw_bias: [0.0; 3],
            u: vec![0.0; appearance_dims],
        }
    }

    /// `A = I + 0.2 Q` with `‖Q‖_F = 1`, `b ∈ [-0.4, 0.4]^E`, jaw bias in
    /// `[-0.1, 0.1]^3`, appearance code in `[-1, 1]^Da`.
    pub fn sample(label: EmotionLabel, seed: u64, e: usize, appearance_dims: usize) -> Self {
        if label == EmotionLabel::Neutral {
            return Self::neutral(e, appearance_dims);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..e * e).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut a = Tensor::identity(e);
        for (dst, qv) in a.data_mut().iter_mut().zip(&q) {
            *dst = f32_round(*dst + 0.2 * qv / qn);
        }
        let b = (0..e).map(|_| f32_round(rng.random_range(-0.4..=0.4))).collect();
        let jaw_bias = [(); 3].map(|_| f32_round(rng.random_range(-0.1..=0.1)));
        let u = (0..appearance_dims).map(|_| f32_round(rng.random_range(-1.0..=1.0))).collect();
        Self {
            label,
            a,
            b,
            jaw_bias,
            u,
        }
    }

    pub fn expr_dims(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.b.len();
        if self.a.shape() != [e, e] {
            return Err(Error::shape("emotion_map", self.a.shape(), &[e, e]));
        }
        let dev = self.a.sub(&Tensor::identity(e))?.norm();
        if dev > 0.3 + 1e-6 {
            return Err(Error::Domain(format!("{}: ‖A - I‖_F = {dev} exceeds 0.3", self.label)));
        }
        if self.label == EmotionLabel::Neutral
            && (dev != 0.0
                || self.b.iter().any(|&v| v != 0.0)
                || self.jaw_bias != [0.0; 3]
                || self.u.iter().any(|&v| v != 0.0))
        {
            return Err(Error::Domain("neutral emotion map must be the identity".into()));
        }
        Ok(())
    }

    fn a_matrix(&self) -> DMatrix<f64> {
        let e = self.b.len();
        DMatrix::from_row_slice(e, e, self.a.data())
    }
}

/// Per-dimension sum of three sinusoids with periods in `[8, F]` frames and
/// amplitudes in `[0.1, 0.5]`.
///
/// Fast components get smaller amplitudes (the ceiling rises from 0.1 at an
/// 8-frame period to 0.5 at 24 frames), which bounds every frame-to-frame
/// step below 0.4 regardless of seed.
pub fn gen_speech_track(seed: u64, frames: usize, dims: usize) -> Result<Tensor> {
    if frames < 8 {
        return Err(Error::Domain(format!("speech track needs >= 8 frames, got {frames}")));
    }
    if dims == 0 {
        return Err(Error::Domain("speech track needs at least one dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waves = Vec::with_capacity(dims * 3);
    for _ in 0..dims * 3 {
        let period: f64 = rng.random_range(8.0..=frames as f64);
        let ceiling = 0.1 + 0.4 * ((period - 8.0) / 16.0).min(1.0);
        let amp: f64 = 0.1 + rng.random::<f64>() * (ceiling - 0.1);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        waves.push((std::f64::consts::TAU / period, amp, phase));
    }
    let mut data = Vec::with_capacity(frames * dims);
    for t in 0..frames {
        for d in 0..dims {
            data.push(
                waves[3 * d..3 * d + 3]
                    .iter()
                    .map(|(w, a, p)| a * (w * t as f64 + p).sin())
                    .sum(),
            );
        }
    }
    Ok(Tensor::matrix(frames, dims, data))
}

/// Per frame: `exp' = A·exp + b`, `jaw' = jaw + jaw_bias`, concatenated.
pub fn apply_emotion(speech: &Tensor, jaw: &Tensor, map: &EmotionMap) -> Result<Tensor> {
    let e = map.expr_dims();
    if !speech.is_matrix() || speech.cols() != e {
        return Err(Error::shape("apply_emotion", speech.shape(), &[speech.rows(), e]));
    }
    if jaw.shape() != [speech.rows(), JAW_DIMS] {
        return Err(Error::shape("apply_emotion", jaw.shape(), &[speech.rows(), JAW_DIMS]));
    }
    let mixed = speech.matmul(&map.a.transpose()?)?;
    let mut out = Vec::with_capacity(speech.rows() * (e + JAW_DIMS));
    for t in 0..speech.rows() {
        out.extend(mixed.row(t).iter().zip(&map.b).map(|(x, b)| x + b));
        out.extend(jaw.row(t).iter().zip(&map.jaw_bias).map(|(j, b)| j + b));
    }
    Ok(Tensor::matrix(speech.rows(), e + JAW_DIMS, out))
}

/// Inverts [`apply_emotion`] on the expression part: `A⁻¹(exp' − b)`.
pub fn recover_speech(seq: &Tensor, map: &EmotionMap) -> Result<Tensor> {
    let e = map.expr_dims();
    if !seq.is_matrix() || seq.cols() < e {
        return Err(Error::shape("recover_speech", seq.shape(), &[seq.rows(), e + JAW_DIMS]));
    }
    let f = seq.rows();
    let mut rhs = DMatrix::zeros(e, f);
    for t in 0..f {
        for (k, (x, b)) in seq.row(t)[..e].iter().zip(&map.b).enumerate() {
            rhs[(k, t)] = x - b;
        }
    }
    let sol = map
        .a_matrix()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Domain(format!("{} emotion matrix is singular", map.label)))?;
    Ok(Tensor::matrix(f, e, (0..f).flat_map(|t| (0..e).map(move |k| (t, k))).map(|(t, k)| sol[(k, t)]).collect()))
}

/// `p* = A_tgt·A_src⁻¹(exp_drv − b_src) + b_tgt`, jaw shifted by the bias difference.
pub fn oracle_target(driving: &Tensor, src: &EmotionMap, tgt: &EmotionMap) -> Result<Tensor> {
    let e = src.expr_dims();
    let speech = recover_speech(driving, src)?;
    let jaw = Tensor::matrix(
        driving.rows(),
        JAW_DIMS,
        (0..driving.rows())
            .flat_map(|t| {
                let j = &driving.row(t)[e..];
                (0..JAW_DIMS).map(move |k| j[k] - src.jaw_bias[k]).collect::<Vec<_>>()
            })
            .collect(),
    );
    apply_emotion(&speech, &jaw, tgt)
}

/// Corpus-wide generators of identity color responses.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseModel {
    /// `3K × Da`: response shared by all identities.
    pub base: Tensor,
    /// `3K × Da`: response scaled by each identity's regional tone.
    pub tone: Tensor,
}

impl ResponseModel {
    pub fn sample(seed: u64, appearance_dims: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * Region::COUNT * appearance_dims;
        let mut draw = || {
            Tensor::matrix(
                3 * Region::COUNT,
                appearance_dims,
                (0..n).map(|_| f32_round(rng.random_range(-0.03..=0.03))).collect(),
            )
        };
        let base = draw();
        let tone = draw();
        Self { base, tone }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: usize,
    pub seed: u64,
    /// `V × 3`, constant within each region, in `[0.2, 0.9]`.
    pub base_colors: Tensor,
    /// `3K × Da`: rows `3r..3r+3` map an appearance code to region `r`'s RGB delta.
    pub response: Tensor,
}

fn luma(c: &[f64]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Region-wise skin tones plus a color response that depends on them, so the
/// response is observable from the identity's neutral appearance.
pub fn gen_identity(seed: u64, id: usize, template: &HeadTemplate, model: &ResponseModel) -> Result<IdentitySpec> {
    let da = model.base.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tone: f64 = rng.random_range(0.3..=0.8);
    let region_colors: Vec<[f64; 3]> = (0..Region::COUNT)
        .map(|_| {
            let tint = [1.0, 0.82, 0.7];
            tint.map(|t| f32_round((tone * t + rng.random_range(-0.1..=0.1)).clamp(0.2, 0.9)))
        })
        .collect();
    let base_colors = Tensor::matrix(
        template.vertex_count(),
        3,
        template
            .region_labels
            .iter()
            .flat_map(|r| region_colors[r.index()])
            .collect(),
    );
    let mut response = Vec::with_capacity(3 * Region::COUNT * da);
    for (r, c) in region_colors.iter().enumerate() {
        let g = ((luma(c) - 0.55) / 0.15).clamp(-2.0, 2.0);
        for ch in 0..3 {
            let row = 3 * r + ch;
            response.extend(
                model
                    .base
                    .row(row)
                    .iter()
                    .zip(model.tone.row(row))
                    .map(|(b, t)| f32_round(b + g * t)),
            );
        }
    }
    Ok(IdentitySpec {
        id,
        seed,
        base_colors,
        response: Tensor::matrix(3 * Region::COUNT, da, response),
    })
}

impl IdentitySpec {
    pub fn reference(&self, template: &HeadTemplate) -> Result<AvatarState> {
        AvatarState::new(template.mean_vertices.clone(), self.base_colors.clone())
    }

    /// RGB delta of region `r` for appearance code `u`, before expression gain.
    pub fn region_delta(&self, r: usize, u: &[f64]) -> [f64; 3] {
        [0, 1, 2].map(|ch| self.response.row(3 * r + ch).iter().zip(u).map(|(w, x)| w * x).sum())
    }
}

/// `c*(t) = clamp(base + W_id·u·(1 + κ‖exp_t‖/√E))`, stacked frame-major as `F·V × 3`.
pub fn target_colors(
    identity: &IdentitySpec,
    template: &HeadTemplate,
    map: &EmotionMap,
    params: &Tensor,
    kappa: f64,
) -> Result<Tensor> {
    let e = template.expr_dims();
    let v = template.vertex_count();
    let deltas: Vec<[f64; 3]> = (0..Region::COUNT).map(|r| identity.region_delta(r, &map.u)).collect();
    let mut out = Vec::with_capacity(params.rows() * v * 3);
    for t in 0..params.rows() {
        let exp = &params.row(t)[..e];
        let gain = 1.0 + kappa * exp.iter().map(|x| x * x).sum::<f64>().sqrt() / (e as f64).sqrt();
        for i in 0..v {
            let d = deltas[template.region_labels[i].index()];
            let base = identity.base_colors.row(i);
            out.extend((0..3).map(|ch| (base[ch] + d[ch] * gain).clamp(0.0, 1.0)));
        }
    }
    Ok(Tensor::matrix(params.rows() * v, 3, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub id: usize,
    /// `F × E`, shared by every emotion variant.
    pub speech: Tensor,
    /// `F × 3`.
    pub jaw: Tensor,
}

/// One supervised example: an anchor driven under `src`, targeted at `tgt`,
/// rendered for one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub anchor: usize,
    pub identity: usize,
    pub src: EmotionLabel,
    pub tgt: EmotionLabel,
    /// `F × (E+3)`.
    pub driving: Tensor,
    /// `F × (E+3)`.
    pub target: Tensor,
    /// `F × 3V`.
    pub target_vertices: Tensor,
    /// `F·V × 3`.
    pub target_colors: Tensor,
}

pub fn synthesize_sample(
    anchor: &Anchor,
    identity: &IdentitySpec,
    src: &EmotionMap,
    tgt: &EmotionMap,
    template: &HeadTemplate,
    kappa: f64,
) -> Result<Record> {
    let driving = apply_emotion(&anchor.speech, &anchor.jaw, src)?;
    let target = apply_emotion(&anchor.speech, &anchor.jaw, tgt)?;
    let target_vertices = synthesize_sequence(template, &target)?;
    let target_colors = target_colors(identity, template, tgt, &target, kappa)?;
    Ok(Record {
        anchor: anchor.id,
        identity: identity.id,
        src: src.label,
        tgt: tgt.label,
        driving,
        target,
        target_vertices,
        target_colors,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub anchors: usize,
    pub identities: usize,
    pub emotions: usize,
    pub frames: usize,
    pub vertices: usize,
    pub expr_dims: usize,
    pub appearance_dims: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train_identities: Vec<usize>,
    pub held_out_identities: Vec<usize>,
    pub train_anchors: Vec<usize>,
    pub held_out_anchors: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub corpus: u64,
    pub template: u64,
    pub identities: Vec<u64>,
    pub anchors: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub counts: Counts,
    pub kappa: f64,
    pub jaw_scale: f64,
    pub emotions: Vec<EmotionLabel>,
    pub splits: Splits,
    pub seeds: Seeds,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Manifest(format!("unexpected format {:?}", self.format)));
        }
        if self.emotions != EmotionLabel::ALL {
            return Err(Error::Manifest("emotion list must be the seven labels in canonical order".into()));
        }
        let c = &self.counts;
        if c.emotions != EmotionLabel::ALL.len() {
            return Err(Error::Manifest(format!("expected 7 emotions, manifest says {}", c.emotions)));
        }
        check_partition("identity", &self.splits.train_identities, &self.splits.held_out_identities, c.identities)?;
        check_partition("anchor", &self.splits.train_anchors, &self.splits.held_out_anchors, c.anchors)?;
        if self.seeds.identities.len() != c.identities || self.seeds.anchors.len() != c.anchors {
            return Err(Error::Manifest("seed lists do not match counts".into()));
        }
        Ok(())
    }
}

fn check_partition(what: &str, train: &[usize], held: &[usize], n: usize) -> Result<()> {
    if let Some(id) = train.iter().find(|id| held.contains(id)) {
        return Err(Error::Manifest(format!("{what} {id} is both train and held-out")));
    }
    let mut all: Vec<usize> = train.iter().chain(held).copied().collect();
    all.sort_unstable();
    if all != (0..n).collect::<Vec<_>>() {
        return Err(Error::Manifest(format!("{what} splits must cover ids 0..{n} exactly once")));
    }
    if train.is_empty() || held.is_empty() {
        return Err(Error::Manifest(format!("{what} splits must both be non-empty")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncReport {
    pub max_error: f64,
    pub pass: bool,
}

pub const SYNC_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub template: HeadTemplate,
    /// Indexed by [`EmotionLabel::ordinal`].
    pub maps: Vec<EmotionMap>,
    pub response: ResponseModel,
    pub anchors: Vec<Anchor>,
    pub identities: Vec<IdentitySpec>,
}

impl Dataset {
    pub fn forge(config: &ForgeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (e, da, f) = (config.expr_dims, config.appearance_dims, config.frames);
        let template_seed = sub_seed(seed, STREAM_TEMPLATE, 0);
        let template = make_default_template(template_seed, config.vertices, e)?;
        let maps = EmotionLabel::ALL
            .iter()
            .map(|&l| EmotionMap::sample(l, sub_seed(seed, STREAM_MAPS, l.ordinal() as u64), e, da))
            .collect();
        let response = ResponseModel::sample(sub_seed(seed, STREAM_RESPONSE, 0), da);
        let anchor_seeds: Vec<u64> = (0..config.anchors).map(|i| sub_seed(seed, STREAM_SPEECH, i as u64)).collect();
        let anchors = anchor_seeds
            .iter()
            .enumerate()
            .map(|(id, &s)| {
                let speech = gen_speech_track(s, f, e)?.map(f32_round);
                let jaw = gen_speech_track(sub_seed(s, STREAM_JAW, 0), f, JAW_DIMS)?
                    .map(|v| f32_round(v * config.jaw_scale));
                Ok(Anchor { id, speech, jaw })
            })
            .collect::<Result<Vec<_>>>()?;
        let identity_seeds: Vec<u64> = (0..config.identities)
            .map(|i| sub_seed(seed, STREAM_IDENTITY, i as u64))
            .collect();
        let identities = identity_seeds
            .iter()
            .enumerate()
            .map(|(id, &s)| gen_identity(s, id, &template, &response))
            .collect::<Result<Vec<_>>>()?;
        let split = |n: usize, held: usize| ((0..n - held).collect::<Vec<_>>(), (n - held..n).collect::<Vec<_>>());
        let (train_identities, held_out_identities) = split(config.identities, config.held_out_identities);
        let (train_anchors, held_out_anchors) = split(config.anchors, config.held_out_anchors);
        let manifest = DatasetManifest {
            format: FORMAT.into(),
            counts: Counts {
                anchors: config.anchors,
                identities: config.identities,
                emotions: EmotionLabel::ALL.len(),
                frames: f,
                vertices: config.vertices,
                expr_dims: e,
                appearance_dims: da,
            },
            kappa: config.kappa,
            jaw_scale: config.jaw_scale,
            emotions: EmotionLabel::ALL.to_vec(),
            splits: Splits {
                train_identities,
                held_out_identities,
                train_anchors,
                held_out_anchors,
            },
            seeds: Seeds {
                corpus: seed,
                template: template_seed,
                identities: identity_seeds,
                anchors: anchor_seeds,
            },
        };
        let ds = Dataset {
            manifest,
            template,
            maps,
            response,
            anchors,
            identities,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        self.template.validate()?;
        let c = &self.manifest.counts;
        if self.maps.len() != c.emotions || self.anchors.len() != c.anchors || self.identities.len() != c.identities {
            return Err(Error::Manifest("component counts disagree with the manifest".into()));
        }
        for (m, l) in self.maps.iter().zip(EmotionLabel::ALL) {
            if m.label != l {
                return Err(Error::Manifest("emotion maps out of order".into()));
            }
            m.validate()?;
        }
        Ok(())
    }

    pub fn map(&self, label: EmotionLabel) -> &EmotionMap {
        &self.maps[label.ordinal()]
    }

    pub fn anchor(&self, id: usize) -> Result<&Anchor> {
        self.anchors
            .get(id)
            .ok_or_else(|| Error::Range(format!("anchor {id} not in dataset (0..{})", self.anchors.len())))
    }

    pub fn identity(&self, id: usize) -> Result<&IdentitySpec> {
        self.identities
            .get(id)
            .ok_or_else(|| Error::Range(format!("identity {id} not in dataset (0..{})", self.identities.len())))
    }

    /// Driving parameters of `anchor` performed with `emotion`.
    pub fn sequence(&self, anchor: usize, emotion: EmotionLabel) -> Result<Tensor> {
        let a = self.anchor(anchor)?;
        apply_emotion(&a.speech, &a.jaw, self.map(emotion))
    }

    pub fn record(&self, anchor: usize, identity: usize, src: EmotionLabel, tgt: EmotionLabel) -> Result<Record> {
        synthesize_sample(
            self.anchor(anchor)?,
            self.identity(identity)?,
            self.map(src),
            self.map(tgt),
            &self.template,
            self.manifest.kappa,
        )
    }

    /// Logical sequence records: one per (anchor, emotion, identity).
    pub fn record_count(&self) -> usize {
        self.anchors.len() * self.maps.len() * self.identities.len()
    }

    /// Recovers the speech track from every emotion variant of every anchor
    /// and compares all pairs.
    pub fn sync_check(&self) -> Result<SyncReport> {
        let mut max_error: f64 = 0.0;
        for a in &self.anchors {
            let recovered = EmotionLabel::ALL
                .iter()
                .map(|&l| recover_speech(&self.sequence(a.id, l)?, self.map(l)))
                .collect::<Result<Vec<_>>>()?;
            for i in 0..recovered.len() {
                max_error = max_error.max(recovered[i].max_abs_diff(&a.speech));
                for j in i + 1..recovered.len() {
                    max_error = max_error.max(recovered[i].max_abs_diff(&recovered[j]));
                }
            }
        }
        Ok(SyncReport {
            max_error,
            pass: max_error <= SYNC_TOLERANCE,
        })
    }

    fn blobs(&self) -> ParamStore {
        let t = &self.template;
        let v = t.vertex_count();
        let mut p = ParamStore::new();
        p.insert("template.mean_vertices", t.mean_vertices.clone());
        p.insert("template.exp_basis", t.exp_basis.clone());
        p.insert("template.jaw_pivot", Tensor::matrix(1, 3, t.jaw_pivot.to_vec()));
        p.insert("template.jaw_axis_frame", Tensor::matrix(3, 3, t.jaw_axis_frame.concat()));
        p.insert("template.skin_weights", Tensor::matrix(v, 1, t.skin_weights.clone()));
        p.insert(
            "template.region_labels",
            Tensor::matrix(v, 1, t.region_labels.iter().map(|r| r.index() as f64).collect()),
        );
        for m in &self.maps {
            let n = m.label.name();
            p.insert(format!("emotion.{n}.a"), m.a.clone());
            p.insert(format!("emotion.{n}.b"), Tensor::vector(m.b.clone()));
            p.insert(format!("emotion.{n}.jaw_bias"), Tensor::vector(m.jaw_bias.to_vec()));
            p.insert(format!("emotion.{n}.u"), Tensor::vector(m.u.clone()));
        }
        p.insert("response.base", self.response.base.clone());
        p.insert("response.tone", self.response.tone.clone());
        for a in &self.anchors {
            p.insert(format!("anchor.{}.speech", a.id), a.speech.clone());
            p.insert(format!("anchor.{}.jaw", a.id), a.jaw.clone());
        }
        for i in &self.identities {
            p.insert(format!("identity.{}.base_colors", i.id), i.base_colors.clone());
            p.insert(format!("identity.{}.response", i.id), i.response.clone());
        }
        p
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let header = match serde_json::to_value(&self.manifest)? {
            Value::Object(m) => m,
            _ => unreachable!("manifest serializes to an object"),
        };
        container::write(dir, MANIFEST_FILE, BLOB_FILE, header, &self.blobs())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let (header, blobs) = container::read(dir, MANIFEST_FILE)?;
        let manifest: DatasetManifest =
            serde_json::from_value(Value::Object(header)).map_err(|e| Error::Manifest(e.to_string()))?;
        manifest.validate()?;
        let c = manifest.counts.clone();
        let get = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = blobs.get(name).ok_or_else(|| Error::BlobTable(format!("missing blob {name:?}")))?;
            if t.numel() != shape.iter().product::<usize>() {
                return Err(Error::BlobShape {
                    name: name.into(),
                    detail: format!("shape {:?}, manifest implies {shape:?}", t.shape()),
                });
            }
            t.reshape(shape)
        };
        let (v, e, da, f) = (c.vertices, c.expr_dims, c.appearance_dims, c.frames);
        let pivot = get("template.jaw_pivot", &[1, 3])?;
        let frame = get("template.jaw_axis_frame", &[3, 3])?;
        let labels = get("template.region_labels", &[v, 1])?
            .data()
            .iter()
            .map(|&x| {
                Region::from_index(x as usize)
                    .filter(|_| x.fract() == 0.0 && x >= 0.0)
                    .ok_or_else(|| Error::BlobShape {
                        name: "template.region_labels".into(),
                        detail: format!("invalid region index {x}"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut axis_frame = rotation::IDENTITY;
        for (r, row) in axis_frame.iter_mut().enumerate() {
            row.copy_from_slice(frame.row(r));
        }
        let template = HeadTemplate {
            mean_vertices: get("template.mean_vertices", &[v, 3])?,
            exp_basis: get("template.exp_basis", &[e, 3 * v])?,
            jaw_pivot: [pivot.data()[0], pivot.data()[1], pivot.data()[2]],
            jaw_axis_frame: axis_frame,
            skin_weights: get("template.skin_weights", &[v, 1])?.into_data(),
            region_labels: labels,
        };
        let maps = EmotionLabel::ALL
            .iter()
            .map(|&label| {
                let n = label.name();
                let jb = get(&format!("emotion.{n}.jaw_bias"), &[1, 3])?;
                Ok(EmotionMap {
                    label,
                    a: get(&format!("emotion.{n}.a"), &[e, e])?,
                    b: get(&format!("emotion.{n}.b"), &[1, e])?.into_data(),
                    jaw_bias: [jb.data()[0], jb.data()[1], jb.data()[2]],
                    u: get(&format!("emotion.{n}.u"), &[1, da])?.into_data(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let response = ResponseModel {
            base: get("response.base", &[3 * Region::COUNT, da])?,
            tone: get("response.tone", &[3 * Region::COUNT, da])?,
        };
        let anchors = (0..c.anchors)
            .map(|id| {
                Ok(Anchor {
                    id,
                    speech: get(&format!("anchor.{id}.speech"), &[f, e])?,
                    jaw: get(&format!("anchor.{id}.jaw"), &[f, 3])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let identities = (0..c.identities)
            .map(|id| {
                Ok(IdentitySpec {
                    id,
                    seed: manifest.seeds.identities[id],
                    base_colors: get(&format!("identity.{id}.base_colors"), &[v, 3])?,
                    response: get(&format!("identity.{id}.response"), &[3 * Region::COUNT, da])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            manifest,
            template,
            maps,
            response,
            anchors,
            identities,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn hash(dir: &Path) -> Result<String> {
        container::hash(dir, MANIFEST_FILE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ForgeConfig {
        ForgeConfig {
            anchors: 2,
            frames: 16,
            identities: 3,
            held_out_identities: 1,
            held_out_anchors: 1,
            vertices: 96,
            expr_dims: 6,
            appearance_dims: 3,
            ..ForgeConfig::default()
        }
    }

    #[test]
    fn speech_track_bounds_and_determinism() {
        let a = gen_speech_track(7, 64, 16).unwrap();
        assert!(a.bit_eq(&gen_speech_track(7, 64, 16).unwrap()));
        assert!(a.data().iter().all(|v| v.abs() <= 1.5));
        assert!(gen_speech_track(7, 7, 16).is_err());
    }

    #[test]
    fn maps_satisfy_invariants() {
        for l in EmotionLabel::ALL {
            let m = EmotionMap::sample(l, 3, 16, 4);
            m.validate().unwrap();
        }
        let mut bad = EmotionMap::sample(EmotionLabel::Happy, 3, 4, 2);
        bad.label = EmotionLabel::Neutral;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn neutral_map_is_identity_and_inverse_recovers() {
        let s = gen_speech_track(1, 16, 6).unwrap();
        let j = gen_speech_track(2, 16, 3).unwrap().scale(0.2);
        let out = apply_emotion(&s, &j, &EmotionMap::neutral(6, 2)).unwrap();
        for t in 0..16 {
            assert_eq!(&out.row(t)[..6], s.row(t));
            assert_eq!(&out.row(t)[6..], j.row(t));
        }
        let m = EmotionMap::sample(EmotionLabel::Fear, 9, 6, 2);
        let seq = apply_emotion(&s, &j, &m).unwrap();
        assert!(recover_speech(&seq, &m).unwrap().max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn identity_colors_bounded_and_seeded() {
        let t = make_default_template(0, 96, 6).unwrap();
        let model = ResponseModel::sample(1, 3);
        let a = gen_identity(5, 0, &t, &model).unwrap();
        assert_eq!(a, gen_identity(5, 0, &t, &model).unwrap());
        assert!(a.base_colors.data().iter().all(|c| (0.2..=0.9).contains(c)));
        let b = gen_identity(6, 1, &t, &model).unwrap();
        assert_ne!(a.response, b.response);
    }

    #[test]
    fn samples_match_oracle() {
        let ds = Dataset::forge(&small(), 3).unwrap();
        let n = ds.record(0, 0, EmotionLabel::Neutral, EmotionLabel::Neutral).unwrap();
        assert!(n.driving.bit_eq(&n.target));
        let base = ds.identities[0].base_colors.clone();
        for f in 0..16 {
            let block = Tensor::matrix(96, 3, n.target_colors.data()[f * 288..(f + 1) * 288].to_vec());
            assert!(block.bit_eq(&base));
        }
        let same = ds.record(1, 2, EmotionLabel::Sad, EmotionLabel::Sad).unwrap();
        assert!(same.driving.bit_eq(&same.target));
        let r = ds.record(0, 1, EmotionLabel::Happy, EmotionLabel::Angry).unwrap();
        let oracle = oracle_target(&r.driving, ds.map(EmotionLabel::Happy), ds.map(EmotionLabel::Angry)).unwrap();
        assert!(oracle.max_abs_diff(&r.target) < 1e-10);
    }

    #[test]
    fn geometry_is_identity_free() {
        let ds = Dataset::forge(&small(), 3).unwrap();
        let a = ds.record(0, 0, EmotionLabel::Neutral, EmotionLabel::Fear).unwrap();
        let b = ds.record(0, 2, EmotionLabel::Neutral, EmotionLabel::Fear).unwrap();
        assert!(a.target.bit_eq(&b.target));
        assert!(a.target_vertices.bit_eq(&b.target_vertices));
        assert!(!a.target_colors.bit_eq(&b.target_colors));
    }

    #[test]
    fn forged_corpus_is_synchronized() {
        let ds = Dataset::forge(&small(), 11).unwrap();
        let report = ds.sync_check().unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(ds.record_count(), 2 * 7 * 3);
    }

    #[test]
    fn manifest_rejects_overlapping_splits() {
        let mut ds = Dataset::forge(&small(), 1).unwrap();
        ds.manifest.splits.held_out_identities = vec![0];
        assert!(matches!(ds.manifest.validate(), Err(Error::Manifest(_))));
    }
}
