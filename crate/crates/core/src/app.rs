//! Appearance path: region tokens from the identity reference, emotion
//! appearance tokens `a_e = φ(T)`, their concatenation `ã = [a ‖ a_e]`, and a
//! cross-attention decoder from per-vertex queries to RGB residuals.
//!
//! Final colors are the reference's region color (skip path) plus the
//! decoded residual, clamped to `[0, 1]`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention;
use crate::emotion::{EmotionToken, EMOTION_DIMS};
use crate::error::{Error, Result};
use crate::head::{AvatarState, HeadTemplate, Region};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Width of a per-vertex decoder query: rest position, region one-hot,
/// global and local expression magnitude.
pub const QUERY_FEATURES: usize = 3 + Region::COUNT + 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppModulatorConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
}

impl Default for AppModulatorConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 16,
            heads: 2,
            ff_hidden: 32,
        }
    }
}

impl AppModulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.ff_hidden == 0 {
            return Err(Error::Config("appearance modulator extents must be positive".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// Identity appearance: one token per face region plus the region colors
/// used by the skip path.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceFeatures {
    /// `K × D` region tokens.
    pub tokens: Tensor,
    /// `K × 3` mean reference color per region.
    pub region_colors: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceModWeights {
    pub config: AppModulatorConfig,
    pub token_dim: usize,
    pub params: ParamStore,
}

impl AppearanceModWeights {
    pub fn init(config: &AppModulatorConfig, token_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dt = token_dim;
        let d = config.d_model;
        let ff = config.ff_hidden;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = ParamStore::new();
        p.init_normal(&mut rng, "enc_color", 3, dt, 1.0);
        p.init_normal(&mut rng, "enc_pos", 3, dt, 1.0);
        p.insert("enc_bias", Tensor::zeros(&[1, dt]));
        p.init_normal(&mut rng, "phi", dt, dt, inv(dt));
        p.init_normal(&mut rng, "query_in", QUERY_FEATURES, d, inv(QUERY_FEATURES));
        for l in 0..config.layers {
            p.insert(format!("l{l}.ln_gamma"), Tensor::full(&[1, d], 1.0));
            p.insert(format!("l{l}.ln_beta"), Tensor::zeros(&[1, d]));
            p.init_normal(&mut rng, &format!("l{l}.wq"), d, d, inv(d));
            p.init_normal(&mut rng, &format!("l{l}.wk"), dt, d, inv(dt));
            p.init_normal(&mut rng, &format!("l{l}.wv"), dt, d, inv(dt));
            p.init_normal(&mut rng, &format!("l{l}.wo"), d, d, inv(d));
            p.init_normal(&mut rng, &format!("l{l}.ff_gate"), d, ff, inv(d));
            p.init_normal(&mut rng, &format!("l{l}.ff_state"), d, ff, inv(d));
            p.init_normal(&mut rng, &format!("l{l}.ff_out"), ff, d, inv(ff));
        }
        p.insert("head", Tensor::zeros(&[d, 3]));
        Ok(Self {
            config: config.clone(),
            token_dim,
            params: p,
        })
    }

    pub fn from_params(config: AppModulatorConfig, token_dim: usize, params: ParamStore) -> Result<Self> {
        let reference = Self::init(&config, token_dim, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.expect(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "appearance parameter {name} has shape {:?}, config implies {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Incompatible("unexpected appearance parameters".into()));
        }
        Ok(Self {
            config,
            token_dim,
            params,
        })
    }

    /// Region tokens `a` from `K × 3` region colors and positions.
    pub fn encode_regions(&self, tape: &mut Tape, bound: &Bound, colors: Var, positions: Var) -> Result<Var> {
        let c = tape.matmul(colors, bound.get("enc_color"))?;
        let p = tape.matmul(positions, bound.get("enc_pos"))?;
        let s = tape.add(c, p)?;
        tape.add_row(s, bound.get("enc_bias"))
    }

    /// `a_e = φ(T)`: the shared linear map applied to each token column.
    pub fn emotion_tokens(&self, tape: &mut Tape, bound: &Bound, token: Var) -> Result<Var> {
        if tape.value(token).shape() != [self.token_dim, EMOTION_DIMS] {
            return Err(Error::shape(
                "emotion_appearance_tokens",
                &[self.token_dim, EMOTION_DIMS],
                tape.value(token).shape(),
            ));
        }
        let cols = tape.transpose(token)?;
        tape.matmul(cols, bound.get("phi"))
    }

    /// Decodes `M` vertex queries against `ã`, returning `M × 3` colors.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        combined: Var,
        queries: Var,
        base: Var,
    ) -> Result<Var> {
        if tape.value(queries).cols() != QUERY_FEATURES {
            return Err(Error::Dim {
                what: "decoder query width",
                expected: QUERY_FEATURES,
                actual: tape.value(queries).cols(),
            });
        }
        let mut h = tape.matmul(queries, bound.get("query_in"))?;
        for l in 0..self.config.layers {
            let name = |s: &str| format!("l{l}.{s}");
            let z = tape.layer_norm_rows(h, LN_EPS)?;
            let z = tape.mul_row(z, bound.get(&name("ln_gamma")))?;
            let z = tape.add_row(z, bound.get(&name("ln_beta")))?;
            let q = tape.matmul(z, bound.get(&name("wq")))?;
            let k = tape.matmul(combined, bound.get(&name("wk")))?;
            let v = tape.matmul(combined, bound.get(&name("wv")))?;
            let att = attention::multi_head(tape, q, k, v, self.config.heads)?;
            let msg = tape.matmul(att, bound.get(&name("wo")))?;
            h = tape.add(h, msg)?;
            // Gated so identity and emotion features can multiply.
            let gate = tape.matmul(h, bound.get(&name("ff_gate")))?;
            let gate = tape.tanh(gate)?;
            let state = tape.matmul(h, bound.get(&name("ff_state")))?;
            let f = tape.mul(gate, state)?;
            let f = tape.matmul(f, bound.get(&name("ff_out")))?;
            h = tape.add(h, f)?;
        }
        let residual = tape.matmul(h, bound.get("head"))?;
        let colors = tape.add(base, residual)?;
        tape.clamp(colors, 0.0, 1.0)
    }
}

/// Per-region mean color and rest position of a reference state.
pub fn region_summary(reference: &AvatarState, template: &HeadTemplate) -> Result<(Tensor, Tensor)> {
    if reference.vertex_count() != template.vertex_count() {
        return Err(Error::Dim {
            what: "reference vertex count",
            expected: template.vertex_count(),
            actual: reference.vertex_count(),
        });
    }
    let avg = template.region_average();
    Ok((avg.matmul(&reference.colors)?, avg.matmul(&template.mean_vertices)?))
}

pub fn extract_features(
    reference: &AvatarState,
    template: &HeadTemplate,
    w: &AppearanceModWeights,
) -> Result<AppearanceFeatures> {
    let (colors, positions) = region_summary(reference, template)?;
    let mut tape = Tape::new();
    let bound = w.params.bind(&mut tape, false);
    let c = tape.constant(colors.clone());
    let p = tape.constant(positions);
    let a = w.encode_regions(&mut tape, &bound, c, p)?;
    Ok(AppearanceFeatures {
        tokens: tape.value(a).clone(),
        region_colors: colors,
    })
}

pub fn emotion_appearance_tokens(token: &EmotionToken, w: &AppearanceModWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = w.params.bind(&mut tape, false);
    let t = tape.constant(token.0.clone());
    let ae = w.emotion_tokens(&mut tape, &bound, t)?;
    Ok(tape.value(ae).clone())
}

/// Row-stacks `a` over `a_e`; the leading `K` rows are `a` unchanged.
pub fn concat_features(a: &Tensor, ae: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !ae.is_matrix() || a.cols() != ae.cols() {
        return Err(Error::shape("concat_features", a.shape(), ae.shape()));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(ae.data());
    Ok(Tensor::matrix(a.rows() + ae.rows(), a.cols(), data))
}

/// Per-vertex decoder queries for every frame of a `F × (E+3)` sequence,
/// stacked frame-major into `F·V × QUERY_FEATURES`.
pub fn query_features(template: &HeadTemplate, params: &Tensor) -> Result<Tensor> {
    let e = template.expr_dims();
    let v = template.vertex_count();
    if !params.is_matrix() || params.cols() != template.param_dims() {
        return Err(Error::Dim {
            what: "parameter vector length",
            expected: template.param_dims(),
            actual: params.cols(),
        });
    }
    let frames = params.rows();
    let exp = Tensor::matrix(
        frames,
        e,
        (0..frames).flat_map(|f| params.row(f)[..e].to_vec()).collect(),
    );
    let offsets = exp.matmul(&template.exp_basis)?;
    let mut data = Vec::with_capacity(frames * v * QUERY_FEATURES);
    for f in 0..frames {
        let psi = exp.row(f);
        let global = psi.iter().map(|x| x * x).sum::<f64>().sqrt() / (e as f64).sqrt();
        let off = offsets.row(f);
        for i in 0..v {
            data.extend_from_slice(template.mean_vertices.row(i));
            let mut onehot = [0.0; Region::COUNT];
            onehot[template.region_labels[i].index()] = 1.0;
            data.extend_from_slice(&onehot);
            data.push(global);
            let d = &off[3 * i..3 * i + 3];
            data.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
        }
    }
    Ok(Tensor::matrix(frames * v, QUERY_FEATURES, data))
}

/// Region index of every query row (frame-major), for the skip path gather.
pub fn region_index(template: &HeadTemplate, frames: usize) -> Arc<Vec<usize>> {
    let per: Vec<usize> = template.region_labels.iter().map(|r| r.index()).collect();
    Arc::new((0..frames).flat_map(|_| per.iter().copied()).collect())
}

/// Colors for every frame of `params` (`F·V × 3`, frame-major).
pub fn decode_sequence(
    features: &AppearanceFeatures,
    token: &EmotionToken,
    params: &Tensor,
    template: &HeadTemplate,
    w: &AppearanceModWeights,
) -> Result<Tensor> {
    let ae = emotion_appearance_tokens(token, w)?;
    let combined = concat_features(&features.tokens, &ae)?;
    decode_combined(&combined, &features.region_colors, params, template, w)
}

fn decode_combined(
    combined: &Tensor,
    region_colors: &Tensor,
    params: &Tensor,
    template: &HeadTemplate,
    w: &AppearanceModWeights,
) -> Result<Tensor> {
    let queries = query_features(template, params)?;
    let mut tape = Tape::new();
    let bound = w.params.bind(&mut tape, false);
    let c = tape.constant(combined.clone());
    let q = tape.constant(queries);
    let rc = tape.constant(region_colors.clone());
    let base = tape.gather_rows(rc, region_index(template, params.rows()))?;
    let out = w.decode(&mut tape, &bound, c, q, base)?;
    Ok(tape.value(out).clone())
}

/// Colors for one frame (`V × 3`) from an explicit `ã`.
pub fn decode_colors(
    combined: &Tensor,
    region_colors: &Tensor,
    params: &crate::head::HeadParams,
    template: &HeadTemplate,
    w: &AppearanceModWeights,
) -> Result<Tensor> {
    let p = Tensor::vector(params.concat());
    decode_combined(combined, region_colors, &p, template, w)
}
