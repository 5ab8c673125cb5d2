//! Geometry path: cross-attention that rewrites `[exp ‖ jaw]` parameters
//! toward a target emotion without leaving the parameter space.
//!
//! Parameter tokens are the queries; the emotion token's columns are the
//! keys and values. Value, output and feed-forward maps carry no bias and
//! the feed-forward gate is `tanh`, so a zero emotion token produces an
//! exactly zero update regardless of the weights. The output head starts
//! at zero, making a freshly initialized modulator the identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention;
use crate::emotion::{EmotionToken, EMOTION_DIMS};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeoModulatorConfig {
    pub layers: usize,
    pub d_model: usize,
    /// Coefficients per query token; `None` means one token for the whole vector.
    pub group_size: Option<usize>,
    pub heads: usize,
    pub ff_hidden: usize,
}

impl Default for GeoModulatorConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            group_size: None,
            heads: 2,
            ff_hidden: 128,
        }
    }
}

impl GeoModulatorConfig {
    pub fn group(&self, param_dims: usize) -> usize {
        self.group_size.unwrap_or(param_dims)
    }

    pub fn validate(&self, param_dims: usize) -> Result<()> {
        let g = self.group(param_dims);
        if self.layers == 0 || self.d_model == 0 || self.ff_hidden == 0 || g == 0 {
            return Err(Error::Config("geometry modulator extents must be positive".into()));
        }
        if g > param_dims {
            return Err(Error::Config(format!("group size {g} exceeds parameter length {param_dims}")));
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

/// Weights of the geometry modulator `g(p, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoModulatorWeights {
    pub config: GeoModulatorConfig,
    pub param_dims: usize,
    pub token_dim: usize,
    pub params: ParamStore,
}

impl GeoModulatorWeights {
    pub fn init(config: &GeoModulatorConfig, param_dims: usize, token_dim: usize, seed: u64) -> Result<Self> {
        config.validate(param_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = config.group(param_dims);
        let d = config.d_model;
        let ff = config.ff_hidden;
        let mut p = ParamStore::new();
        p.init_normal(&mut rng, "embed", g, d, 1.0 / (g as f64).sqrt());
        for l in 0..config.layers {
            p.insert(format!("l{l}.ln_gamma"), Tensor::full(&[1, d], 1.0));
            p.insert(format!("l{l}.ln_beta"), Tensor::zeros(&[1, d]));
            p.init_normal(&mut rng, &format!("l{l}.wq"), d, d, 1.0 / (d as f64).sqrt());
            p.init_normal(&mut rng, &format!("l{l}.wk"), token_dim, d, 1.0 / (token_dim as f64).sqrt());
            p.init_normal(&mut rng, &format!("l{l}.wv"), token_dim, d, 1.0 / (token_dim as f64).sqrt());
            p.init_normal(&mut rng, &format!("l{l}.wo"), d, d, 1.0 / (d as f64).sqrt());
            p.init_normal(&mut rng, &format!("l{l}.ff_gate"), d, ff, 1.0 / (d as f64).sqrt());
            p.init_normal(&mut rng, &format!("l{l}.ff_state"), d, ff, 1.0 / (d as f64).sqrt());
            p.init_normal(&mut rng, &format!("l{l}.ff_out"), ff, d, 1.0 / (ff as f64).sqrt());
        }
        p.insert("head", Tensor::zeros(&[d, g]));
        Ok(Self {
            config: config.clone(),
            param_dims,
            token_dim,
            params: p,
        })
    }

    pub fn from_params(config: GeoModulatorConfig, param_dims: usize, token_dim: usize, params: ParamStore) -> Result<Self> {
        let w = Self {
            config,
            param_dims,
            token_dim,
            params,
        };
        let reference = Self::init(&w.config, param_dims, token_dim, 0)?;
        for (name, t) in reference.params.iter() {
            let got = w.params.expect(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "geometry parameter {name} has shape {:?}, config implies {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if w.params.len() != reference.params.len() {
            return Err(Error::Incompatible("unexpected geometry parameters".into()));
        }
        Ok(w)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.param_dims.div_ceil(self.config.group(self.param_dims))
    }

    /// Records `g(p, T)` for a `F × (E+3)` parameter sequence.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, params: Var, token: Var) -> Result<Var> {
        let (frames, width) = {
            let v = tape.value(params);
            (v.rows(), v.cols())
        };
        if width != self.param_dims || !tape.value(params).is_matrix() {
            return Err(Error::Dim {
                what: "parameter vector length",
                expected: self.param_dims,
                actual: width,
            });
        }
        if tape.value(token).shape() != [self.token_dim, EMOTION_DIMS] {
            return Err(Error::shape("modulate", &[self.token_dim, EMOTION_DIMS], tape.value(token).shape()));
        }
        let g = self.config.group(self.param_dims);
        let ntok = self.tokens_per_frame();
        let padded = ntok * g;
        let x = if padded > width {
            let pad = tape.constant(Tensor::zeros(&[frames, padded - width]));
            tape.concat_cols(&[params, pad])?
        } else {
            params
        };
        let x = tape.reshape(x, &[frames * ntok, g])?;
        let mut h = tape.matmul(x, bound.get("embed"))?;

        let emo = tape.transpose(token)?;
        let mut acc: Option<Var> = None;
        for l in 0..self.config.layers {
            let name = |s: &str| format!("l{l}.{s}");
            let z = tape.layer_norm_rows(h, LN_EPS)?;
            let z = tape.mul_row(z, bound.get(&name("ln_gamma")))?;
            let z = tape.add_row(z, bound.get(&name("ln_beta")))?;
            let q = tape.matmul(z, bound.get(&name("wq")))?;
            let k = tape.matmul(emo, bound.get(&name("wk")))?;
            let v = tape.matmul(emo, bound.get(&name("wv")))?;
            let attended = attention::multi_head(tape, q, k, v, self.config.heads)?;
            let msg = tape.matmul(attended, bound.get(&name("wo")))?;
            let gate = tape.matmul(msg, bound.get(&name("ff_gate")))?;
            let gate = tape.tanh(gate)?;
            let state = tape.matmul(h, bound.get(&name("ff_state")))?;
            let mixed = tape.mul(gate, state)?;
            let ff = tape.matmul(mixed, bound.get(&name("ff_out")))?;
            let update = tape.add(msg, ff)?;
            h = tape.add(h, update)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, update)?,
                None => update,
            });
        }
        let acc = acc.expect("at least one layer");
        let delta = tape.matmul(acc, bound.get("head"))?;
        let delta = tape.reshape(delta, &[frames, padded])?;
        let delta = if padded > width {
            tape.slice_cols(delta, 0, width)?
        } else {
            delta
        };
        tape.add(params, delta)
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `p̃ = g(p, T)` for one frame.
pub fn modulate(p: &[f64], token: &EmotionToken, w: &GeoModulatorWeights) -> Result<Vec<f64>> {
    let seq = Tensor::vector(p.to_vec());
    Ok(modulate_sequence(&seq, token, w)?.into_data())
}

/// Frame-wise modulation of a `F × (E+3)` sequence; frames never interact.
pub fn modulate_sequence(seq: &Tensor, token: &EmotionToken, w: &GeoModulatorWeights) -> Result<Tensor> {
    check_finite(seq, "driving parameters")?;
    check_finite(&token.0, "emotion token")?;
    if !seq.is_matrix() || seq.cols() != w.param_dims {
        return Err(Error::Dim {
            what: "parameter vector length",
            expected: w.param_dims,
            actual: seq.cols(),
        });
    }
    let mut tape = Tape::new();
    let bound = w.params.bind(&mut tape, false);
    let p = tape.constant(seq.clone());
    let t = tape.constant(token.0.clone());
    let out = w.forward(&mut tape, &bound, p, t)?;
    Ok(tape.value(out).clone())
}
