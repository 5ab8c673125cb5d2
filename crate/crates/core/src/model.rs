//! Trained model bundle (emotion table, geometry and appearance modulators)
//! and its checkpoint container.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::app::{self, AppModulatorConfig, AppearanceFeatures, AppearanceModWeights};
use crate::container;
use crate::emotion::{masked_token, EmotionTable, EmotionToken, EmotionVector, EMOTION_DIMS};
use crate::error::{Error, Result};
use crate::geo::{self, GeoModulatorConfig, GeoModulatorWeights};
use crate::head::{AvatarState, HeadTemplate};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "ckpt.json";
pub const CHECKPOINT_BLOB: &str = "ckpt.f32";
const FORMAT: &str = "emomod-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Geo,
    App,
    EmotionTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub seed: u64,
    /// Geometry seed the appearance branch was trained against, if any.
    pub geo_seed: Option<u64>,
    pub geo_step: u64,
    pub app_step: u64,
    pub components: Vec<Component>,
    pub expr_dims: usize,
    pub emotion_dims: usize,
    pub token_dim: usize,
    pub geo_config: GeoModulatorConfig,
    pub app_config: Option<AppModulatorConfig>,
    /// Free-form echo of the run configuration.
    pub run_config: Value,
}

/// Everything needed to modulate and color a driving sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub table: EmotionTable,
    pub geo: GeoModulatorWeights,
    pub app: Option<AppearanceModWeights>,
}

impl Model {
    pub fn expr_dims(&self) -> usize {
        self.geo.param_dims - crate::head::JAW_DIMS
    }

    pub fn token_dim(&self) -> usize {
        self.table.token_dim()
    }

    pub fn token(&self, e: &EmotionVector) -> Result<EmotionToken> {
        masked_token(&self.table, e)
    }

    /// `p̃ = g(p, T(e))` for each frame of `driving`.
    pub fn modulate(&self, driving: &Tensor, e: &EmotionVector) -> Result<Tensor> {
        geo::modulate_sequence(driving, &self.token(e)?, &self.geo)
    }

    /// Appearance weights, or the untrained identity decoder (zero residual)
    /// when the checkpoint carries geometry only.
    pub fn app_weights(&self) -> Result<AppearanceModWeights> {
        match &self.app {
            Some(a) => Ok(a.clone()),
            None => AppearanceModWeights::init(&AppModulatorConfig::default(), self.token_dim(), 0),
        }
    }

    /// Per-frame vertex colors (`F·V × 3`) for `params`, conditioned on `e`.
    pub fn colors(
        &self,
        reference: &AvatarState,
        template: &HeadTemplate,
        params: &Tensor,
        e: &EmotionVector,
    ) -> Result<Tensor> {
        let w = self.app_weights()?;
        let features: AppearanceFeatures = app::extract_features(reference, template, &w)?;
        app::decode_sequence(&features, &self.token(e)?, params, template, &w)
    }

    /// Rounds every weight to `f32`, the precision checkpoints store.
    pub fn quantize(&mut self) {
        for v in self.table.weights.data_mut() {
            *v = *v as f32 as f64;
        }
        self.geo.params.quantize_f32();
        if let Some(a) = &mut self.app {
            a.params.quantize_f32();
        }
    }
}

/// A quantized model plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(mut model: Model, seed: u64, geo_step: u64, app_step: u64, geo_seed: Option<u64>, run_config: Value) -> Self {
        model.quantize();
        let mut components = vec![Component::Geo, Component::EmotionTable];
        if model.app.is_some() {
            components.push(Component::App);
        }
        let header = CheckpointHeader {
            format: FORMAT.into(),
            seed,
            geo_seed,
            geo_step,
            app_step,
            components,
            expr_dims: model.expr_dims(),
            emotion_dims: EMOTION_DIMS,
            token_dim: model.token_dim(),
            geo_config: model.geo.config.clone(),
            app_config: model.app.as_ref().map(|a| a.config.clone()),
            run_config,
        };
        Self { header, model }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut blobs = ParamStore::new();
        blobs.insert("emotion_table", self.model.table.weights.clone());
        for (n, t) in self.model.geo.params.iter() {
            blobs.insert(format!("geo.{n}"), t.clone());
        }
        if let Some(a) = &self.model.app {
            for (n, t) in a.params.iter() {
                blobs.insert(format!("app.{n}"), t.clone());
            }
        }
        let header = match serde_json::to_value(&self.header)? {
            Value::Object(m) => m,
            _ => unreachable!("header serializes to an object"),
        };
        container::write(dir, CHECKPOINT_FILE, CHECKPOINT_BLOB, header, &blobs)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (header, blobs) = container::read(dir, CHECKPOINT_FILE)?;
        let header: CheckpointHeader =
            serde_json::from_value(Value::Object(header)).map_err(|e| Error::Manifest(e.to_string()))?;
        if header.format != FORMAT {
            return Err(Error::Manifest(format!("not a checkpoint: format {:?}", header.format)));
        }
        if header.emotion_dims != EMOTION_DIMS {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} emotion dims, this build uses {EMOTION_DIMS}",
                header.emotion_dims
            )));
        }
        let table = blobs.expect("emotion_table")?.clone();
        if table.shape() != [header.token_dim, EMOTION_DIMS] {
            return Err(Error::Incompatible("emotion table shape disagrees with header".into()));
        }
        let pick = |prefix: &str| {
            let mut p = ParamStore::new();
            for (n, t) in blobs.iter() {
                if let Some(rest) = n.strip_prefix(prefix) {
                    p.insert(rest, t.clone());
                }
            }
            p
        };
        let param_dims = header.expr_dims + crate::head::JAW_DIMS;
        let geo = GeoModulatorWeights::from_params(header.geo_config.clone(), param_dims, header.token_dim, pick("geo."))?;
        let app = match (&header.app_config, header.components.contains(&Component::App)) {
            (Some(cfg), true) => Some(AppearanceModWeights::from_params(cfg.clone(), header.token_dim, pick("app."))?),
            (None, false) => None,
            _ => return Err(Error::Manifest("app component and app config disagree".into())),
        };
        Ok(Self {
            header,
            model: Model {
                table: EmotionTable { weights: table },
                geo,
                app,
            },
        })
    }

    /// Checks that this checkpoint can drive a corpus with `expr_dims`
    /// coefficients and tokens of width `token_dim`.
    pub fn check_compatible(&self, expr_dims: usize, token_dim: usize) -> Result<()> {
        if self.header.expr_dims != expr_dims {
            return Err(Error::Incompatible(format!(
                "expr_dims: checkpoint {} vs config {expr_dims}",
                self.header.expr_dims
            )));
        }
        if self.header.token_dim != token_dim {
            return Err(Error::Incompatible(format!(
                "token_dim: checkpoint {} vs config {token_dim}",
                self.header.token_dim
            )));
        }
        Ok(())
    }
}
