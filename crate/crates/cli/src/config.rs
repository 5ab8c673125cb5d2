//! The single JSON run configuration.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "forge":   { "vertices": 512, "expr_dims": 16, "identities": 32, ... },
//!   "emotion": { "dims": 6, "token_dim": 32 },
//!   "geo":     { "layers": 2, "d_model": 32, "group_size": null, "heads": 2, "ff_hidden": 128 },
//!   "app":     { "layers": 2, "d_model": 16, "heads": 2, "ff_hidden": 32 },
//!   "train":   { "steps": 2000, "app_steps": 300, "accumulate": 8, ... },
//!   "render":  { "resolution": 32, "splat_radius": 1.0 },
//!   "paths":   { "dataset": "data", "checkpoint": "ckpt", "out": "out" }
//! }
//! ```
//!
//! Only `seed` is required; every section falls back to its defaults and
//! unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use emomod_core::app::AppModulatorConfig;
use emomod_core::emotion::EMOTION_DIMS;
use emomod_core::forge::ForgeConfig;
use emomod_core::geo::GeoModulatorConfig;
use emomod_core::train::{RenderConfig, Setup, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmotionConfig {
    /// Emotion code width; fixed at six in this build.
    pub dims: usize,
    pub token_dim: usize,
}

impl Default for EmotionConfig {
    fn default() -> Self {
        Self {
            dims: EMOTION_DIMS,
            token_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoint: "ckpt".into(),
            out: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub forge: ForgeConfig,
    #[serde(default)]
    pub emotion: EmotionConfig,
    #[serde(default)]
    pub geo: GeoModulatorConfig,
    #[serde(default)]
    pub app: AppModulatorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfig {
    /// Defaults everywhere except the seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            forge: ForgeConfig::default(),
            emotion: EmotionConfig::default(),
            geo: GeoModulatorConfig::default(),
            app: AppModulatorConfig::default(),
            train: TrainConfig::default(),
            render: RenderConfig::default(),
            paths: Paths::default(),
        }
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::missing(format!("config file {}", path.display())),
            _ => CliError::io(format!("reading {}: {e}", path.display())),
        })?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        Self::from_value(value, overrides)
    }

    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self, CliError> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.emotion.dims != EMOTION_DIMS {
            return Err(CliError::usage(format!(
                "emotion.dims must be {EMOTION_DIMS} (six categories, neutral is the origin), got {}",
                self.emotion.dims
            )));
        }
        self.forge.validate().map_err(|e| CliError::usage(format!("config: {e}")))?;
        let param_dims = self.forge.expr_dims + emomod_core::head::JAW_DIMS;
        self.setup().validate(param_dims).map_err(|e| CliError::usage(format!("config: {e}")))
    }

    pub fn setup(&self) -> Setup {
        Setup {
            token_dim: self.emotion.token_dim,
            geo: self.geo.clone(),
            app: self.app.clone(),
            train: self.train.clone(),
            render: self.render.clone(),
        }
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON when possible and
/// taken as a string otherwise. Only scalars may be set.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {spec:?}")))?;
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if parsed.is_object() || parsed.is_array() {
        return Err(CliError::usage(format!("--set {key}: only scalar values can be overridden")));
    }
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("--set: malformed key {key:?}")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::usage(format!("--set {key}: {p:?} is not a section")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::usage(format!("--set {key}: parent is not a section")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
