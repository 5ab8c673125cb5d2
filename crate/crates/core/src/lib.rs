//! Emotion-aware modulation of parametric head avatars.
//!
//! The crate provides a small reverse-mode autodiff engine, a blendshape head
//! model with a skinned jaw, an explicit emotion token, a geometry modulator
//! that rewrites expression/jaw parameters toward a target emotion, an
//! appearance modulator that decodes identity- and emotion-aware vertex
//! colors, a point-splat renderer with image/geometry metrics, a synthetic
//! emotion-synchronized corpus generator, and the training loops tying
//! them together.

pub mod app;
pub mod attention;
pub mod container;
pub mod emotion;
pub mod error;
pub mod eval;
pub mod forge;
pub mod geo;
pub mod gradcheck;
pub mod gradsuite;
pub mod head;
pub mod metrics;
pub mod model;
pub mod params;
pub mod render;
pub mod rotation;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
