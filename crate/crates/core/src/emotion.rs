//! Explicit emotion signal: labels, the learnable embedding table and the
//! masked token `T = E · diag(e)`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of non-neutral categories; neutral is the origin.
pub const EMOTION_DIMS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Angry,
    Disgust,
    Fear,
    Happy,
    Sad,
    Surprised,
    Neutral,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 7] = [
        EmotionLabel::Angry,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Surprised,
        EmotionLabel::Neutral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Angry => "angry",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Surprised => "surprised",
            EmotionLabel::Neutral => "neutral",
        }
    }

    /// Column of the one-hot code, `None` for neutral.
    pub fn index(self) -> Option<usize> {
        match self {
            EmotionLabel::Neutral => None,
            other => Some(other as usize),
        }
    }

    /// Position in [`EmotionLabel::ALL`].
    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Self::name).join(", ")
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::UnknownEmotion {
                name: s.to_string(),
                valid: Self::valid_names(),
            })
    }
}

/// Emotion code `e ∈ [0,1]^6`; one-hot for pure emotions, zero for neutral.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmotionVector(pub [f64; EMOTION_DIMS]);

impl EmotionVector {
    pub const NEUTRAL: EmotionVector = EmotionVector([0.0; EMOTION_DIMS]);

    pub fn as_tensor(&self) -> Tensor {
        Tensor::vector(self.0.to_vec())
    }

    pub fn is_neutral(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

pub fn encode_label(label: EmotionLabel) -> EmotionVector {
    let mut e = [0.0; EMOTION_DIMS];
    if let Some(i) = label.index() {
        e[i] = 1.0;
    }
    EmotionVector(e)
}

/// `(1 − α)·e1 + α·e2`, evaluated per component in that order.
pub fn interpolate_emotions(e1: &EmotionVector, e2: &EmotionVector, alpha: f64) -> Result<EmotionVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range(format!("interpolation alpha {alpha} outside [0, 1]")));
    }
    Ok(EmotionVector(std::array::from_fn(|j| (1.0 - alpha) * e1.0[j] + alpha * e2.0[j])))
}

/// Learnable `D × N` embedding table shared by every identity.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionTable {
    pub weights: Tensor,
}

impl EmotionTable {
    /// Entries i.i.d. normal with standard deviation `1/√D`.
    pub fn init(token_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (token_dim as f64).sqrt()).expect("valid std");
        let data = (0..token_dim * EMOTION_DIMS).map(|_| normal.sample(&mut rng)).collect();
        Self {
            weights: Tensor::matrix(token_dim, EMOTION_DIMS, data),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// `D × N` masked token; column `j` is `e_j · E[:, j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionToken(pub Tensor);

impl EmotionToken {
    pub fn zeros(token_dim: usize) -> Self {
        Self(Tensor::zeros(&[token_dim, EMOTION_DIMS]))
    }

    pub fn is_zero(&self) -> bool {
        self.0.data().iter().all(|&v| v == 0.0)
    }
}

pub fn masked_token(table: &EmotionTable, e: &EmotionVector) -> Result<EmotionToken> {
    let w = &table.weights;
    if w.cols() != EMOTION_DIMS {
        return Err(Error::Dim {
            what: "emotion table columns",
            expected: EMOTION_DIMS,
            actual: w.cols(),
        });
    }
    let n = w.cols();
    let data = w.data().iter().enumerate().map(|(i, v)| e.0[i % n] * v).collect();
    Ok(EmotionToken(Tensor::matrix(w.rows(), n, data)))
}

/// Differentiable masked token: `table · diag(e)` on the tape.
pub fn masked_token_var(tape: &mut Tape, table: Var, e: Var) -> Result<Var> {
    tape.mul_row(table, e)
}

/// Token-space linear interpolation with the same arithmetic order as
/// [`interpolate_emotions`] followed by [`masked_token`].
pub fn lerp_tokens(t1: &EmotionToken, t2: &EmotionToken, alpha: f64) -> Result<EmotionToken> {
    Ok(EmotionToken(t1.0.zip(&t2.0, "lerp_tokens", |a, b| (1.0 - alpha) * a + alpha * b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_is_zero_vector() {
        assert_eq!(encode_label(EmotionLabel::Neutral).0, [0.0; 6]);
        assert_eq!(encode_label(EmotionLabel::Happy).0, [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn encoding_is_injective() {
        let codes: Vec<_> = EmotionLabel::ALL.iter().map(|&l| encode_label(l).0).collect();
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                assert_ne!(codes[i], codes[j]);
            }
        }
    }

    #[test]
    fn labels_parse_lowercase() {
        for l in EmotionLabel::ALL {
            assert_eq!(l.name().parse::<EmotionLabel>().unwrap(), l);
        }
        let err = "Happy".parse::<EmotionLabel>().unwrap_err();
        assert!(err.to_string().contains("surprised"));
    }

    #[test]
    fn one_hot_selects_single_column() {
        let table = EmotionTable::init(8, 1);
        let t = masked_token(&table, &encode_label(EmotionLabel::Fear)).unwrap();
        for r in 0..8 {
            for c in 0..EMOTION_DIMS {
                let expect = if c == 2 { table.weights.at(r, c) } else { 0.0 };
                assert_eq!(t.0.at(r, c), expect);
            }
        }
    }

    #[test]
    fn neutral_token_is_zero() {
        let table = EmotionTable::init(8, 1);
        assert!(masked_token(&table, &EmotionVector::NEUTRAL).unwrap().is_zero());
    }

    #[test]
    fn token_linear_in_code() {
        let table = EmotionTable::init(8, 2);
        let mix = EmotionVector([0.5, 0.0, 0.0, 0.0, 0.5, 0.0]);
        let t = masked_token(&table, &mix).unwrap();
        let a = masked_token(&table, &encode_label(EmotionLabel::Angry)).unwrap();
        let s = masked_token(&table, &encode_label(EmotionLabel::Sad)).unwrap();
        let expect = a.0.add(&s.0).unwrap().scale(0.5);
        assert!(t.0.bit_eq(&expect));
    }

    #[test]
    fn interpolation_endpoints_and_range() {
        let h = encode_label(EmotionLabel::Happy);
        let s = encode_label(EmotionLabel::Sad);
        assert_eq!(interpolate_emotions(&h, &s, 0.0).unwrap(), h);
        assert_eq!(interpolate_emotions(&h, &s, 1.0).unwrap(), s);
        assert!(interpolate_emotions(&h, &s, 1.5).is_err());
        assert!(interpolate_emotions(&h, &s, -0.1).is_err());
    }

    #[test]
    fn happy_to_neutral_scales_norm() {
        let table = EmotionTable::init(16, 3);
        let h = encode_label(EmotionLabel::Happy);
        let base = masked_token(&table, &h).unwrap().0.norm();
        for i in 0..=10 {
            let a = i as f64 / 10.0;
            let e = interpolate_emotions(&h, &EmotionVector::NEUTRAL, a).unwrap();
            let n = masked_token(&table, &e).unwrap().0.norm();
            assert!((n - (1.0 - a) * base).abs() < 1e-12);
        }
    }

    #[test]
    fn three_way_path_is_continuous() {
        let table = EmotionTable::init(32, 0);
        let h = encode_label(EmotionLabel::Happy);
        let s = encode_label(EmotionLabel::Sad);
        let nh = masked_token(&table, &h).unwrap().0.norm();
        let ns = masked_token(&table, &s).unwrap().0.norm();
        let path = |a: f64| {
            let e = if a <= 0.5 {
                interpolate_emotions(&h, &EmotionVector::NEUTRAL, 2.0 * a)
            } else {
                interpolate_emotions(&EmotionVector::NEUTRAL, &s, 2.0 * a - 1.0)
            };
            masked_token(&table, &e.unwrap()).unwrap().0
        };
        for i in 0..10 {
            let d = path((i + 1) as f64 / 10.0).sub(&path(i as f64 / 10.0)).unwrap().norm();
            assert!(d <= (nh + ns) / 5.0 + 1e-12, "step {i}: {d}");
        }
    }
}
