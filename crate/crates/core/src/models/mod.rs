//! Encoder backends, the symptom-query classifier head, the attribute
//! extraction heads, the two classification baselines and the weighted
//! binary NLL loss.

mod baselines;
mod encoder;
mod heads;
mod loss;
mod stub;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AttributeType;
use crate::encoding::{EncodingError, Section, TokenizedPair};
use crate::tokenizer::{TokenizerError, WordPieceTokenizer};

pub use baselines::{EncoderSigmoidBaseline, LabelSpace, MlpBaseline, TfidfMlpBaseline, TfidfVectorizer};
pub use encoder::{load_pretrained, EncoderConfig, PretrainedEncoder, TransformerEncoder, PRETRAINED_ENCODER};
pub use heads::{
    classify_post, extractor_forward, score_pairs, score_queries, sq_forward, sq_logits, ClassifiedSymptom,
    ExtractorHead, ExtractorModel, SqHead, SqModel,
};
pub use loss::{class_balance_weights, weighted_bce_with_logits, weighted_nll_loss, LossWeights, NLL_EPSILON};
pub use stub::StubEncoder;

pub use crate::decoding::ExtractionMethod;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("loss weights must be positive, got w_pos={pos}, w_neg={neg}")]
    InvalidWeights { pos: f64, neg: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model has not been fit")]
    Unfit,
    #[error("pretrained encoder: {0}")]
    Pretrained(String),
}

/// Source of dropout masks; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

/// Shared interface of everything that turns token ids into contextual
/// hidden states.
pub trait EncoderBackend: Send + Sync {
    fn tokenizer(&self) -> &WordPieceTokenizer;
    fn hidden_size(&self) -> usize;
    fn max_len(&self) -> usize;
    fn dropout(&self) -> f32;
    fn set_dropout(&mut self, p: f32);
    fn dtype(&self) -> DType;
    fn device(&self) -> &Device;
    /// Hidden states of shape `(batch, tokens, hidden)`.
    fn forward(&self, batch: &Batch, rng: DropoutRng<'_>) -> Result<Tensor, ModelError>;
}

/// A padded batch of encoded pairs.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, T)` u32 token ids.
    pub input_ids: Tensor,
    /// `(B, T)` u32 segment ids.
    pub type_ids: Tensor,
    /// `(B, T)` 1 for real tokens, 0 for padding.
    pub attention: Tensor,
    /// `(B, T)` positions that enter the mean pooling.
    pub mean_mask: Tensor,
    /// `(B, T)` 1 for post-section tokens.
    pub post_mask: Tensor,
    pub lengths: Vec<usize>,
}

impl Batch {
    /// Pads `pairs` to the longest one. `mean_over_specials` adds `[CLS]` and
    /// `[SEP]` to the pooling mask.
    pub fn new(
        pairs: &[&TokenizedPair],
        pad_id: u32,
        mean_over_specials: bool,
        dtype: DType,
        device: &Device,
    ) -> Result<Self, ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::Shape("empty batch".into()));
        }
        let b = pairs.len();
        let t = pairs.iter().map(|p| p.len()).max().unwrap_or(0);
        let mut ids = vec![pad_id; b * t];
        let mut types = vec![0u32; b * t];
        let mut attention = vec![0f64; b * t];
        let mut mean = vec![0f64; b * t];
        let mut post = vec![0f64; b * t];
        for (r, pair) in pairs.iter().enumerate() {
            for (k, ty) in pair.type_ids().into_iter().enumerate() {
                let at = r * t + k;
                ids[at] = pair.tokens[k];
                types[at] = ty;
                attention[at] = 1.0;
                let section = pair.section[k];
                if section != Section::Special || mean_over_specials {
                    mean[at] = 1.0;
                }
                if section == Section::Post {
                    post[at] = 1.0;
                }
            }
        }
        let float = |v: Vec<f64>| Tensor::from_vec(v, (b, t), device)?.to_dtype(dtype);
        Ok(Batch {
            input_ids: Tensor::from_vec(ids, (b, t), device)?,
            type_ids: Tensor::from_vec(types, (b, t), device)?,
            attention: float(attention)?,
            mean_mask: float(mean)?,
            post_mask: float(post)?,
            lengths: pairs.iter().map(|p| p.len()).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.input_ids.dims()[1]
    }
}

/// Inverted dropout driven by an explicit random source so seeded runs are
/// reproducible.
pub fn dropout(x: &Tensor, p: f32, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor, ModelError> {
    let Some(rng) = rng else {
        return Ok(x.clone());
    };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p as f64);
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep as f32 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Re-initializes every variable deterministically: biases to zero,
/// layer-norm gains to one, everything else `N(0, std²)`. Names are visited
/// in sorted order so the result depends only on the seed.
pub fn init_parameters(varmap: &VarMap, seed: u64, std: f64) -> Result<(), ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
    let data = varmap.data().lock().expect("var map lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let n = var.elem_count();
        let values: Vec<f64> = if name.ends_with("bias") || name.ends_with("beta") {
            vec![0.0; n]
        } else if name.contains("LayerNorm") || name.ends_with("gamma") {
            vec![1.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let t = Tensor::from_vec(values, var.shape(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Copies all variables from `src` into the same-named variables of `dst`.
pub fn copy_parameters(src: &VarMap, dst: &VarMap) -> Result<(), ModelError> {
    let src = src.data().lock().expect("var map lock");
    let dst = dst.data().lock().expect("var map lock");
    for (name, var) in dst.iter() {
        let s = src
            .get(name)
            .ok_or_else(|| ModelError::Shape(format!("missing parameter `{name}`")))?;
        var.set(s.as_tensor())?;
    }
    Ok(())
}

/// Attribute types covered by one extraction model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    Single(AttributeType),
    General,
}

impl Scope {
    /// The five single-type scopes followed by the general one.
    pub fn all() -> Vec<Scope> {
        let mut v: Vec<Scope> = AttributeType::ALL.iter().map(|&t| Scope::Single(t)).collect();
        v.push(Scope::General);
        v
    }

    pub fn types(self) -> Vec<AttributeType> {
        match self {
            Scope::Single(t) => vec![t],
            Scope::General => AttributeType::ALL.to_vec(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Single(t) => t.as_str(),
            Scope::General => "general",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "general" {
            return Ok(Scope::General);
        }
        s.parse::<AttributeType>()
            .map(Scope::Single)
            .map_err(|_| format!("unknown scope `{s}`"))
    }
}

impl Serialize for Scope {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
