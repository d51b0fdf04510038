//! BERT-style transformer encoder with Hugging Face parameter names, so that
//! `bert-base-german-cased` checkpoints load directly.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{embedding, linear, Embedding, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::{dropout, Batch, DropoutRng, EncoderBackend, ModelError};
use crate::tokenizer::WordPieceTokenizer;

/// Identifier of the pretrained German encoder, resolved inside the cache
/// directory.
pub const PRETRAINED_ENCODER: &str = "bert-base-german-cased";

/// Hyperparameters in `config.json` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    pub type_vocab_size: usize,
    pub hidden_dropout_prob: f32,
    pub attention_probs_dropout_prob: f32,
    pub layer_norm_eps: f64,
    pub initializer_range: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::bert_base(30000)
    }
}

impl EncoderConfig {
    pub fn bert_base(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_size: 768,
            num_hidden_layers: 12,
            num_attention_heads: 12,
            intermediate_size: 3072,
            max_position_embeddings: 512,
            type_vocab_size: 2,
            hidden_dropout_prob: 0.1,
            attention_probs_dropout_prob: 0.1,
            layer_norm_eps: 1e-12,
            initializer_range: 0.02,
        }
    }

    /// A small encoder that trains from scratch on a CPU in minutes.
    pub fn reduced(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_size: 64,
            num_hidden_layers: 2,
            num_attention_heads: 4,
            intermediate_size: 128,
            max_position_embeddings: 256,
            ..EncoderConfig::bert_base(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            self.vocab_size,
            self.hidden_size,
            self.num_hidden_layers,
            self.num_attention_heads,
            self.intermediate_size,
            self.max_position_embeddings,
            self.type_vocab_size,
        ];
        if positive.contains(&0) {
            return Err(ModelError::Config("encoder dimensions must be positive".into()));
        }
        if !self.hidden_size.is_multiple_of(self.num_attention_heads) {
            return Err(ModelError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_attention_heads
            )));
        }
        let p = [self.hidden_dropout_prob, self.attention_probs_dropout_prob];
        if p.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f32,
}

impl LayerNorm {
    fn new(size: usize, eps: f64, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(LayerNorm {
            weight: vb.get_with_hints(size, "weight", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(size, "bias", candle_nn::Init::Const(0.0))?,
            eps: eps as f32,
        })
    }

    // The fused kernel has no backward pass; the composed version does.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        candle_nn::ops::layer_norm_slow(x, &self.weight, &self.bias, self.eps)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    intermediate: Linear,
    output: Linear,
    out_norm: LayerNorm,
}

impl Layer {
    fn new(cfg: &EncoderConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let h = cfg.hidden_size;
        let att = vb.pp("attention");
        Ok(Layer {
            query: linear(h, h, att.pp("self").pp("query"))?,
            key: linear(h, h, att.pp("self").pp("key"))?,
            value: linear(h, h, att.pp("self").pp("value"))?,
            attn_out: linear(h, h, att.pp("output").pp("dense"))?,
            attn_norm: LayerNorm::new(h, cfg.layer_norm_eps, att.pp("output").pp("LayerNorm"))?,
            intermediate: linear(h, cfg.intermediate_size, vb.pp("intermediate").pp("dense"))?,
            output: linear(cfg.intermediate_size, h, vb.pp("output").pp("dense"))?,
            out_norm: LayerNorm::new(h, cfg.layer_norm_eps, vb.pp("output").pp("LayerNorm"))?,
        })
    }
}

/// Post-norm transformer encoder (BERT layout).
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    config: EncoderConfig,
    tokenizer: WordPieceTokenizer,
    word: Embedding,
    position: Embedding,
    token_type: Embedding,
    emb_norm: LayerNorm,
    layers: Vec<Layer>,
    max_len: usize,
    hidden_dropout: f32,
    attention_dropout: f32,
    dtype: DType,
    device: Device,
}

impl TransformerEncoder {
    /// Creates the encoder's variables under `vb` (names as in Hugging Face
    /// checkpoints without the `bert.` prefix).
    pub fn new(config: EncoderConfig, tokenizer: WordPieceTokenizer, vb: VarBuilder) -> Result<Self, ModelError> {
        config.validate()?;
        if tokenizer.vocab_size() > config.vocab_size {
            return Err(ModelError::Config(format!(
                "tokenizer has {} entries but the encoder only {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let h = config.hidden_size;
        let emb = vb.pp("embeddings");
        let layers = (0..config.num_hidden_layers)
            .map(|i| Layer::new(&config, vb.pp("encoder").pp("layer").pp(i)))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(TransformerEncoder {
            word: embedding(config.vocab_size, h, emb.pp("word_embeddings"))?,
            position: embedding(config.max_position_embeddings, h, emb.pp("position_embeddings"))?,
            token_type: embedding(config.type_vocab_size, h, emb.pp("token_type_embeddings"))?,
            emb_norm: LayerNorm::new(h, config.layer_norm_eps, emb.pp("LayerNorm"))?,
            layers,
            max_len: config.max_position_embeddings,
            hidden_dropout: config.hidden_dropout_prob,
            attention_dropout: config.attention_probs_dropout_prob,
            dtype: vb.dtype(),
            device: vb.device().clone(),
            tokenizer,
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Lowers the usable sequence length below the position table size.
    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len.clamp(4, self.config.max_position_embeddings);
        self
    }

    fn attention(
        &self,
        layer: &Layer,
        x: &Tensor,
        mask: &Tensor,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Tensor, ModelError> {
        let (b, t, h) = x.dims3()?;
        let heads = self.config.num_attention_heads;
        let dh = h / heads;
        let split = |l: &Linear| -> candle_core::Result<Tensor> {
            l.forward(x)?.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()
        };
        let (q, k, v) = (split(&layer.query)?, split(&layer.key)?, split(&layer.value)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let scores = scores.broadcast_add(mask)?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let probs = dropout(&probs, self.attention_dropout, rng.as_deref_mut())?;
        let ctx = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, h))?;
        Ok(ctx)
    }
}

impl EncoderBackend for TransformerEncoder {
    fn tokenizer(&self) -> &WordPieceTokenizer {
        &self.tokenizer
    }

    fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn dropout(&self) -> f32 {
        self.hidden_dropout
    }

    fn set_dropout(&mut self, p: f32) {
        self.hidden_dropout = p;
        self.attention_dropout = p;
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn forward(&self, batch: &Batch, mut rng: DropoutRng<'_>) -> Result<Tensor, ModelError> {
        let (b, t) = batch.input_ids.dims2()?;
        if t > self.config.max_position_embeddings {
            return Err(ModelError::Shape(format!(
                "sequence of {t} tokens exceeds {} positions",
                self.config.max_position_embeddings
            )));
        }
        let h = self.config.hidden_size;
        let positions = Tensor::arange(0u32, t as u32, &self.device)?;
        let emb = self
            .word
            .forward(&batch.input_ids)?
            .broadcast_add(&self.position.forward(&positions)?.unsqueeze(0)?)?
            .add(&self.token_type.forward(&batch.type_ids)?)?;
        let mut x = self.emb_norm.forward(&emb)?;
        x = dropout(&x, self.hidden_dropout, rng.as_deref_mut())?;
        // Additive mask: 0 on real tokens, -1e4 on padding.
        let mask = ((batch.attention.clone() - 1.0)? * 1e4)?.reshape((b, 1, 1, t))?;
        for layer in &self.layers {
            let ctx = self.attention(layer, &x, &mask, &mut rng)?;
            let a = dropout(&layer.attn_out.forward(&ctx)?, self.hidden_dropout, rng.as_deref_mut())?;
            let a = layer.attn_norm.forward(&(a + &x)?)?;
            let i = layer.intermediate.forward(&a)?.gelu_erf()?;
            let o = dropout(&layer.output.forward(&i)?, self.hidden_dropout, rng.as_deref_mut())?;
            x = layer.out_norm.forward(&(o + &a)?)?;
        }
        debug_assert_eq!(x.dims(), &[b, t, h]);
        Ok(x)
    }
}

/// A pretrained encoder read from `cache_dir/<name>/{config.json, vocab.txt,
/// model.safetensors}`.
#[derive(Debug)]
pub struct PretrainedEncoder {
    pub config: EncoderConfig,
    pub tokenizer: WordPieceTokenizer,
    pub tensors: HashMap<String, Tensor>,
    pub source: PathBuf,
}

fn normalize_name(name: &str) -> String {
    let name = name.strip_prefix("bert.").unwrap_or(name);
    if let Some(base) = name.strip_suffix(".gamma") {
        format!("{base}.weight")
    } else if let Some(base) = name.strip_suffix(".beta") {
        format!("{base}.bias")
    } else {
        name.to_string()
    }
}

pub fn load_pretrained(
    cache_dir: impl AsRef<Path>,
    name: &str,
    device: &Device,
) -> Result<PretrainedEncoder, ModelError> {
    let dir = cache_dir.as_ref().join(name);
    let missing = |f: &str| ModelError::Pretrained(format!("{} not found", dir.join(f).display()));
    let config_path = dir.join("config.json");
    if !config_path.exists() {
        return Err(missing("config.json"));
    }
    let config: EncoderConfig = serde_json::from_str(&std::fs::read_to_string(&config_path)?)
        .map_err(|e| ModelError::Pretrained(format!("config.json: {e}")))?;
    let vocab_path = dir.join("vocab.txt");
    if !vocab_path.exists() {
        return Err(missing("vocab.txt"));
    }
    let tokenizer = WordPieceTokenizer::from_file(&vocab_path)?;
    let weights = dir.join("model.safetensors");
    if !weights.exists() {
        return Err(missing("model.safetensors"));
    }
    let tensors = candle_core::safetensors::load(&weights, device)?
        .into_iter()
        .map(|(k, v)| (normalize_name(&k), v))
        .collect();
    Ok(PretrainedEncoder {
        config,
        tokenizer,
        tensors,
        source: dir,
    })
}

impl PretrainedEncoder {
    /// Overwrites every variable of `varmap` that has a same-named checkpoint
    /// tensor; returns how many were copied. Head variables without a
    /// checkpoint counterpart keep their initialization.
    pub fn apply(&self, varmap: &VarMap) -> Result<usize, ModelError> {
        let data = varmap.data().lock().expect("var map lock");
        let mut copied = 0;
        for (name, var) in data.iter() {
            if let Some(t) = self.tensors.get(name) {
                if t.dims() != var.dims() {
                    return Err(ModelError::Pretrained(format!(
                        "shape of `{name}` is {:?} in the checkpoint but {:?} in the model",
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(&t.to_dtype(var.dtype())?)?;
                copied += 1;
            }
        }
        let expected = data
            .keys()
            .filter(|k| k.starts_with("embeddings.") || k.starts_with("encoder."))
            .count();
        if copied < expected {
            return Err(ModelError::Pretrained(format!(
                "checkpoint covers only {copied} of {expected} encoder parameters"
            )));
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::encode_pair;

    fn small() -> (TransformerEncoder, VarMap, WordPieceTokenizer) {
        let tok = WordPieceTokenizer::build(&["Mir ist seit gestern übel und ich habe Kopfschmerzen"], 1);
        let mut cfg = EncoderConfig::reduced(tok.vocab_size());
        cfg.hidden_size = 16;
        cfg.intermediate_size = 32;
        cfg.max_position_embeddings = 32;
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let enc = TransformerEncoder::new(cfg, tok.clone(), vb).unwrap();
        super::super::init_parameters(&vm, 1, 0.02).unwrap();
        (enc, vm, tok)
    }

    #[test]
    fn output_shape_and_padding_invariance() {
        let (enc, _vm, tok) = small();
        let a = encode_pair("übel", "Mir ist seit gestern übel", &tok, 32).unwrap();
        let b = encode_pair("Kopfschmerzen", "ich habe Kopfschmerzen und mir ist übel", &tok, 32).unwrap();
        let alone = enc
            .forward(
                &Batch::new(&[&a], tok.pad_id(), false, DType::F32, &Device::Cpu).unwrap(),
                None,
            )
            .unwrap();
        let both = enc
            .forward(
                &Batch::new(&[&a, &b], tok.pad_id(), false, DType::F32, &Device::Cpu).unwrap(),
                None,
            )
            .unwrap();
        assert_eq!(alone.dims(), &[1, a.len(), 16]);
        assert_eq!(both.dims()[0], 2);
        // Padding must not change the hidden states of real tokens.
        let x = alone.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        let y = both
            .get(0)
            .unwrap()
            .narrow(0, 0, a.len())
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        for (r, s) in x.iter().zip(&y) {
            for (u, v) in r.iter().zip(s) {
                assert!((u - v).abs() < 1e-4, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn evaluation_mode_is_deterministic() {
        let (enc, _vm, tok) = small();
        let a = encode_pair("übel", "Mir ist übel", &tok, 32).unwrap();
        let batch = Batch::new(&[&a], tok.pad_id(), false, DType::F32, &Device::Cpu).unwrap();
        let x = enc
            .forward(&batch, None)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let y = enc
            .forward(&batch, None)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn checkpoint_names_are_normalized() {
        assert_eq!(
            normalize_name("bert.embeddings.LayerNorm.gamma"),
            "embeddings.LayerNorm.weight"
        );
        assert_eq!(normalize_name("bert.pooler.dense.bias"), "pooler.dense.bias");
        assert_eq!(
            normalize_name("encoder.layer.0.output.LayerNorm.beta"),
            "encoder.layer.0.output.LayerNorm.bias"
        );
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::reduced(100).validate().is_ok());
        let mut bad = EncoderConfig::reduced(100);
        bad.num_attention_heads = 5;
        assert!(bad.validate().is_err());
        let parsed: EncoderConfig = serde_json::from_str(r#"{"vocab_size": 31102, "hidden_act": "gelu"}"#).unwrap();
        assert_eq!(parsed.hidden_size, 768);
        assert_eq!(parsed.vocab_size, 31102);
    }
}
