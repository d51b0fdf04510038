//! The symptom-query classifier head and the attribute extraction heads.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{linear, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::{dropout, Batch, DropoutRng, EncoderBackend, EncoderConfig, ModelError, Scope, TransformerEncoder};
use crate::decoding::{ExtractionMethod, TokenScores};
use crate::encoding::{encode_pair, TokenizedPair};
use crate::ontology::{SymptomId, SymptomOntology};
use crate::tokenizer::WordPieceTokenizer;

/// Queries scored per forward pass at inference time.
const INFERENCE_BATCH: usize = 32;

/// Pooler plus scorer over `[mean of token states; pooler output]`.
#[derive(Debug, Clone)]
pub struct SqHead {
    pooler: Linear,
    scorer: Linear,
    /// Include `[CLS]`/`[SEP]` in the mean pooling.
    pub mean_over_specials: bool,
}

impl SqHead {
    /// Variables: `pooler.dense.*` (shared name with pretrained checkpoints)
    /// and `classifier.*`.
    pub fn new(hidden: usize, mean_over_specials: bool, vb: VarBuilder) -> Result<Self, ModelError> {
        Ok(SqHead {
            pooler: linear(hidden, hidden, vb.pp("pooler").pp("dense"))?,
            scorer: linear(2 * hidden, 1, vb.pp("classifier"))?,
            mean_over_specials,
        })
    }

    /// Logits of shape `(B,)` from hidden states `(B, T, H)`.
    pub fn logits(
        &self,
        hidden: &Tensor,
        batch: &Batch,
        p_drop: f32,
        rng: DropoutRng<'_>,
    ) -> Result<Tensor, ModelError> {
        let (b, t, _) = hidden.dims3()?;
        if batch.mean_mask.dims() != [b, t] {
            return Err(ModelError::Shape(format!(
                "hidden states {:?} do not match batch of {:?}",
                hidden.dims(),
                batch.mean_mask.dims()
            )));
        }
        let mask = batch.mean_mask.unsqueeze(D::Minus1)?;
        let count = batch.mean_mask.sum_keepdim(1)?.maximum(1.0)?;
        let mean = hidden.broadcast_mul(&mask)?.sum(1)?.broadcast_div(&count)?;
        let cls = hidden.narrow(1, 0, 1)?.squeeze(1)?;
        let pooled = self.pooler.forward(&cls)?.tanh()?;
        let features = Tensor::cat(&[&mean, &pooled], 1)?;
        let features = dropout(&features, p_drop, rng)?;
        Ok(self.scorer.forward(&features)?.squeeze(1)?)
    }
}

/// `σ(W·[mean_t h_t ; tanh(W_p h_CLS + b_p)] + b)` logits for a batch.
pub fn sq_logits(
    backend: &dyn EncoderBackend,
    head: &SqHead,
    batch: &Batch,
    mut rng: DropoutRng<'_>,
) -> Result<Tensor, ModelError> {
    let hidden = backend.forward(batch, rng.as_deref_mut())?;
    head.logits(&hidden, batch, backend.dropout(), rng)
}

/// Probabilities of shape `(B,)`, evaluation mode.
pub fn sq_forward(backend: &dyn EncoderBackend, head: &SqHead, batch: &Batch) -> Result<Tensor, ModelError> {
    Ok(candle_nn::ops::sigmoid(&sq_logits(backend, head, batch, None)?)?)
}

/// Scores one post against several query descriptions; every query is an
/// independent forward pass of its own pair.
pub fn score_queries(
    backend: &dyn EncoderBackend,
    head: &SqHead,
    text: &str,
    descriptions: &[&str],
) -> Result<Vec<f64>, ModelError> {
    let pairs = descriptions
        .iter()
        .map(|d| encode_pair(d, text, backend.tokenizer(), backend.max_len()))
        .collect::<Result<Vec<_>, _>>()?;
    score_pairs(backend, head, &pairs)
}

/// Evaluation-mode probabilities for already encoded pairs.
pub fn score_pairs(
    backend: &dyn EncoderBackend,
    head: &SqHead,
    pairs: &[TokenizedPair],
) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(INFERENCE_BATCH) {
        let refs: Vec<&TokenizedPair> = chunk.iter().collect();
        let batch = Batch::new(
            &refs,
            backend.tokenizer().pad_id(),
            head.mean_over_specials,
            backend.dtype(),
            backend.device(),
        )?;
        let p = sq_forward(backend, head, &batch)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        out.extend(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedSymptom {
    pub symptom_id: SymptomId,
    pub probability: f64,
}

/// Queries every ontology symptom with its canonical description and keeps
/// those scoring above `threshold`, ordered by descending probability.
/// Closure completion is left to the caller (`SymptomOntology::label_closure`).
pub fn classify_post(
    backend: &dyn EncoderBackend,
    head: &SqHead,
    ontology: &SymptomOntology,
    text: &str,
    threshold: f64,
) -> Result<Vec<ClassifiedSymptom>, ModelError> {
    let nodes: Vec<_> = ontology.nodes().collect();
    let descriptions: Vec<&str> = nodes.iter().map(|n| n.description.as_str()).collect();
    let scores = score_queries(backend, head, text, &descriptions)?;
    let mut out: Vec<ClassifiedSymptom> = nodes
        .iter()
        .zip(scores)
        .filter(|(_, p)| *p > threshold)
        .map(|(n, p)| ClassifiedSymptom {
            symptom_id: n.id.clone(),
            probability: p,
        })
        .collect();
    out.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then(a.symptom_id.cmp(&b.symptom_id))
    });
    Ok(out)
}

/// Per-token affine map to start/end or inside logits for each covered type.
#[derive(Debug, Clone)]
pub struct ExtractorHead {
    pub method: ExtractionMethod,
    pub scope: Scope,
    proj: Linear,
}

impl ExtractorHead {
    pub fn new(method: ExtractionMethod, scope: Scope, hidden: usize, vb: VarBuilder) -> Result<Self, ModelError> {
        let channels = method.channels_per_type() * scope.types().len();
        Ok(ExtractorHead {
            method,
            scope,
            proj: linear(hidden, channels, vb.pp("extractor"))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.method.channels_per_type() * self.scope.types().len()
    }

    /// Logits `(B, T, C)`.
    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.proj.forward(hidden)?)
    }

    /// Sigmoid probabilities with every non-post position forced to zero.
    pub fn probabilities(&self, logits: &Tensor, post_mask: &Tensor) -> Result<Tensor, ModelError> {
        let p = candle_nn::ops::sigmoid(logits)?;
        Ok(p.broadcast_mul(&post_mask.unsqueeze(D::Minus1)?)?)
    }
}

/// Evaluation-mode token scores for one encoded pair.
pub fn extractor_forward(
    backend: &dyn EncoderBackend,
    head: &ExtractorHead,
    pair: &TokenizedPair,
) -> Result<TokenScores, ModelError> {
    let batch = Batch::new(
        &[pair],
        backend.tokenizer().pad_id(),
        false,
        backend.dtype(),
        backend.device(),
    )?;
    let hidden = backend.forward(&batch, None)?;
    if hidden.dims()[1] != pair.len() {
        return Err(ModelError::Shape(format!(
            "{} hidden vectors for {} tokens",
            hidden.dims()[1],
            pair.len()
        )));
    }
    let probs = head.probabilities(&head.logits(&hidden)?, &batch.post_mask)?;
    // (1, T, C) -> (C, T)
    let values = probs.squeeze(0)?.t()?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    Ok(TokenScores {
        method: head.method,
        types: head.scope.types(),
        values,
    })
}

/// Encoder plus symptom-query head sharing one variable map.
pub struct SqModel {
    pub encoder: TransformerEncoder,
    pub head: SqHead,
    pub varmap: VarMap,
}

impl SqModel {
    pub fn new(
        config: EncoderConfig,
        tokenizer: WordPieceTokenizer,
        mean_over_specials: bool,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let init_std = config.initializer_range;
        let hidden = config.hidden_size;
        let encoder = TransformerEncoder::new(config, tokenizer, vb.clone())?;
        let head = SqHead::new(hidden, mean_over_specials, vb)?;
        super::init_parameters(&varmap, seed, init_std)?;
        Ok(SqModel { encoder, head, varmap })
    }
}

/// Encoder plus extraction head sharing one variable map.
pub struct ExtractorModel {
    pub encoder: TransformerEncoder,
    pub head: ExtractorHead,
    pub varmap: VarMap,
}

impl ExtractorModel {
    pub fn new(
        config: EncoderConfig,
        tokenizer: WordPieceTokenizer,
        method: ExtractionMethod,
        scope: Scope,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let init_std = config.initializer_range;
        let hidden = config.hidden_size;
        let encoder = TransformerEncoder::new(config, tokenizer, vb.clone())?;
        let head = ExtractorHead::new(method, scope, hidden, vb)?;
        super::init_parameters(&varmap, seed, init_std)?;
        Ok(ExtractorModel { encoder, head, varmap })
    }

    pub fn scores(&self, pair: &TokenizedPair) -> Result<TokenScores, ModelError> {
        extractor_forward(&self.encoder, &self.head, pair)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AttributeType;
    use crate::fixtures;
    use crate::models::StubEncoder;

    fn stub() -> StubEncoder {
        let tok = WordPieceTokenizer::build(&["Mir ist übel und ich habe Fieber seit gestern"], 1);
        StubEncoder::new(tok, 8, 64, 5, DType::F32).unwrap()
    }

    fn zero_vars(vm: &VarMap) {
        for v in vm.all_vars() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
    }

    #[test]
    fn zero_scorer_gives_one_half() {
        let enc = stub();
        let vm = VarMap::new();
        let head = SqHead::new(8, false, VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu)).unwrap();
        zero_vars(&vm);
        let p = score_queries(&enc, &head, "Mir ist übel", &["übel", "Fieber seit gestern"]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.5).abs() < 1e-7));
    }

    #[test]
    fn outputs_are_probabilities_and_order_independent() {
        let enc = stub();
        let vm = VarMap::new();
        let head = SqHead::new(8, false, VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu)).unwrap();
        super::super::init_parameters(&vm, 9, 0.5).unwrap();
        let a = score_queries(&enc, &head, "ich habe Fieber", &["übel", "Fieber"]).unwrap();
        let b = score_queries(&enc, &head, "ich habe Fieber", &["Fieber", "übel"]).unwrap();
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!((a[0] - b[1]).abs() < 1e-6 && (a[1] - b[0]).abs() < 1e-6);
    }

    #[test]
    fn threshold_one_detects_nothing() {
        let enc = stub();
        let vm = VarMap::new();
        let head = SqHead::new(8, false, VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu)).unwrap();
        super::super::init_parameters(&vm, 2, 3.0).unwrap();
        let o = fixtures::ontology();
        assert!(classify_post(&enc, &head, &o, "Mir ist übel", 1.0).unwrap().is_empty());
        let all = classify_post(&enc, &head, &o, "Mir ist übel", 0.0).unwrap();
        assert_eq!(all.len(), o.len());
        assert!(all.windows(2).all(|w| w[0].probability >= w[1].probability));
    }

    #[test]
    fn extractor_shapes_and_masking() {
        let enc = stub();
        for (method, scope, channels) in [
            (ExtractionMethod::StartEnd, Scope::General, 10),
            (ExtractionMethod::StartEnd, Scope::Single(AttributeType::Time), 2),
            (ExtractionMethod::Contiguous, Scope::General, 5),
            (ExtractionMethod::Contiguous, Scope::Single(AttributeType::Action), 1),
        ] {
            let vm = VarMap::new();
            let head =
                ExtractorHead::new(method, scope, 8, VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu)).unwrap();
            zero_vars(&vm);
            assert_eq!(head.channels(), channels);
            let pair = encode_pair("Fieber", "ich habe Fieber seit gestern", enc.tokenizer(), 64).unwrap();
            let s = extractor_forward(&enc, &head, &pair).unwrap();
            assert_eq!(s.values.len(), channels);
            for ch in &s.values {
                assert_eq!(ch.len(), pair.len());
                for (k, &p) in ch.iter().enumerate() {
                    let expected = if pair.post_mask()[k] == 1.0 { 0.5 } else { 0.0 };
                    assert_eq!(p, expected);
                }
            }
        }
    }

    #[test]
    fn masking_is_idempotent() {
        let vm = VarMap::new();
        let head = ExtractorHead::new(
            ExtractionMethod::Contiguous,
            Scope::General,
            4,
            VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu),
        )
        .unwrap();
        let logits = Tensor::randn(0f32, 2.0, (1, 6, 5), &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[0f32, 1.0, 1.0, 0.0, 1.0, 0.0]], &Device::Cpu).unwrap();
        let once = head.probabilities(&logits, &mask).unwrap();
        let twice = once.broadcast_mul(&mask.unsqueeze(D::Minus1).unwrap()).unwrap();
        assert_eq!(
            once.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            twice.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn six_models_per_method() {
        let tok = WordPieceTokenizer::build(&["Mir ist übel"], 1);
        let mut cfg = EncoderConfig::reduced(tok.vocab_size());
        cfg.hidden_size = 8;
        cfg.num_attention_heads = 2;
        cfg.intermediate_size = 8;
        cfg.num_hidden_layers = 1;
        for method in ExtractionMethod::ALL {
            let models: Vec<_> = Scope::all()
                .into_iter()
                .map(|s| ExtractorModel::new(cfg.clone(), tok.clone(), method, s, 0).unwrap())
                .collect();
            assert_eq!(models.len(), 6);
            let dir = tempfile::tempdir().unwrap();
            for m in &models {
                let path = dir.path().join(format!("{}-{}.safetensors", method, m.head.scope));
                m.varmap.save(&path).unwrap();
                let mut fresh = ExtractorModel::new(cfg.clone(), tok.clone(), method, m.head.scope, 1).unwrap();
                fresh.varmap.load(&path).unwrap();
                let pair = encode_pair("übel", "Mir ist übel", &tok, 16).unwrap();
                assert_eq!(m.scores(&pair).unwrap(), fresh.scores(&pair).unwrap());
            }
        }
    }
}
