//! Multi-label baselines with a fixed output layer over the symptoms seen in
//! training: a TF-IDF MLP and an encoder with a sigmoid layer on the pooler.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::{dropout, Batch, DropoutRng, EncoderBackend, EncoderConfig, ModelError, TransformerEncoder};
use crate::corpus::{Corpus, Split};
use crate::encoding::{encode_single, TokenizedPair};
use crate::ontology::{SymptomId, SymptomOntology};
use crate::tokenizer::{pre_tokenize, WordPieceTokenizer};

pub const MLP_HIDDEN: usize = 256;

/// The output dimensions of a baseline: every symptom in the label closure
/// of some training post, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<SymptomId>,
}

impl LabelSpace {
    pub fn new(labels: impl IntoIterator<Item = SymptomId>) -> Self {
        let set: BTreeSet<SymptomId> = labels.into_iter().collect();
        LabelSpace {
            labels: set.into_iter().collect(),
        }
    }

    pub fn from_train(corpus: &Corpus, ontology: &SymptomOntology) -> Result<Self, ModelError> {
        let mut set = BTreeSet::new();
        for post in corpus.posts_in(Split::Train) {
            set.extend(
                ontology
                    .label_closure(post.gold_symptoms())
                    .map_err(|e| ModelError::Config(e.to_string()))?,
            );
        }
        Ok(LabelSpace {
            labels: set.into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[SymptomId] {
        &self.labels
    }

    pub fn index_of(&self, id: &SymptomId) -> Option<usize> {
        self.labels.binary_search(id).ok()
    }

    /// Multi-hot target vector; symptoms outside the space are ignored.
    pub fn encode(&self, symptoms: &BTreeSet<SymptomId>) -> Vec<f32> {
        let mut v = vec![0.0; self.labels.len()];
        for s in symptoms {
            if let Some(i) = self.index_of(s) {
                v[i] = 1.0;
            }
        }
        v
    }

    /// Labels whose probability exceeds `threshold`.
    pub fn decode(&self, probs: &[f64], threshold: f64) -> BTreeSet<SymptomId> {
        self.labels
            .iter()
            .zip(probs)
            .filter(|(_, &p)| p > threshold)
            .map(|(l, _)| l.clone())
            .collect()
    }
}

/// Word-level TF-IDF with smoothed idf `ln((1+n)/(1+df)) + 1` and L2
/// normalized rows. Words are lower-cased; punctuation is dropped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TfidfVectorizer {
    vocab: BTreeMap<String, usize>,
    idf: Vec<f64>,
}

fn terms(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    pre_tokenize(text)
        .into_iter()
        .map(|w| chars[w.start..w.end].iter().collect::<String>().to_lowercase())
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .collect()
}

impl TfidfVectorizer {
    pub fn fit(texts: &[&str]) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            let unique: BTreeSet<String> = terms(text).into_iter().collect();
            for t in unique {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let n = texts.len() as f64;
        let mut vocab = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (i, (term, d)) in df.into_iter().enumerate() {
            vocab.insert(term, i);
            idf.push(((1.0 + n) / (1.0 + d as f64)).ln() + 1.0);
        }
        TfidfVectorizer { vocab, idf }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Feature row for `text`; all zeros when no word is in the vocabulary.
    pub fn transform(&self, text: &str) -> Result<Vec<f32>, ModelError> {
        if self.vocab.is_empty() {
            return Err(ModelError::Unfit);
        }
        let mut row = vec![0f64; self.vocab.len()];
        for t in terms(text) {
            if let Some(&i) = self.vocab.get(&t) {
                row[i] += 1.0;
            }
        }
        for (x, idf) in row.iter_mut().zip(&self.idf) {
            *x *= idf;
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(row.into_iter().map(|x| x as f32).collect())
    }
}

/// One hidden ReLU layer followed by a linear output (sigmoid applied by
/// the caller or the loss).
#[derive(Debug, Clone)]
pub struct MlpBaseline {
    hidden: Linear,
    out: Linear,
}

impl MlpBaseline {
    pub fn new(input: usize, hidden: usize, output: usize, vb: VarBuilder) -> Result<Self, ModelError> {
        Ok(MlpBaseline {
            hidden: linear(input, hidden, vb.pp("mlp").pp("hidden"))?,
            out: linear(hidden, output, vb.pp("mlp").pp("out"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.out.forward(&self.hidden.forward(x)?.relu()?)?)
    }
}

pub struct TfidfMlpBaseline {
    pub vectorizer: TfidfVectorizer,
    pub labels: LabelSpace,
    pub mlp: MlpBaseline,
    pub varmap: VarMap,
}

impl TfidfMlpBaseline {
    pub fn new(vectorizer: TfidfVectorizer, labels: LabelSpace, seed: u64) -> Result<Self, ModelError> {
        if vectorizer.is_empty() {
            return Err(ModelError::Unfit);
        }
        if labels.is_empty() {
            return Err(ModelError::Config("label space is empty".into()));
        }
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let mlp = MlpBaseline::new(vectorizer.len(), MLP_HIDDEN, labels.len(), vb)?;
        super::init_parameters(&varmap, seed, 0.05)?;
        Ok(TfidfMlpBaseline {
            vectorizer,
            labels,
            mlp,
            varmap,
        })
    }

    pub fn features(&self, texts: &[&str]) -> Result<Tensor, ModelError> {
        let rows = texts
            .iter()
            .map(|t| self.vectorizer.transform(t))
            .collect::<Result<Vec<_>, _>>()?;
        let flat: Vec<f32> = rows.concat();
        Ok(Tensor::from_vec(
            flat,
            (texts.len(), self.vectorizer.len()),
            &Device::Cpu,
        )?)
    }

    /// Logits `(B, |labels|)`.
    pub fn logits(&self, texts: &[&str]) -> Result<Tensor, ModelError> {
        self.mlp.forward(&self.features(texts)?)
    }

    /// Probability per label, in label-space order.
    pub fn predict(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        let p = candle_nn::ops::sigmoid(&self.logits(&[text])?)?;
        Ok(p.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?)
    }
}

pub struct EncoderSigmoidBaseline {
    pub encoder: TransformerEncoder,
    pub labels: LabelSpace,
    pooler: Linear,
    out: Linear,
    pub varmap: VarMap,
}

impl EncoderSigmoidBaseline {
    pub fn new(
        config: EncoderConfig,
        tokenizer: WordPieceTokenizer,
        labels: LabelSpace,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::Config("label space is empty".into()));
        }
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let h = config.hidden_size;
        let std = config.initializer_range;
        let encoder = TransformerEncoder::new(config, tokenizer, vb.clone())?;
        let pooler = linear(h, h, vb.pp("pooler").pp("dense"))?;
        let out = linear(h, labels.len(), vb.pp("classifier"))?;
        super::init_parameters(&varmap, seed, std)?;
        Ok(EncoderSigmoidBaseline {
            encoder,
            labels,
            pooler,
            out,
            varmap,
        })
    }

    pub fn encode(&self, text: &str) -> Result<TokenizedPair, ModelError> {
        Ok(encode_single(text, self.encoder.tokenizer(), self.encoder.max_len())?)
    }

    /// Logits `(B, |labels|)` from the pooled `[CLS]` state.
    pub fn logits(&self, pairs: &[&TokenizedPair], mut rng: DropoutRng<'_>) -> Result<Tensor, ModelError> {
        let batch = Batch::new(
            pairs,
            self.encoder.tokenizer().pad_id(),
            false,
            DType::F32,
            &Device::Cpu,
        )?;
        let hidden = self.encoder.forward(&batch, rng.as_deref_mut())?;
        let cls = hidden.narrow(1, 0, 1)?.squeeze(1)?;
        let pooled = self.pooler.forward(&cls)?.tanh()?;
        let pooled = dropout(&pooled, self.encoder.dropout(), rng)?;
        Ok(self.out.forward(&pooled)?)
    }

    pub fn predict(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        let pair = self.encode(text)?;
        let p = candle_nn::ops::sigmoid(&self.logits(&[&pair], None)?)?;
        Ok(p.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tfidf_matches_hand_computation() {
        let docs = ["Bauch tut weh", "Kopf tut weh", "Bauch Bauch"];
        let v = TfidfVectorizer::fit(&docs);
        assert_eq!(v.len(), 4);
        let row = v.transform("Bauch Bauch").unwrap();
        // Only "bauch" is present, so the normalized row is a unit vector.
        let i = v.vocab["bauch"];
        assert!((row[i] - 1.0).abs() < 1e-6);
        let row = v.transform("Kopf tut").unwrap();
        let idf_kopf = (4.0f64 / 2.0).ln() + 1.0;
        let idf_tut = (4.0f64 / 3.0).ln() + 1.0;
        let norm = (idf_kopf.powi(2) + idf_tut.powi(2)).sqrt();
        assert!((row[v.vocab["kopf"]] as f64 - idf_kopf / norm).abs() < 1e-6);
        assert!((row[v.vocab["tut"]] as f64 - idf_tut / norm).abs() < 1e-6);
    }

    #[test]
    fn unseen_words_collapse_to_constant_output() {
        let v = TfidfVectorizer::fit(&["Bauch tut weh"]);
        assert!(v.transform("völlig unbekannt").unwrap().iter().all(|&x| x == 0.0));
        let labels = LabelSpace::new([SymptomId::new("a"), SymptomId::new("b")]);
        let m = TfidfMlpBaseline::new(v, labels, 1).unwrap();
        let p1 = m.predict("völlig unbekannt").unwrap();
        let p2 = m.predict("ganz anders").unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.len(), 2);
    }

    #[test]
    fn unfit_vectorizer_is_an_error() {
        assert!(matches!(
            TfidfVectorizer::default().transform("x"),
            Err(ModelError::Unfit)
        ));
    }

    #[test]
    fn label_space_round_trip() {
        let ls = LabelSpace::new(["c", "a", "b", "a"].map(SymptomId::new));
        assert_eq!(ls.len(), 3);
        let gold: BTreeSet<SymptomId> = ["a", "c", "zzz"].map(SymptomId::new).into();
        let v = ls.encode(&gold);
        assert_eq!(v, vec![1.0, 0.0, 1.0]);
        let probs: Vec<f64> = v.iter().map(|&x| x as f64 * 0.9).collect();
        let back = ls.decode(&probs, 0.5);
        assert_eq!(back, ["a", "c"].map(SymptomId::new).into());
    }

    #[test]
    fn encoder_baseline_output_dimension() {
        let tok = WordPieceTokenizer::build(&["Mir ist übel"], 1);
        let mut cfg = EncoderConfig::reduced(tok.vocab_size());
        cfg.hidden_size = 8;
        cfg.num_attention_heads = 2;
        cfg.intermediate_size = 8;
        let labels = LabelSpace::new(["x", "y", "z"].map(SymptomId::new));
        let m = EncoderSigmoidBaseline::new(cfg, tok, labels, 0).unwrap();
        let p = m.predict("Mir ist übel").unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }
}
