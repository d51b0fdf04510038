//! Training harness: Adam with gradient accumulation to an effective batch
//! of 32, periodic validation, early stopping, curriculum advancement and
//! best-checkpoint selection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::corpus::{AnnotatedPost, AttributeType, Corpus, CorpusError, Split};
use crate::decoding::{DecodeError, DecoderConfig, ExtractionMethod};
use crate::encoding::{align_spans_to_tokens, encode_pair, EncodingError, TokenTargets, TokenizedPair};
use crate::metrics::{classification_metrics, token_extraction_metrics, EvalReport, InstanceSpans, MetricsError};
use crate::models::{
    class_balance_weights, score_pairs, sq_logits, weighted_bce_with_logits, EncoderBackend, EncoderConfig,
    EncoderSigmoidBaseline, ExtractorModel, LabelSpace, LossWeights, ModelError, PretrainedEncoder, Scope, SqModel,
    TfidfMlpBaseline, TfidfVectorizer,
};
use crate::ontology::{OntologyError, SymptomId, SymptomOntology};
use crate::sampling::{
    curriculum_schedule, positives_for_post, sample_negatives, ClassificationExample, CurriculumConfig,
    CurriculumStage, SamplingError,
};
use crate::tokenizer::WordPieceTokenizer;

/// Default effective batch size for fine-tuning.
pub const EFFECTIVE_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("the train split is empty")]
    EmptyTrainSplit,
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeightMode {
    /// `w_pos = N/(2·N_pos)`, `w_neg = N/(2·N_neg)` per channel on the train split.
    Balanced,
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// Linear learning-rate warmup over this many optimizer steps.
    pub warmup_steps: usize,
    /// Effective batch size (examples per optimizer step).
    pub batch_size: usize,
    /// Examples per forward/backward pass; `batch_size / micro_batch_size`
    /// passes are accumulated per update.
    pub micro_batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps between validations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Encoder dropout for classification; `None` keeps the encoder default.
    pub classification_dropout: Option<f32>,
    pub extraction_dropout: f32,
    pub seed: u64,
    pub loss_weights: LossWeightMode,
    /// Probability above which a symptom counts as detected.
    pub threshold: f64,
    pub max_len: usize,
    /// Positives cover the label closure (otherwise only gold symptoms).
    pub closure_positives: bool,
    pub mean_over_specials: bool,
    pub curriculum: CurriculumConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 3e-5,
            warmup_steps: 0,
            batch_size: EFFECTIVE_BATCH,
            micro_batch_size: EFFECTIVE_BATCH,
            epochs: 40,
            eval_every: 50,
            patience: 20,
            classification_dropout: None,
            extraction_dropout: 0.2,
            seed: 0,
            loss_weights: LossWeightMode::Balanced,
            threshold: 0.5,
            max_len: 128,
            closure_positives: true,
            mean_over_specials: false,
            curriculum: CurriculumConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let err = |m: &str| Err(TrainingError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning rate must be positive");
        }
        if self.batch_size == 0
            || self.micro_batch_size == 0
            || self.epochs == 0
            || self.eval_every == 0
            || self.patience == 0
        {
            return err("batch sizes, epochs, eval_every and patience must be positive");
        }
        if !self.batch_size.is_multiple_of(self.micro_batch_size) {
            return err("batch size must be a multiple of the micro-batch size");
        }
        if !(0.0..1.0).contains(&self.extraction_dropout)
            || self.classification_dropout.is_some_and(|p| !(0.0..1.0).contains(&p))
        {
            return err("dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return err("threshold must lie in [0, 1]");
        }
        if self.max_len < 8 {
            return err("max_len must be at least 8");
        }
        self.curriculum.validate()?;
        Ok(())
    }

    pub fn accumulation_steps(&self) -> usize {
        self.batch_size / self.micro_batch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    TfidfMlp,
    EncoderSigmoid,
    SymptomQuery,
}

/// One of the six classification setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClassifierVariant {
    pub kind: ClassifierKind,
    pub curriculum: bool,
    pub augmented: bool,
}

impl ClassifierVariant {
    pub const fn new(kind: ClassifierKind, curriculum: bool, augmented: bool) -> Self {
        ClassifierVariant {
            kind,
            curriculum,
            augmented,
        }
    }

    pub fn all() -> [ClassifierVariant; 6] {
        use ClassifierKind::*;
        [
            Self::new(TfidfMlp, false, false),
            Self::new(EncoderSigmoid, false, false),
            Self::new(SymptomQuery, false, false),
            Self::new(SymptomQuery, true, false),
            Self::new(SymptomQuery, false, true),
            Self::new(SymptomQuery, true, true),
        ]
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.kind != ClassifierKind::SymptomQuery && (self.curriculum || self.augmented) {
            return Err(TrainingError::VariantMismatch(format!(
                "{self}: curriculum and augmented descriptions act on symptom queries, which baselines lack"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ClassifierVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.kind {
            ClassifierKind::TfidfMlp => "tfidf_mlp",
            ClassifierKind::EncoderSigmoid => "encoder_sigmoid",
            ClassifierKind::SymptomQuery => "sq",
        };
        f.write_str(base)?;
        if self.curriculum {
            f.write_str("+cl")?;
        }
        if self.augmented {
            f.write_str("+ad")?;
        }
        Ok(())
    }
}

impl FromStr for ClassifierVariant {
    type Err = TrainingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        let mut parts = lower.split('+');
        let kind = match parts.next().unwrap_or_default() {
            "tfidf_mlp" | "tfidf" => ClassifierKind::TfidfMlp,
            "encoder_sigmoid" | "bert_sigmoid" => ClassifierKind::EncoderSigmoid,
            "sq" => ClassifierKind::SymptomQuery,
            other => return Err(TrainingError::Config(format!("unknown classifier variant `{other}`"))),
        };
        let mut v = ClassifierVariant::new(kind, false, false);
        for p in parts {
            match p {
                "cl" => v.curriculum = true,
                "ad" => v.augmented = true,
                other => return Err(TrainingError::Config(format!("unknown variant modifier `{other}`"))),
            }
        }
        v.validate()?;
        Ok(v)
    }
}

impl Serialize for ClassifierVariant {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ClassifierVariant {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Where encoder weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderSource {
    /// Random initialization; the vocabulary is built from the corpus and
    /// `vocab_size` is overwritten accordingly.
    Scratch(EncoderConfig),
    /// `cache_dir/<name>/` with `config.json`, `vocab.txt` and
    /// `model.safetensors`.
    Pretrained { cache_dir: PathBuf, name: String },
}

/// Tokenizer, encoder configuration and (optionally) checkpoint tensors.
pub struct PreparedEncoder {
    pub config: EncoderConfig,
    pub tokenizer: WordPieceTokenizer,
    pub pretrained: Option<PretrainedEncoder>,
}

/// Vocabulary from train-split posts, augmentation entries and every
/// ontology description.
pub fn build_vocabulary(corpus: &Corpus, ontology: &SymptomOntology) -> WordPieceTokenizer {
    let mut texts: Vec<&str> = corpus.posts_in(Split::Train).map(|p| p.text()).collect();
    texts.extend(ontology.nodes().map(|n| n.description.as_str()));
    texts.extend(corpus.augmentation.values().flatten().map(String::as_str));
    WordPieceTokenizer::build(&texts, 1)
}

pub fn prepare_encoder(
    source: &EncoderSource,
    corpus: &Corpus,
    ontology: &SymptomOntology,
) -> Result<PreparedEncoder, TrainingError> {
    match source {
        EncoderSource::Scratch(cfg) => {
            let tokenizer = build_vocabulary(corpus, ontology);
            let mut config = cfg.clone();
            config.vocab_size = tokenizer.vocab_size();
            Ok(PreparedEncoder {
                config,
                tokenizer,
                pretrained: None,
            })
        }
        EncoderSource::Pretrained { cache_dir, name } => {
            let p = crate::models::load_pretrained(cache_dir, name, &Device::Cpu)?;
            Ok(PreparedEncoder {
                config: p.config.clone(),
                tokenizer: p.tokenizer.clone(),
                pretrained: Some(p),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Optimizer steps taken so far.
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub metric: f64,
    /// Curriculum stage index, for curriculum runs.
    pub stage: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochLimit,
    EarlyStopping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRunRecord {
    pub history: Vec<EvalPoint>,
    pub best_index: usize,
    pub best_metric: f64,
    pub stop_reason: StopReason,
    pub optimizer_steps: usize,
    /// What `eval_every` counts.
    pub step_unit: String,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainingRunRecord {
    pub fn best(&self) -> &EvalPoint {
        &self.history[self.best_index]
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), TrainingError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| TrainingError::Config(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

/// Index of the first maximum.
pub fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &m) in history.iter().enumerate() {
        if best.is_none_or(|b| m > history[b]) {
            best = Some(i);
        }
    }
    best
}

/// True once `patience` consecutive evaluations failed to exceed the best
/// metric seen before them.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    match best_index(history) {
        Some(b) => history.len() - 1 - b >= patience,
        None => false,
    }
}

type Snapshot = HashMap<String, Tensor>;

fn snapshot(varmap: &VarMap) -> Result<Snapshot, TrainingError> {
    let data = varmap.data().lock().expect("var map lock");
    data.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
        .collect()
}

fn restore(varmap: &VarMap, snap: &Snapshot) -> Result<(), TrainingError> {
    let data = varmap.data().lock().expect("var map lock");
    for (k, v) in data.iter() {
        if let Some(t) = snap.get(k) {
            v.set(t)?;
        }
    }
    Ok(())
}

fn accumulate(total: &mut Option<GradStore>, grads: GradStore, vars: &[Var]) -> Result<(), TrainingError> {
    match total {
        None => *total = Some(grads),
        Some(acc) => {
            for v in vars {
                if let Some(g) = grads.get(v) {
                    let sum = match acc.get(v) {
                        Some(a) => (a + g)?,
                        None => g.clone(),
                    };
                    acc.insert(v, sum);
                }
            }
        }
    }
    Ok(())
}

fn scale_grads(store: &mut GradStore, vars: &[Var], factor: f64) -> Result<(), TrainingError> {
    for v in vars {
        if let Some(g) = store.get(v) {
            let scaled = (g * factor)?;
            store.insert(v, scaled);
        }
    }
    Ok(())
}

/// Generic optimization loop shared by all models.
///
/// `epoch_data` yields the examples of an epoch (plus its curriculum stage),
/// `loss` the mean loss of one micro-batch and `evaluate` the validation
/// metric (higher is better).
fn drive<T>(
    cfg: &TrainingConfig,
    varmap: &VarMap,
    checkpoint_dir: Option<&Path>,
    mut epoch_data: impl FnMut(usize, &mut ChaCha8Rng) -> Result<(Vec<T>, Option<usize>), TrainingError>,
    mut loss: impl FnMut(&[&T], &mut ChaCha8Rng) -> Result<Tensor, TrainingError>,
    mut evaluate: impl FnMut() -> Result<f64, TrainingError>,
) -> Result<TrainingRunRecord, TrainingError> {
    cfg.validate()?;
    let vars = varmap.all_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let accumulation = cfg.accumulation_steps();

    let mut history: Vec<EvalPoint> = Vec::new();
    let mut metrics: Vec<f64> = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut step = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stop_reason = StopReason::EpochLimit;
    let mut last_eval_step = usize::MAX;
    let mut stage = None;
    let mut epoch = 0;

    let mut record_eval = |step: usize,
                           epoch: usize,
                           stage: Option<usize>,
                           loss_sum: &mut f64,
                           loss_count: &mut usize,
                           history: &mut Vec<EvalPoint>,
                           metrics: &mut Vec<f64>,
                           best: &mut Option<Snapshot>|
     -> Result<bool, TrainingError> {
        let metric = evaluate()?;
        let train_loss = if *loss_count > 0 {
            *loss_sum / *loss_count as f64
        } else {
            f64::NAN
        };
        *loss_sum = 0.0;
        *loss_count = 0;
        info!(step, epoch, train_loss, metric, "evaluation");
        history.push(EvalPoint {
            step,
            epoch,
            train_loss,
            metric,
            stage,
        });
        metrics.push(metric);
        if best_index(metrics) == Some(metrics.len() - 1) {
            *best = Some(snapshot(varmap)?);
        }
        Ok(early_stop(metrics, cfg.patience))
    };

    'epochs: while epoch < cfg.epochs {
        let (mut examples, st) = epoch_data(epoch, &mut data_rng)?;
        stage = st;
        if examples.is_empty() {
            return Err(TrainingError::EmptyTrainSplit);
        }
        examples.shuffle(&mut data_rng);
        for batch in examples.chunks(cfg.batch_size) {
            let mut grads: Option<GradStore> = None;
            let micro: Vec<&[T]> = batch.chunks(cfg.micro_batch_size).collect();
            for m in &micro {
                let refs: Vec<&T> = m.iter().collect();
                let l = loss(&refs, &mut dropout_rng)?;
                let value = l.to_dtype(DType::F64)?.to_vec0::<f64>()?;
                if !value.is_finite() {
                    return Err(TrainingError::Config(format!("non-finite loss at step {step}")));
                }
                // Weight each micro-batch by its share of the batch.
                let share = m.len() as f64 / batch.len() as f64;
                loss_sum += value * share;
                let g = (l * share)?.backward()?;
                accumulate(&mut grads, g, &vars)?;
            }
            if let Some(mut g) = grads {
                if micro.len() != accumulation && micro.len() > 1 {
                    // Partial final batch: shares already sum to one.
                    scale_grads(&mut g, &vars, 1.0)?;
                }
                if cfg.warmup_steps > 0 {
                    let scale = ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0);
                    opt.set_learning_rate(cfg.learning_rate * scale);
                }
                opt.step(&g)?;
            }
            loss_count += 1;
            step += 1;
            if step.is_multiple_of(cfg.eval_every) {
                last_eval_step = step;
                let stop = record_eval(
                    step,
                    epoch,
                    stage,
                    &mut loss_sum,
                    &mut loss_count,
                    &mut history,
                    &mut metrics,
                    &mut best,
                )?;
                if stop {
                    stop_reason = StopReason::EarlyStopping;
                    break 'epochs;
                }
            }
        }
        debug!(epoch, step, "epoch finished");
        epoch += 1;
    }
    if last_eval_step != step {
        let final_epoch = epoch.min(cfg.epochs.saturating_sub(1));
        record_eval(
            step,
            final_epoch,
            stage,
            &mut loss_sum,
            &mut loss_count,
            &mut history,
            &mut metrics,
            &mut best,
        )?;
    }

    let last = snapshot(varmap)?;
    let best_idx = best_index(&metrics).expect("at least one evaluation");
    let best_snap = best.expect("best snapshot is taken at the first evaluation");
    let (mut best_path, mut last_path) = (None, None);
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let b = dir.join("best.safetensors");
        let l = dir.join("last.safetensors");
        candle_core::safetensors::save(&best_snap, &b)?;
        candle_core::safetensors::save(&last, &l)?;
        best_path = Some(b);
        last_path = Some(l);
    }
    restore(varmap, &best_snap)?;
    Ok(TrainingRunRecord {
        best_metric: metrics[best_idx],
        best_index: best_idx,
        history,
        stop_reason,
        optimizer_steps: step,
        step_unit: "optimizer_steps".into(),
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

/// Options for a classification run beyond the hyperparameters.
#[derive(Debug, Clone, Default)]
pub struct ClassifierRunOptions {
    /// Symptoms never used as queries or labels during training.
    pub exclude: BTreeSet<SymptomId>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// A trained symptom classifier of any variant.
pub enum TrainedClassifier {
    SymptomQuery(SqModel),
    TfidfMlp(TfidfMlpBaseline),
    EncoderSigmoid(EncoderSigmoidBaseline),
}

impl TrainedClassifier {
    pub fn varmap(&self) -> &VarMap {
        match self {
            TrainedClassifier::SymptomQuery(m) => &m.varmap,
            TrainedClassifier::TfidfMlp(m) => &m.varmap,
            TrainedClassifier::EncoderSigmoid(m) => &m.varmap,
        }
    }

    /// Raw detections with probabilities (no closure completion).
    pub fn detect(
        &self,
        ontology: &SymptomOntology,
        text: &str,
        threshold: f64,
    ) -> Result<Vec<(SymptomId, f64)>, TrainingError> {
        let out = match self {
            TrainedClassifier::SymptomQuery(m) => {
                crate::models::classify_post(&m.encoder, &m.head, ontology, text, threshold)?
                    .into_iter()
                    .map(|c| (c.symptom_id, c.probability))
                    .collect()
            }
            TrainedClassifier::TfidfMlp(m) => zip_labels(&m.labels, m.predict(text)?, threshold),
            TrainedClassifier::EncoderSigmoid(m) => zip_labels(&m.labels, m.predict(text)?, threshold),
        };
        Ok(out)
    }

    /// Closure-completed detected set.
    pub fn predict_closure(
        &self,
        ontology: &SymptomOntology,
        text: &str,
        threshold: f64,
    ) -> Result<BTreeSet<SymptomId>, TrainingError> {
        let raw = self.detect(ontology, text, threshold)?;
        Ok(ontology.label_closure(raw.iter().map(|(s, _)| s))?)
    }
}

fn zip_labels(labels: &LabelSpace, probs: Vec<f64>, threshold: f64) -> Vec<(SymptomId, f64)> {
    let mut v: Vec<(SymptomId, f64)> = labels
        .labels()
        .iter()
        .cloned()
        .zip(probs)
        .filter(|(_, p)| *p > threshold)
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// Micro-averaged report over closure-completed predictions and gold sets.
pub fn evaluate_classifier(
    model: &TrainedClassifier,
    ontology: &SymptomOntology,
    posts: &[&AnnotatedPost],
    threshold: f64,
) -> Result<EvalReport, TrainingError> {
    let mut pred = BTreeMap::new();
    let mut gold = BTreeMap::new();
    for p in posts {
        pred.insert(
            p.id().to_string(),
            model.predict_closure(ontology, p.text(), threshold)?,
        );
        gold.insert(p.id().to_string(), ontology.label_closure(p.gold_symptoms())?);
    }
    Ok(classification_metrics(&pred, &gold)?)
}

fn train_posts(corpus: &Corpus) -> Result<Vec<&AnnotatedPost>, TrainingError> {
    let posts: Vec<&AnnotatedPost> = corpus.posts_in(Split::Train).collect();
    if posts.is_empty() {
        return Err(TrainingError::EmptyTrainSplit);
    }
    Ok(posts)
}

/// Validation posts, falling back to the train split when there are none.
fn validation_posts(corpus: &Corpus) -> Vec<&AnnotatedPost> {
    let val: Vec<&AnnotatedPost> = corpus.posts_in(Split::Validation).collect();
    if val.is_empty() {
        corpus.posts_in(Split::Train).collect()
    } else {
        val
    }
}

fn drop_excluded<'a>(posts: Vec<&'a AnnotatedPost>, exclude: &BTreeSet<SymptomId>) -> Vec<&'a AnnotatedPost> {
    if exclude.is_empty() {
        return posts;
    }
    posts
        .into_iter()
        .filter(|p| p.gold_symptoms().all(|s| !exclude.contains(s)))
        .collect()
}

/// Trains one classification variant and returns the best-validation model.
///
/// Posts mentioning an excluded symptom are removed from training, and the
/// excluded symptoms are never sampled as negatives, so they stay unseen.
pub fn train_classifier(
    cfg: &TrainingConfig,
    corpus: &Corpus,
    ontology: &SymptomOntology,
    variant: ClassifierVariant,
    source: &EncoderSource,
    options: &ClassifierRunOptions,
) -> Result<(TrainedClassifier, TrainingRunRecord), TrainingError> {
    cfg.validate()?;
    variant.validate()?;
    let train = drop_excluded(train_posts(corpus)?, &options.exclude);
    if train.is_empty() {
        return Err(TrainingError::EmptyTrainSplit);
    }
    let val = validation_posts(corpus);
    let ckpt = options.checkpoint_dir.as_deref();
    info!(%variant, train = train.len(), validation = val.len(), "training classifier");
    match variant.kind {
        ClassifierKind::SymptomQuery => train_sq(cfg, corpus, ontology, variant, source, options, &train, &val, ckpt),
        ClassifierKind::TfidfMlp => {
            let labels = label_space(ontology, &train, &options.exclude)?;
            let texts: Vec<&str> = train.iter().map(|p| p.text()).collect();
            let model = TfidfMlpBaseline::new(TfidfVectorizer::fit(&texts), labels, cfg.seed)?;
            let targets = baseline_targets(&model.labels, ontology, &train)?;
            let examples: Vec<(usize, &str)> = train.iter().enumerate().map(|(i, p)| (i, p.text())).collect();
            let n_labels = model.labels.len();
            let wrapped = TrainedClassifier::TfidfMlp(model);
            let TrainedClassifier::TfidfMlp(m) = &wrapped else {
                unreachable!()
            };
            let record = drive(
                cfg,
                &m.varmap,
                ckpt,
                |_, _| Ok((examples.clone(), None)),
                |batch, _| {
                    let texts: Vec<&str> = batch.iter().map(|(_, t)| *t).collect();
                    let logits = m.logits(&texts)?;
                    let y = target_tensor(&targets, batch.iter().map(|(i, _)| *i), n_labels)?;
                    let mask = Tensor::ones(batch.len(), DType::F32, &Device::Cpu)?;
                    Ok(weighted_bce_with_logits(
                        &logits,
                        &y,
                        &mask,
                        &vec![LossWeights::default(); n_labels],
                    )?)
                },
                || Ok(evaluate_classifier(&wrapped, ontology, &val, cfg.threshold)?.micro.f1),
            )?;
            Ok((wrapped, record))
        }
        ClassifierKind::EncoderSigmoid => {
            let labels = label_space(ontology, &train, &options.exclude)?;
            let prepared = prepare_encoder(source, corpus, ontology)?;
            let mut model = EncoderSigmoidBaseline::new(prepared.config.clone(), prepared.tokenizer, labels, cfg.seed)?;
            if let Some(p) = &prepared.pretrained {
                p.apply(&model.varmap)?;
            }
            if let Some(p) = cfg.classification_dropout {
                model.encoder.set_dropout(p);
            }
            model.encoder = model.encoder.clone().with_max_len(cfg.max_len);
            let targets = baseline_targets(&model.labels, ontology, &train)?;
            let pairs: Vec<TokenizedPair> = train.iter().map(|p| model.encode(p.text())).collect::<Result<_, _>>()?;
            let n_labels = model.labels.len();
            let indices: Vec<usize> = (0..train.len()).collect();
            let wrapped = TrainedClassifier::EncoderSigmoid(model);
            let TrainedClassifier::EncoderSigmoid(m) = &wrapped else {
                unreachable!()
            };
            let record = drive(
                cfg,
                &m.varmap,
                ckpt,
                |_, _| Ok((indices.clone(), None)),
                |batch, rng| {
                    let refs: Vec<&TokenizedPair> = batch.iter().map(|&&i| &pairs[i]).collect();
                    let logits = m.logits(&refs, Some(rng))?;
                    let y = target_tensor(&targets, batch.iter().map(|&&i| i), n_labels)?;
                    let mask = Tensor::ones(batch.len(), DType::F32, &Device::Cpu)?;
                    Ok(weighted_bce_with_logits(
                        &logits,
                        &y,
                        &mask,
                        &vec![LossWeights::default(); n_labels],
                    )?)
                },
                || Ok(evaluate_classifier(&wrapped, ontology, &val, cfg.threshold)?.micro.f1),
            )?;
            Ok((wrapped, record))
        }
    }
}

fn label_space(
    ontology: &SymptomOntology,
    train: &[&AnnotatedPost],
    exclude: &BTreeSet<SymptomId>,
) -> Result<LabelSpace, TrainingError> {
    let mut set = BTreeSet::new();
    for p in train {
        set.extend(ontology.label_closure(p.gold_symptoms())?);
    }
    Ok(LabelSpace::new(set.into_iter().filter(|s| !exclude.contains(s))))
}

fn baseline_targets(
    labels: &LabelSpace,
    ontology: &SymptomOntology,
    posts: &[&AnnotatedPost],
) -> Result<Vec<Vec<f32>>, TrainingError> {
    posts
        .iter()
        .map(|p| Ok(labels.encode(&ontology.label_closure(p.gold_symptoms())?)))
        .collect()
}

fn target_tensor(rows: &[Vec<f32>], idx: impl Iterator<Item = usize>, width: usize) -> Result<Tensor, TrainingError> {
    let flat: Vec<f32> = idx.flat_map(|i| rows[i].iter().copied()).collect();
    let n = flat.len() / width.max(1);
    Ok(Tensor::from_vec(flat, (n, width), &Device::Cpu)?)
}

#[allow(clippy::too_many_arguments)]
fn train_sq(
    cfg: &TrainingConfig,
    corpus: &Corpus,
    ontology: &SymptomOntology,
    variant: ClassifierVariant,
    source: &EncoderSource,
    options: &ClassifierRunOptions,
    train: &[&AnnotatedPost],
    val: &[&AnnotatedPost],
    ckpt: Option<&Path>,
) -> Result<(TrainedClassifier, TrainingRunRecord), TrainingError> {
    let prepared = prepare_encoder(source, corpus, ontology)?;
    let mut model = SqModel::new(
        prepared.config.clone(),
        prepared.tokenizer,
        cfg.mean_over_specials,
        cfg.seed,
    )?;
    if let Some(p) = &prepared.pretrained {
        p.apply(&model.varmap)?;
    }
    if let Some(p) = cfg.classification_dropout {
        model.encoder.set_dropout(p);
    }
    model.encoder = model.encoder.clone().with_max_len(cfg.max_len);

    let pool = &corpus.augmentation;
    let stages = if variant.curriculum {
        cfg.curriculum.stages()
    } else {
        vec![CurriculumStage::FINAL]
    };
    let fractions = cfg.curriculum.epoch_fractions.clone();
    // Encoded pairs are cached by (description, post).
    let mut cache: HashMap<(String, String), TokenizedPair> = HashMap::new();
    let tokenizer = model.encoder.tokenizer().clone();
    let max_len = model.encoder.max_len();
    let mut encode = |ex: &ClassificationExample, text: &str| -> Result<TokenizedPair, TrainingError> {
        let key = (ex.description.clone(), ex.post_id.clone());
        if let Some(p) = cache.get(&key) {
            return Ok(p.clone());
        }
        let p = encode_pair(&ex.description, text, &tokenizer, max_len)?;
        cache.insert(key, p.clone());
        Ok(p)
    };

    let wrapped = TrainedClassifier::SymptomQuery(model);
    let TrainedClassifier::SymptomQuery(m) = &wrapped else {
        unreachable!()
    };
    let val_pairs = validation_pairs(ontology, val, &tokenizer, max_len)?;
    let record = drive(
        cfg,
        &m.varmap,
        ckpt,
        |epoch, rng| {
            let stage = curriculum_schedule(epoch, cfg.epochs, &stages, &fractions)?;
            let mut out = Vec::new();
            for post in train {
                let pos = positives_for_post(post, ontology, pool, variant.augmented, cfg.closure_positives)?;
                let neg = sample_negatives(
                    post,
                    ontology,
                    stage,
                    pos.len(),
                    pool,
                    variant.augmented,
                    &options.exclude,
                    rng,
                )?;
                for ex in pos.iter().chain(&neg) {
                    out.push((encode(ex, post.text())?, ex.label as f32));
                }
            }
            Ok((out, variant.curriculum.then_some(stage.index)))
        },
        |batch, rng| {
            let pairs: Vec<&TokenizedPair> = batch.iter().map(|(p, _)| p).collect();
            let b = crate::models::Batch::new(
                &pairs,
                tokenizer.pad_id(),
                m.head.mean_over_specials,
                DType::F32,
                &Device::Cpu,
            )?;
            let logits = sq_logits(&m.encoder, &m.head, &b, Some(rng))?.unsqueeze(1)?;
            let y: Vec<f32> = batch.iter().map(|(_, y)| *y).collect();
            let y = Tensor::from_vec(y, (batch.len(), 1), &Device::Cpu)?;
            let mask = Tensor::ones(batch.len(), DType::F32, &Device::Cpu)?;
            Ok(weighted_bce_with_logits(&logits, &y, &mask, &[LossWeights::default()])?)
        },
        || sq_validation_f1(m, ontology, &val_pairs, cfg.threshold),
    )?;
    Ok((wrapped, record))
}

/// Every (post, symptom) query of the validation posts, encoded once.
struct ValidationPairs {
    posts: Vec<(String, BTreeSet<SymptomId>)>,
    symptoms: Vec<SymptomId>,
    /// `pairs[post * symptoms + symptom]`.
    pairs: Vec<TokenizedPair>,
}

fn validation_pairs(
    ontology: &SymptomOntology,
    posts: &[&AnnotatedPost],
    tokenizer: &WordPieceTokenizer,
    max_len: usize,
) -> Result<ValidationPairs, TrainingError> {
    let symptoms: Vec<SymptomId> = ontology.ids().cloned().collect();
    let mut pairs = Vec::with_capacity(posts.len() * symptoms.len());
    let mut meta = Vec::with_capacity(posts.len());
    for p in posts {
        for s in &symptoms {
            pairs.push(encode_pair(
                &ontology.node(s)?.description,
                p.text(),
                tokenizer,
                max_len,
            )?);
        }
        meta.push((p.id().to_string(), ontology.label_closure(p.gold_symptoms())?));
    }
    Ok(ValidationPairs {
        posts: meta,
        symptoms,
        pairs,
    })
}

fn sq_validation_f1(
    m: &SqModel,
    ontology: &SymptomOntology,
    v: &ValidationPairs,
    threshold: f64,
) -> Result<f64, TrainingError> {
    let scores = score_pairs(&m.encoder, &m.head, &v.pairs)?;
    let n = v.symptoms.len();
    let mut pred = BTreeMap::new();
    let mut gold = BTreeMap::new();
    for (k, (id, g)) in v.posts.iter().enumerate() {
        let detected = v
            .symptoms
            .iter()
            .zip(&scores[k * n..(k + 1) * n])
            .filter(|(_, p)| **p > threshold)
            .map(|(s, _)| s);
        pred.insert(id.clone(), ontology.label_closure(detected)?);
        gold.insert(id.clone(), g.clone());
    }
    Ok(classification_metrics(&pred, &gold)?.micro.f1)
}

/// One (post, annotated symptom) extraction example.
#[derive(Debug, Clone)]
pub struct ExtractionInstance {
    pub key: String,
    pub post_id: String,
    pub symptom_id: SymptomId,
    pub pair: TokenizedPair,
    pub targets: TokenTargets,
}

/// Extraction instances for every annotated symptom of `posts`.
pub fn extraction_instances(
    posts: &[&AnnotatedPost],
    ontology: &SymptomOntology,
    tokenizer: &WordPieceTokenizer,
    max_len: usize,
) -> Result<Vec<ExtractionInstance>, TrainingError> {
    let mut out = Vec::new();
    for p in posts {
        for s in p.gold_symptoms() {
            let pair = encode_pair(&ontology.node(s)?.description, p.text(), tokenizer, max_len)?;
            let attrs: Vec<_> = p.attributes_of(s).cloned().collect();
            let targets = align_spans_to_tokens(&pair, &attrs);
            out.push(ExtractionInstance {
                key: format!("{}/{}", p.id(), s),
                post_id: p.id().to_string(),
                symptom_id: s.clone(),
                pair,
                targets,
            });
        }
    }
    Ok(out)
}

/// Target rows `[token][channel]` in the head's channel layout.
fn channel_targets(inst: &ExtractionInstance, method: ExtractionMethod, types: &[AttributeType]) -> Vec<Vec<f32>> {
    let n = inst.pair.len();
    let per = method.channels_per_type();
    let mut rows = vec![vec![0f32; per * types.len()]; n];
    for (a, &t) in types.iter().enumerate() {
        let tt = inst.targets.of(t);
        for (k, row) in rows.iter_mut().enumerate() {
            match method {
                ExtractionMethod::StartEnd => {
                    row[2 * a] = tt.start[k];
                    row[2 * a + 1] = tt.end[k];
                }
                ExtractionMethod::Contiguous => row[a] = tt.inside[k],
            }
        }
    }
    rows
}

/// Per-channel loss weights counted over post tokens of the train instances.
pub fn extraction_loss_weights(
    instances: &[ExtractionInstance],
    method: ExtractionMethod,
    types: &[AttributeType],
    mode: LossWeightMode,
) -> Vec<LossWeights> {
    let channels = method.channels_per_type() * types.len();
    if mode == LossWeightMode::Unit {
        return vec![LossWeights::default(); channels];
    }
    let mut positives = vec![0usize; channels];
    let mut total = 0usize;
    for inst in instances {
        let mask = inst.pair.post_mask();
        let rows = channel_targets(inst, method, types);
        for (k, row) in rows.iter().enumerate() {
            if mask[k] == 1.0 {
                total += 1;
                for (c, &y) in row.iter().enumerate() {
                    if y == 1.0 {
                        positives[c] += 1;
                    }
                }
            }
        }
    }
    positives.into_iter().map(|p| class_balance_weights(p, total)).collect()
}

/// Token-wise report of an extraction model on `instances`.
pub fn evaluate_extractor(
    model: &ExtractorModel,
    instances: &[ExtractionInstance],
    decoder: &DecoderConfig,
) -> Result<EvalReport, TrainingError> {
    let types = model.head.scope.types();
    let mut map = BTreeMap::new();
    for inst in instances {
        let scores = model.scores(&inst.pair)?;
        let mut pred: BTreeMap<AttributeType, Vec<(usize, usize)>> = BTreeMap::new();
        for (t, s) in scores.decode(decoder)? {
            pred.entry(t).or_default().push((s.start, s.end));
        }
        let gold = types.iter().map(|&t| (t, inst.targets.of(t).spans.clone())).collect();
        map.insert(inst.key.clone(), InstanceSpans { pred, gold });
    }
    let mut report = token_extraction_metrics(&map, &types)?;
    report.dropped_spans = instances.iter().map(|i| i.targets.dropped).sum();
    Ok(report)
}

/// Token-wise F1 for a single type, summed per-type F1 for the general scope.
pub fn extraction_validation_metric(report: &EvalReport, scope: Scope) -> f64 {
    scope
        .types()
        .iter()
        .map(|t| report.per_class.get(t.title()).map_or(0.0, |p| p.f1))
        .sum()
}

/// Trains one extraction model (dropout forced to the extraction setting).
#[allow(clippy::too_many_arguments)]
pub fn train_extractor(
    cfg: &TrainingConfig,
    corpus: &Corpus,
    ontology: &SymptomOntology,
    method: ExtractionMethod,
    scope: Scope,
    source: &EncoderSource,
    decoder: &DecoderConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ExtractorModel, TrainingRunRecord), TrainingError> {
    cfg.validate()?;
    decoder.validate()?;
    let train = train_posts(corpus)?;
    let val = validation_posts(corpus);
    let prepared = prepare_encoder(source, corpus, ontology)?;
    let mut model = ExtractorModel::new(prepared.config.clone(), prepared.tokenizer, method, scope, cfg.seed)?;
    if let Some(p) = &prepared.pretrained {
        p.apply(&model.varmap)?;
    }
    model.encoder.set_dropout(cfg.extraction_dropout);
    model.encoder = model.encoder.clone().with_max_len(cfg.max_len);
    let tokenizer = model.encoder.tokenizer().clone();
    let max_len = model.encoder.max_len();
    let train_inst = extraction_instances(&train, ontology, &tokenizer, max_len)?;
    if train_inst.is_empty() {
        return Err(TrainingError::EmptyTrainSplit);
    }
    let val_inst = extraction_instances(&val, ontology, &tokenizer, max_len)?;
    let types = scope.types();
    let weights = extraction_loss_weights(&train_inst, method, &types, cfg.loss_weights);
    let targets: Vec<Vec<Vec<f32>>> = train_inst.iter().map(|i| channel_targets(i, method, &types)).collect();
    let channels = method.channels_per_type() * types.len();
    let indices: Vec<usize> = (0..train_inst.len()).collect();
    info!(%method, %scope, train = train_inst.len(), validation = val_inst.len(), "training extractor");

    let record = drive(
        cfg,
        &model.varmap,
        checkpoint_dir,
        |_, _| Ok((indices.clone(), None)),
        |batch, rng| {
            let pairs: Vec<&TokenizedPair> = batch.iter().map(|&&i| &train_inst[i].pair).collect();
            let b = crate::models::Batch::new(&pairs, tokenizer.pad_id(), false, DType::F32, &Device::Cpu)?;
            let t = b.seq_len();
            let hidden = model.encoder.forward(&b, Some(rng))?;
            let logits = model.head.logits(&hidden)?;
            let mut flat = vec![0f32; batch.len() * t * channels];
            for (r, &&i) in batch.iter().enumerate() {
                for (k, row) in targets[i].iter().enumerate() {
                    let at = (r * t + k) * channels;
                    flat[at..at + channels].copy_from_slice(row);
                }
            }
            let y = Tensor::from_vec(flat, (batch.len(), t, channels), &Device::Cpu)?;
            Ok(weighted_bce_with_logits(&logits, &y, &b.post_mask, &weights)?)
        },
        || {
            let report = evaluate_extractor(&model, &val_inst, decoder)?;
            Ok(extraction_validation_metric(&report, scope))
        },
    )?;
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_history_stops_after_patience() {
        let h = [0.5; 4];
        assert!(!early_stop(&h[..3], 3));
        assert!(early_stop(&h, 3));
    }

    #[test]
    fn improving_history_never_stops() {
        let h: Vec<f64> = (0..50).map(|i| i as f64).collect();
        for n in 1..=h.len() {
            assert!(!early_stop(&h[..n], 2));
        }
    }

    #[test]
    fn best_index_is_first_argmax() {
        assert_eq!(best_index(&[0.1, 0.4, 0.2, 0.4]), Some(1));
        assert_eq!(best_index(&[]), None);
    }

    #[test]
    fn variant_parsing() {
        for v in ClassifierVariant::all() {
            assert_eq!(v.to_string().parse::<ClassifierVariant>().unwrap(), v);
        }
        assert!(matches!(
            "tfidf_mlp+cl".parse::<ClassifierVariant>(),
            Err(TrainingError::VariantMismatch(_))
        ));
        assert!(matches!(
            "encoder_sigmoid+ad".parse::<ClassifierVariant>(),
            Err(TrainingError::VariantMismatch(_))
        ));
        assert_eq!(
            "SQ+CL+AD".parse::<ClassifierVariant>().unwrap(),
            ClassifierVariant::new(ClassifierKind::SymptomQuery, true, true)
        );
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainingConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.accumulation_steps() * c.micro_batch_size, 32);
        let bad = TrainingConfig {
            micro_batch_size: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let text = toml::to_string(&c).unwrap();
        let back: TrainingConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
