//! Configuration, model artifacts and the two-stage extraction pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AttributeType, CorpusError};
use crate::decoding::{spans_to_output, DecodeError, DecoderConfig, ExtractionMethod, SpanPrediction};
use crate::encoding::{encode_pair, EncodingError};
use crate::models::{
    EncoderBackend, EncoderConfig, EncoderSigmoidBaseline, ExtractorModel, LabelSpace, ModelError, Scope, SqModel,
    TfidfMlpBaseline, TfidfVectorizer, PRETRAINED_ENCODER,
};
use crate::ontology::{OntologyError, SymptomId, SymptomOntology};
use crate::sampling::CurriculumConfig;
use crate::tokenizer::WordPieceTokenizer;
use crate::training::{
    ClassifierKind, ClassifierVariant, EncoderSource, TrainedClassifier, TrainingConfig, TrainingError,
    TrainingRunRecord,
};

/// Default request size limit of the service, in characters.
pub const DEFAULT_MAX_TEXT_CHARS: usize = 20_000;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.safetensors";
const VOCAB: &str = "vocab.txt";
const TFIDF: &str = "tfidf.json";
const RUN_RECORD: &str = "run_record.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("incompatible artifact at {path}: {reason}")]
    Incompatible { path: PathBuf, reason: String },
    #[error("artifact at {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },
    #[error("the input text is empty")]
    EmptyText,
    #[error("the input text has {len} characters (limit {limit})")]
    TextTooLong { len: usize, limit: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("i/o error on {path}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AppError + '_ {
    move |source| AppError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub ontology: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub artifacts_dir: PathBuf,
    /// Directory holding pretrained encoders as `<name>/{config.json, vocab.txt, model.safetensors}`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            ontology: None,
            corpus: None,
            artifacts_dir: PathBuf::from("artifacts"),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Reduced encoder trained from random initialization.
    Scratch,
    Pretrained,
}

/// Which symptoms the extraction stage is run for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySelection {
    /// Detected symptoms without a detected descendant.
    MostSpecific,
    /// Every detected symptom, as returned by the classifier.
    Detected,
    /// Detected symptoms plus all their ancestors.
    WithAncestors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub pretrained_name: String,
    /// Architecture of the scratch encoder; `vocab_size` is derived from the corpus.
    pub scratch: EncoderConfig,
    pub classifier: ClassifierVariant,
    pub extraction_method: ExtractionMethod,
    pub queries: QuerySelection,
}

/// The reduced architecture used when no pretrained checkpoint is available.
/// Initialization is wider than BERT's 0.02 so that sublayers contribute
/// visibly from the first step when training from scratch.
pub fn scratch_encoder_config() -> EncoderConfig {
    EncoderConfig {
        initializer_range: 0.1,
        ..EncoderConfig::reduced(0)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Scratch,
            pretrained_name: PRETRAINED_ENCODER.to_string(),
            scratch: scratch_encoder_config(),
            classifier: ClassifierVariant::new(ClassifierKind::SymptomQuery, true, true),
            extraction_method: ExtractionMethod::Contiguous,
            queries: QuerySelection::MostSpecific,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub max_text_chars: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            max_text_chars: DEFAULT_MAX_TEXT_CHARS,
        }
    }
}

/// The configuration file: `[data]`, `[model]`, `[training]`, `[curriculum]`,
/// `[decoder]` and `[service]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub curriculum: CurriculumConfig,
    pub decoder: DecoderConfig,
    pub service: ServiceConfig,
}

impl AppConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, AppError> {
        let cfg: AppConfig = toml::from_str(s).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AppError> {
        let path = path.as_ref();
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), AppError> {
        self.training_config().validate()?;
        self.decoder.validate()?;
        // The vocabulary size is only known once the corpus vocabulary is built.
        EncoderConfig {
            vocab_size: self.model.scratch.vocab_size.max(1),
            ..self.model.scratch.clone()
        }
        .validate()?;
        if self.service.max_text_chars == 0 {
            return Err(AppError::Config("service.max_text_chars must be positive".into()));
        }
        Ok(())
    }

    /// Training settings with the `[curriculum]` section folded in.
    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            curriculum: self.curriculum.clone(),
            ..self.training.clone()
        }
    }

    pub fn encoder_source(&self) -> Result<EncoderSource, AppError> {
        match self.model.encoder {
            EncoderKind::Scratch => Ok(EncoderSource::Scratch(self.model.scratch.clone())),
            EncoderKind::Pretrained => {
                let cache_dir = self
                    .data
                    .cache_dir
                    .clone()
                    .ok_or_else(|| AppError::Config("a pretrained encoder needs data.cache_dir".into()))?;
                Ok(EncoderSource::Pretrained {
                    cache_dir,
                    name: self.model.pretrained_name.clone(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Extraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<ClassifierVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<ExtractionMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<Scope>,
    /// Absent for the TF-IDF baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub mean_over_specials: bool,
    /// Output labels of the baselines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelSpace>,
    pub training: TrainingConfig,
    pub ontology_hash: String,
    pub best_validation_metric: f64,
    pub step_unit: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), AppError> {
    let json = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, json).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, AppError> {
    let s = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|e| AppError::Artifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn save_tokenizer(dir: &Path, tok: &WordPieceTokenizer) -> Result<(), AppError> {
    let path = dir.join(VOCAB);
    tok.save(&path).map_err(io_err(&path))
}

fn load_tokenizer(dir: &Path) -> Result<WordPieceTokenizer, AppError> {
    let path = dir.join(VOCAB);
    WordPieceTokenizer::from_file(&path).map_err(|e| AppError::Artifact {
        path,
        reason: e.to_string(),
    })
}

/// Writes a trained classifier with its manifest and run record.
pub fn save_classifier(
    dir: impl AsRef<Path>,
    model: &TrainedClassifier,
    variant: ClassifierVariant,
    training: &TrainingConfig,
    ontology: &SymptomOntology,
    record: &TrainingRunRecord,
) -> Result<Manifest, AppError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (encoder, labels, mean) = match model {
        TrainedClassifier::SymptomQuery(m) => {
            save_tokenizer(dir, m.encoder.tokenizer())?;
            (Some(m.encoder.config().clone()), None, m.head.mean_over_specials)
        }
        TrainedClassifier::EncoderSigmoid(m) => {
            save_tokenizer(dir, m.encoder.tokenizer())?;
            (Some(m.encoder.config().clone()), Some(m.labels.clone()), false)
        }
        TrainedClassifier::TfidfMlp(m) => {
            write_json(&dir.join(TFIDF), &m.vectorizer)?;
            (None, Some(m.labels.clone()), false)
        }
    };
    model.varmap().save(dir.join(WEIGHTS))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        task: Task::Classification,
        variant: Some(variant),
        method: None,
        scope: None,
        encoder,
        mean_over_specials: mean,
        labels,
        training: training.clone(),
        ontology_hash: ontology.content_hash(),
        best_validation_metric: record.best_metric,
        step_unit: record.step_unit.clone(),
        created_at: now(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    write_json(&dir.join(RUN_RECORD), record)?;
    Ok(manifest)
}

/// Writes a trained extraction model with its manifest and run record.
pub fn save_extractor(
    dir: impl AsRef<Path>,
    model: &ExtractorModel,
    training: &TrainingConfig,
    ontology: &SymptomOntology,
    record: &TrainingRunRecord,
) -> Result<Manifest, AppError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_tokenizer(dir, model.encoder.tokenizer())?;
    model.varmap.save(dir.join(WEIGHTS))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        task: Task::Extraction,
        variant: None,
        method: Some(model.head.method),
        scope: Some(model.head.scope),
        encoder: Some(model.encoder.config().clone()),
        mean_over_specials: false,
        labels: None,
        training: training.clone(),
        ontology_hash: ontology.content_hash(),
        best_validation_metric: record.best_metric,
        step_unit: record.step_unit.clone(),
        created_at: now(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    write_json(&dir.join(RUN_RECORD), record)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest, AppError> {
    let dir = dir.as_ref();
    if !dir.join(MANIFEST).is_file() {
        return Err(AppError::Artifact {
            path: dir.to_path_buf(),
            reason: "no trained model here (missing manifest.json)".into(),
        });
    }
    let m: Manifest = read_json(&dir.join(MANIFEST))?;
    if m.format_version != FORMAT_VERSION {
        return Err(AppError::Incompatible {
            path: dir.to_path_buf(),
            reason: format!("format version {} (expected {FORMAT_VERSION})", m.format_version),
        });
    }
    Ok(m)
}

fn check_manifest(dir: &Path, m: &Manifest, task: Task, ontology: &SymptomOntology) -> Result<(), AppError> {
    let incompatible = |reason: String| AppError::Incompatible {
        path: dir.to_path_buf(),
        reason,
    };
    if m.task != task {
        return Err(incompatible(format!(
            "artifact is a {:?} model, expected {task:?}",
            m.task
        )));
    }
    let hash = ontology.content_hash();
    if m.ontology_hash != hash {
        return Err(incompatible(format!(
            "trained with ontology {} but the loaded ontology hashes to {hash}",
            m.ontology_hash
        )));
    }
    Ok(())
}

fn missing(dir: &Path, what: &str) -> AppError {
    AppError::Artifact {
        path: dir.to_path_buf(),
        reason: format!("manifest lacks {what}"),
    }
}

/// Loads a classifier after checking task and ontology hash.
pub fn load_classifier(
    dir: impl AsRef<Path>,
    ontology: &SymptomOntology,
) -> Result<(TrainedClassifier, Manifest), AppError> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    check_manifest(dir, &m, Task::Classification, ontology)?;
    let variant = m.variant.ok_or_else(|| missing(dir, "the classifier variant"))?;
    let model = match variant.kind {
        ClassifierKind::SymptomQuery => {
            let cfg = m
                .encoder
                .clone()
                .ok_or_else(|| missing(dir, "the encoder configuration"))?;
            let mut sq = SqModel::new(cfg, load_tokenizer(dir)?, m.mean_over_specials, 0)?;
            sq.encoder = sq.encoder.clone().with_max_len(m.training.max_len);
            TrainedClassifier::SymptomQuery(sq)
        }
        ClassifierKind::EncoderSigmoid => {
            let cfg = m
                .encoder
                .clone()
                .ok_or_else(|| missing(dir, "the encoder configuration"))?;
            let labels = m.labels.clone().ok_or_else(|| missing(dir, "the label space"))?;
            let mut b = EncoderSigmoidBaseline::new(cfg, load_tokenizer(dir)?, labels, 0)?;
            b.encoder = b.encoder.clone().with_max_len(m.training.max_len);
            TrainedClassifier::EncoderSigmoid(b)
        }
        ClassifierKind::TfidfMlp => {
            let vectorizer: TfidfVectorizer = read_json(&dir.join(TFIDF))?;
            let labels = m.labels.clone().ok_or_else(|| missing(dir, "the label space"))?;
            TrainedClassifier::TfidfMlp(TfidfMlpBaseline::new(vectorizer, labels, 0)?)
        }
    };
    let mut vm = model.varmap().clone();
    vm.load(dir.join(WEIGHTS))?;
    Ok((model, m))
}

/// Loads an extraction model after checking task and ontology hash.
pub fn load_extractor(
    dir: impl AsRef<Path>,
    ontology: &SymptomOntology,
) -> Result<(ExtractorModel, Manifest), AppError> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    check_manifest(dir, &m, Task::Extraction, ontology)?;
    let cfg = m
        .encoder
        .clone()
        .ok_or_else(|| missing(dir, "the encoder configuration"))?;
    let method = m.method.ok_or_else(|| missing(dir, "the extraction method"))?;
    let scope = m.scope.ok_or_else(|| missing(dir, "the scope"))?;
    let mut model = ExtractorModel::new(cfg, load_tokenizer(dir)?, method, scope, 0)?;
    model.encoder = model.encoder.clone().with_max_len(m.training.max_len);
    model.varmap.load(dir.join(WEIGHTS))?;
    Ok((model, m))
}

/// Artifact directory name for a classifier variant, e.g. `classify-sq+cl+ad`.
pub fn classifier_dir(root: &Path, variant: ClassifierVariant) -> PathBuf {
    root.join(format!("classify-{variant}"))
}

/// Artifact directory name for an extraction model, e.g. `extract-contiguous-general`.
pub fn extractor_dir(root: &Path, method: ExtractionMethod, scope: Scope) -> PathBuf {
    root.join(format!("extract-{}-{}", method.as_str(), scope.as_str()))
}

/// Extraction models covering all attribute types.
#[allow(clippy::large_enum_variant)] // one long-lived value per pipeline
pub enum Extractors {
    General(ExtractorModel),
    PerType(Vec<ExtractorModel>),
}

impl Extractors {
    pub fn new(models: Vec<ExtractorModel>) -> Result<Self, AppError> {
        if models.is_empty() {
            return Err(AppError::Config("no extraction models".into()));
        }
        let methods: BTreeSet<ExtractionMethod> = models.iter().map(|m| m.head.method).collect();
        if methods.len() > 1 {
            return Err(AppError::Config("extraction models mix decoding methods".into()));
        }
        if models.len() == 1 && models[0].head.scope == Scope::General {
            return Ok(Extractors::General(models.into_iter().next().expect("one model")));
        }
        let covered: BTreeSet<AttributeType> = models
            .iter()
            .filter_map(|m| match m.head.scope {
                Scope::Single(t) => Some(t),
                Scope::General => None,
            })
            .collect();
        if covered.len() != AttributeType::ALL.len() || models.len() != AttributeType::ALL.len() {
            return Err(AppError::Config(
                "extraction models must be one general model or exactly one model per attribute type".into(),
            ));
        }
        Ok(Extractors::PerType(models))
    }

    pub fn models(&self) -> Vec<&ExtractorModel> {
        match self {
            Extractors::General(m) => vec![m],
            Extractors::PerType(v) => v.iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomSummary {
    pub id: SymptomId,
    pub name: String,
    pub probability: f64,
    pub attributes: Vec<SpanPrediction>,
}

/// Output of the pipeline for one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredSummary {
    /// Queried symptoms, by descending probability.
    pub symptoms: Vec<SymptomSummary>,
    /// Every symptom implied by the detections (label closure).
    pub implied: Vec<SymptomId>,
}

pub struct Pipeline {
    pub ontology: SymptomOntology,
    pub classifier: TrainedClassifier,
    pub extractors: Extractors,
    pub decoder: DecoderConfig,
    pub threshold: f64,
    pub queries: QuerySelection,
    pub max_text_chars: usize,
}

impl Pipeline {
    /// Loads the configured classifier and either the general or the five
    /// single-type extractors from `artifacts_dir`.
    pub fn load(config: &AppConfig, ontology: SymptomOntology) -> Result<Self, AppError> {
        let root = &config.data.artifacts_dir;
        let (classifier, _) = load_classifier(classifier_dir(root, config.model.classifier), &ontology)?;
        let method = config.model.extraction_method;
        let general = extractor_dir(root, method, Scope::General);
        let models = if general.join(MANIFEST).exists() {
            vec![load_extractor(&general, &ontology)?.0]
        } else {
            AttributeType::ALL
                .iter()
                .map(|&t| Ok(load_extractor(extractor_dir(root, method, Scope::Single(t)), &ontology)?.0))
                .collect::<Result<Vec<_>, AppError>>()?
        };
        Ok(Pipeline {
            classifier,
            extractors: Extractors::new(models)?,
            decoder: config.decoder.clone(),
            threshold: config.training.threshold,
            queries: config.model.queries,
            max_text_chars: config.service.max_text_chars,
            ontology,
        })
    }

    pub fn check_text(&self, text: &str) -> Result<(), AppError> {
        if text.trim().is_empty() {
            return Err(AppError::EmptyText);
        }
        let len = text.chars().count();
        if len > self.max_text_chars {
            return Err(AppError::TextTooLong {
                len,
                limit: self.max_text_chars,
            });
        }
        Ok(())
    }

    pub fn extract(&self, text: &str) -> Result<StructuredSummary, AppError> {
        self.extract_with_threshold(text, self.threshold)
    }

    pub fn extract_with_threshold(&self, text: &str, threshold: f64) -> Result<StructuredSummary, AppError> {
        self.check_text(text)?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(AppError::Config(format!("threshold {threshold} outside [0, 1]")));
        }
        let detected = self.classifier.detect(&self.ontology, text, threshold)?;
        let implied: Vec<SymptomId> = self
            .ontology
            .label_closure(detected.iter().map(|(s, _)| s))?
            .into_iter()
            .collect();
        let queried = select_queries(&self.ontology, &detected, self.queries)?;
        let mut symptoms = Vec::with_capacity(queried.len());
        for (id, probability) in queried {
            let node = self.ontology.node(&id)?;
            let mut attributes = Vec::new();
            for model in self.extractors.models() {
                let pair = encode_pair(
                    &node.description,
                    text,
                    model.encoder.tokenizer(),
                    model.encoder.max_len(),
                )?;
                let spans = model.scores(&pair)?.decode(&self.decoder)?;
                attributes.extend(spans_to_output(&pair, text, &spans)?);
            }
            attributes.sort_by(|a, b| {
                a.kind
                    .cmp(&b.kind)
                    .then(b.probability.total_cmp(&a.probability))
                    .then(a.span.start.cmp(&b.span.start))
            });
            symptoms.push(SymptomSummary {
                name: node.name.clone(),
                id,
                probability,
                attributes,
            });
        }
        symptoms.sort_by(|a, b| b.probability.total_cmp(&a.probability).then(a.id.cmp(&b.id)));
        Ok(StructuredSummary { symptoms, implied })
    }
}

/// Applies the query selection to raw detections.
pub fn select_queries(
    ontology: &SymptomOntology,
    detected: &[(SymptomId, f64)],
    selection: QuerySelection,
) -> Result<Vec<(SymptomId, f64)>, AppError> {
    let probs: BTreeMap<&SymptomId, f64> = detected.iter().map(|(s, p)| (s, *p)).collect();
    match selection {
        QuerySelection::Detected => Ok(detected.to_vec()),
        QuerySelection::MostSpecific => {
            let mut covered = BTreeSet::new();
            for (s, _) in detected {
                covered.extend(ontology.ancestors(s)?);
            }
            Ok(detected.iter().filter(|(s, _)| !covered.contains(s)).cloned().collect())
        }
        QuerySelection::WithAncestors => {
            let closure = ontology.label_closure(detected.iter().map(|(s, _)| s))?;
            let mut out = Vec::with_capacity(closure.len());
            for s in closure {
                // Implied ancestors inherit their best descendant's probability.
                let p = match probs.get(&s) {
                    Some(p) => *p,
                    None => detected
                        .iter()
                        .filter(|(d, _)| ontology.ancestors(d).map(|a| a.contains(&s)).unwrap_or(false))
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max),
                };
                out.push((s, p));
            }
            Ok(out)
        }
    }
}

impl FromStr for QuerySelection {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "most_specific" | "most-specific" => Ok(QuerySelection::MostSpecific),
            "detected" => Ok(QuerySelection::Detected),
            "with_ancestors" | "with-ancestors" => Ok(QuerySelection::WithAncestors),
            other => Err(AppError::Config(format!("unknown query selection `{other}`"))),
        }
    }
}
