//! Two-stage symptom extraction from German patient posts.
//!
//! Stage one decides, for each symptom of an ontology, whether a post
//! mentions it by classifying (symptom description, post) pairs. Stage two
//! tags attribute spans (location, description, time, frequency, action) of
//! every detected symptom.

pub mod app;
pub mod corpus;
pub mod decoding;
pub mod encoding;
pub mod fixtures;
pub mod metrics;
pub mod models;
pub mod ontology;
pub mod sampling;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use corpus::{
    AnnotatedPost, AttributeAnnotation, AttributeType, CharSpan, Corpus, CorpusError, Post, Split, SymptomAnnotation,
};
pub use decoding::{DecoderConfig, SpanPrediction, TokenSpan};
pub use encoding::{encode_pair, TokenizedPair};
pub use metrics::{EvalReport, Prf};
pub use ontology::{OntologyError, SymptomId, SymptomNode, SymptomOntology};
pub use sampling::{ClassificationExample, CurriculumConfig, CurriculumStage};
pub use tokenizer::WordPieceTokenizer;
