//! Annotated posts, double-label merging, the train/validation/test split and
//! corpus statistics.
//!
//! All character offsets are unicode code-point indices into the post text.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{SymptomId, SymptomOntology};

/// Share of double-labeled-correct posts that forms the test split.
pub const TEST_FRACTION: f64 = 0.20;
/// Share of the remaining posts that forms the validation split.
pub const VALIDATION_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("post `{post}`: {message}")]
    Invalid { post: String, message: String },
    #[error("post `{post}`: span {start}..{end} out of range for text of length {len}")]
    SpanOutOfRange {
        post: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("post `{post}`: unknown symptom id `{symptom}`")]
    UnknownSymptom { post: String, symptom: SymptomId },
    #[error("cannot merge labelings: {0}")]
    MergeMismatch(String),
    #[error("no double-labeled-correct posts to form a test split")]
    NoCorrectPosts,
    #[error("synthetic corpus size must be at least 1")]
    EmptySynthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeType {
    Location,
    Description,
    Time,
    Frequency,
    Action,
}

impl AttributeType {
    /// All types in report-column order.
    pub const ALL: [AttributeType; 5] = [
        AttributeType::Location,
        AttributeType::Description,
        AttributeType::Time,
        AttributeType::Frequency,
        AttributeType::Action,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeType::Location => "location",
            AttributeType::Description => "description",
            AttributeType::Time => "time",
            AttributeType::Frequency => "frequency",
            AttributeType::Action => "action",
        }
    }

    /// Capitalized column title.
    pub fn title(self) -> &'static str {
        match self {
            AttributeType::Location => "Location",
            AttributeType::Description => "Description",
            AttributeType::Time => "Time",
            AttributeType::Frequency => "Frequency",
            AttributeType::Action => "Action",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AttributeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttributeType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttributeType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown attribute type `{s}`"))
    }
}

/// Half-open code-point range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        CharSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &CharSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn within(&self, text_len: usize) -> bool {
        self.start < self.end && self.end <= text_len
    }
}

/// Substring of `text` at code-point range `span`. Out-of-range ends are clipped.
pub fn char_slice(text: &str, span: CharSpan) -> &str {
    let mut indices = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let start = indices.nth(span.start).unwrap_or(text.len());
    let end = if span.end > span.start {
        indices.nth(span.end - span.start - 1).unwrap_or(text.len())
    } else {
        start
    };
    &text[start..end]
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymptomAnnotation {
    pub symptom_id: SymptomId,
    /// Text segments annotated as this symptom.
    #[serde(default)]
    pub evidence: Vec<CharSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttributeAnnotation {
    pub symptom_id: SymptomId,
    #[serde(rename = "type")]
    pub kind: AttributeType,
    #[serde(flatten)]
    pub span: CharSpan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedPost {
    pub post: Post,
    pub symptoms: Vec<SymptomAnnotation>,
    pub attributes: Vec<AttributeAnnotation>,
    pub double_labeled_correct: bool,
}

impl AnnotatedPost {
    pub fn id(&self) -> &str {
        &self.post.id
    }

    pub fn text(&self) -> &str {
        &self.post.text
    }

    pub fn gold_symptoms(&self) -> impl Iterator<Item = &SymptomId> {
        self.symptoms.iter().map(|s| &s.symptom_id)
    }

    pub fn attributes_of<'a>(&'a self, symptom: &'a SymptomId) -> impl Iterator<Item = &'a AttributeAnnotation> {
        self.attributes.iter().filter(move |a| &a.symptom_id == symptom)
    }

    /// Checks span bounds and annotation consistency, optionally against an ontology.
    pub fn validate(&self, ontology: Option<&SymptomOntology>) -> Result<(), CorpusError> {
        let post = || self.post.id.clone();
        if self.post.text.is_empty() {
            return Err(CorpusError::Invalid {
                post: post(),
                message: "empty text".into(),
            });
        }
        let len = char_len(&self.post.text);
        let check = |span: &CharSpan| {
            if span.within(len) {
                Ok(())
            } else {
                Err(CorpusError::SpanOutOfRange {
                    post: post(),
                    start: span.start,
                    end: span.end,
                    len,
                })
            }
        };
        let mut seen = HashSet::new();
        for s in &self.symptoms {
            if !seen.insert(&s.symptom_id) {
                return Err(CorpusError::Invalid {
                    post: post(),
                    message: format!("duplicate symptom `{}`", s.symptom_id),
                });
            }
            if let Some(o) = ontology {
                if !o.contains(&s.symptom_id) {
                    return Err(CorpusError::UnknownSymptom {
                        post: post(),
                        symptom: s.symptom_id.clone(),
                    });
                }
            }
            s.evidence.iter().try_for_each(check)?;
        }
        for a in &self.attributes {
            check(&a.span)?;
            if !seen.contains(&a.symptom_id) {
                return Err(CorpusError::Invalid {
                    post: post(),
                    message: format!("attribute refers to unannotated symptom `{}`", a.symptom_id),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Wire form of one corpus line.
#[derive(Debug, Serialize, Deserialize)]
struct PostRecord {
    id: String,
    text: String,
    #[serde(default)]
    symptoms: Vec<SymptomAnnotation>,
    #[serde(default)]
    attributes: Vec<AttributeAnnotation>,
    #[serde(default)]
    double_labeled_correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub posts: Vec<AnnotatedPost>,
    pub splits: BTreeMap<String, Split>,
    /// Alternative layman descriptions per symptom, mined from train posts.
    pub augmentation: BTreeMap<SymptomId, Vec<String>>,
}

impl Corpus {
    pub fn new(posts: Vec<AnnotatedPost>) -> Self {
        Corpus {
            posts,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn split_of(&self, post_id: &str) -> Option<Split> {
        self.splits.get(post_id).copied()
    }

    pub fn posts_in(&self, split: Split) -> impl Iterator<Item = &AnnotatedPost> {
        self.posts.iter().filter(move |p| self.split_of(p.id()) == Some(split))
    }

    pub fn get(&self, post_id: &str) -> Option<&AnnotatedPost> {
        self.posts.iter().find(|p| p.id() == post_id)
    }

    /// Parses the JSON-lines corpus format and validates every record.
    pub fn from_jsonl<R: BufRead>(reader: R, ontology: Option<&SymptomOntology>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        let mut ids = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: PostRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            if !ids.insert(record.id.clone()) {
                return Err(CorpusError::Invalid {
                    post: record.id,
                    message: "duplicate post id".into(),
                });
            }
            if let Some(split) = record.split {
                corpus.splits.insert(record.id.clone(), split);
            }
            let post = AnnotatedPost {
                post: Post {
                    id: record.id,
                    text: record.text,
                },
                symptoms: record.symptoms,
                attributes: record.attributes,
                double_labeled_correct: record.double_labeled_correct,
            };
            post.validate(ontology)?;
            corpus.posts.push(post);
        }
        Ok(corpus)
    }

    pub fn load(path: impl AsRef<Path>, ontology: Option<&SymptomOntology>) -> Result<Self, CorpusError> {
        let file = std::fs::File::open(path)?;
        Self::from_jsonl(std::io::BufReader::new(file), ontology)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        for p in &self.posts {
            let record = PostRecord {
                id: p.post.id.clone(),
                text: p.post.text.clone(),
                symptoms: p.symptoms.clone(),
                attributes: p.attributes.clone(),
                double_labeled_correct: p.double_labeled_correct,
                split: self.split_of(p.id()),
            };
            serde_json::to_writer(&mut out, &record).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Symptom occurrence counts over the train split, closure-completed.
    pub fn train_frequencies(&self, ontology: &SymptomOntology) -> Result<BTreeMap<SymptomId, usize>, CorpusError> {
        let mut counts = BTreeMap::new();
        for p in self.posts_in(Split::Train) {
            let closure = ontology
                .label_closure(p.gold_symptoms())
                .map_err(|e| CorpusError::Invalid {
                    post: p.id().to_string(),
                    message: e.to_string(),
                })?;
            for s in closure {
                *counts.entry(s).or_insert(0) += 1;
            }
        }
        Ok(counts)
    }
}

/// Which labeling a conflict record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn flip(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictKind {
    Symptom,
    Evidence,
    Attribute,
}

/// An annotation present in only one of two labelings of a post.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub post_id: String,
    pub side: Side,
    pub kind: ConflictKind,
    pub symptom_id: SymptomId,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<AttributeType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<CharSpan>,
}

pub fn write_conflicts<W: Write>(conflicts: &[ConflictRecord], mut out: W) -> std::io::Result<()> {
    for c in conflicts {
        serde_json::to_writer(&mut out, c).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Merges two labelings of the same post.
///
/// Annotations found identically in both labelings are kept; everything else
/// becomes a [`ConflictRecord`] for manual review. The merged post is flagged
/// as correct only when there are no conflicts.
pub fn merge_double_labels(
    a: &AnnotatedPost,
    b: &AnnotatedPost,
) -> Result<(AnnotatedPost, Vec<ConflictRecord>), CorpusError> {
    if a.post.id != b.post.id {
        return Err(CorpusError::MergeMismatch(format!(
            "post ids differ: `{}` vs `{}`",
            a.post.id, b.post.id
        )));
    }
    if a.post.text != b.post.text {
        return Err(CorpusError::MergeMismatch(format!(
            "texts of post `{}` differ",
            a.post.id
        )));
    }
    let post_id = a.post.id.clone();
    let mut conflicts = Vec::new();

    let index = |p: &AnnotatedPost| -> BTreeMap<SymptomId, BTreeSet<CharSpan>> {
        p.symptoms
            .iter()
            .map(|s| (s.symptom_id.clone(), s.evidence.iter().copied().collect()))
            .collect()
    };
    let (sa, sb) = (index(a), index(b));

    let mut symptoms = Vec::new();
    for (side, mine, theirs) in [(Side::A, &sa, &sb), (Side::B, &sb, &sa)] {
        for (id, evidence) in mine {
            match theirs.get(id) {
                None => conflicts.push(ConflictRecord {
                    post_id: post_id.clone(),
                    side,
                    kind: ConflictKind::Symptom,
                    symptom_id: id.clone(),
                    attribute: None,
                    span: None,
                }),
                Some(other) => {
                    for span in evidence.difference(other) {
                        conflicts.push(ConflictRecord {
                            post_id: post_id.clone(),
                            side,
                            kind: ConflictKind::Evidence,
                            symptom_id: id.clone(),
                            attribute: None,
                            span: Some(*span),
                        });
                    }
                    if side == Side::A {
                        symptoms.push(SymptomAnnotation {
                            symptom_id: id.clone(),
                            evidence: evidence.intersection(other).copied().collect(),
                        });
                    }
                }
            }
        }
    }
    let kept: BTreeSet<&SymptomId> = symptoms.iter().map(|s| &s.symptom_id).collect();

    let attrs_a: BTreeSet<&AttributeAnnotation> = a.attributes.iter().collect();
    let attrs_b: BTreeSet<&AttributeAnnotation> = b.attributes.iter().collect();
    let mut attributes = Vec::new();
    for (side, mine, theirs) in [(Side::A, &attrs_a, &attrs_b), (Side::B, &attrs_b, &attrs_a)] {
        for attr in mine {
            if theirs.contains(attr) && kept.contains(&attr.symptom_id) {
                if side == Side::A {
                    attributes.push((*attr).clone());
                }
            } else {
                conflicts.push(ConflictRecord {
                    post_id: post_id.clone(),
                    side,
                    kind: ConflictKind::Attribute,
                    symptom_id: attr.symptom_id.clone(),
                    attribute: Some(attr.kind),
                    span: Some(attr.span),
                });
            }
        }
    }
    conflicts.sort();

    let merged = AnnotatedPost {
        post: a.post.clone(),
        symptoms,
        attributes,
        double_labeled_correct: conflicts.is_empty(),
    };
    Ok((merged, conflicts))
}

/// Assigns every post to train, validation or test.
///
/// The test split is drawn from double-labeled-correct posts only; validation
/// is drawn from everything that remains. Sampling is seeded and operates on
/// whole posts.
pub fn split_corpus(corpus: &Corpus, seed: u64) -> Result<Corpus, CorpusError> {
    let correct: Vec<usize> = (0..corpus.posts.len())
        .filter(|&i| corpus.posts[i].double_labeled_correct)
        .collect();
    if correct.is_empty() {
        return Err(CorpusError::NoCorrectPosts);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_test = (TEST_FRACTION * correct.len() as f64).round() as usize;
    let mut pool = correct.clone();
    pool.shuffle(&mut rng);
    let test: BTreeSet<usize> = pool.into_iter().take(n_test).collect();

    let mut remaining: Vec<usize> = (0..corpus.posts.len()).filter(|i| !test.contains(i)).collect();
    let n_val = (VALIDATION_FRACTION * remaining.len() as f64).round() as usize;
    remaining.shuffle(&mut rng);
    let validation: BTreeSet<usize> = remaining.into_iter().take(n_val).collect();

    let mut out = corpus.clone();
    out.splits = corpus
        .posts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let split = if test.contains(&i) {
                Split::Test
            } else if validation.contains(&i) {
                Split::Validation
            } else {
                Split::Train
            };
            (p.id().to_string(), split)
        })
        .collect();
    Ok(out)
}

/// Mines alternative layman descriptions from train posts: every evidence
/// segment annotated as a symptom becomes a description of that symptom.
/// Posts without a train assignment do not contribute.
pub fn augment_descriptions(corpus: &Corpus, ontology: &SymptomOntology) -> BTreeMap<SymptomId, Vec<String>> {
    let mut pool: BTreeMap<SymptomId, Vec<String>> = BTreeMap::new();
    for post in corpus.posts_in(Split::Train) {
        for s in &post.symptoms {
            if !ontology.contains(&s.symptom_id) {
                continue;
            }
            for span in &s.evidence {
                let segment = char_slice(post.text(), *span).to_string();
                if segment.trim().is_empty() {
                    continue;
                }
                let entry = pool.entry(s.symptom_id.clone()).or_default();
                if !entry.contains(&segment) {
                    entry.push(segment);
                }
            }
        }
    }
    pool
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStats {
    #[serde(rename = "Total Occurrences")]
    pub total: usize,
    /// Distinct surface strings across the whole corpus.
    #[serde(rename = "Unique Occurrences")]
    pub unique: usize,
    #[serde(rename = "Mean Attribute Length")]
    pub mean_length: f64,
    #[serde(rename = "Attribute Length Std Dev")]
    pub std_length: f64,
}

impl AttributeStats {
    pub const COLUMNS: [&'static str; 4] = [
        "Total Occurrences",
        "Unique Occurrences",
        "Mean Attribute Length",
        "Attribute Length Std Dev",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub posts: usize,
    pub symptom_annotations: usize,
    pub attribute_annotations: usize,
    pub symptom_counts: BTreeMap<SymptomId, usize>,
    /// Keyed by attribute type, in report-column order.
    pub attributes: Vec<(AttributeType, AttributeStats)>,
    /// Distinct (post, surface string) pairs per type; `unique` above
    /// deduplicates corpus-wide.
    pub unique_per_post: Vec<(AttributeType, usize)>,
}

/// Counts posts, symptoms and per-type attribute occurrences. Attribute
/// lengths are whitespace-token counts; the deviation is the population one.
pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut symptom_counts = BTreeMap::new();
    let mut symptom_annotations = 0;
    let mut lengths: BTreeMap<AttributeType, Vec<usize>> = BTreeMap::new();
    let mut unique: BTreeMap<AttributeType, BTreeSet<String>> = BTreeMap::new();
    let mut unique_pp: BTreeMap<AttributeType, BTreeSet<(String, String)>> = BTreeMap::new();
    for p in &corpus.posts {
        for s in &p.symptoms {
            symptom_annotations += 1;
            *symptom_counts.entry(s.symptom_id.clone()).or_insert(0) += 1;
        }
        for a in &p.attributes {
            let surface = char_slice(p.text(), a.span).to_string();
            lengths
                .entry(a.kind)
                .or_default()
                .push(surface.split_whitespace().count());
            unique.entry(a.kind).or_default().insert(surface.clone());
            unique_pp
                .entry(a.kind)
                .or_default()
                .insert((p.id().to_string(), surface));
        }
    }
    let attributes = AttributeType::ALL
        .iter()
        .map(|&t| {
            let ls = lengths.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            let n = ls.len();
            let (mean, std) = if n == 0 {
                (0.0, 0.0)
            } else {
                let mean = ls.iter().sum::<usize>() as f64 / n as f64;
                let var = ls.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n as f64;
                (mean, var.sqrt())
            };
            (
                t,
                AttributeStats {
                    total: n,
                    unique: unique.get(&t).map_or(0, BTreeSet::len),
                    mean_length: mean,
                    std_length: std,
                },
            )
        })
        .collect::<Vec<_>>();
    CorpusStats {
        posts: corpus.posts.len(),
        symptom_annotations,
        attribute_annotations: attributes.iter().map(|(_, s)| s.total).sum(),
        symptom_counts,
        attributes,
        unique_per_post: AttributeType::ALL
            .iter()
            .map(|&t| (t, unique_pp.get(&t).map_or(0, BTreeSet::len)))
            .collect(),
    }
}

impl CorpusStats {
    /// Plain-text table with one row per attribute type.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "posts: {}  symptoms: {}  attributes: {}\n\n",
            self.posts, self.symptom_annotations, self.attribute_annotations
        );
        out.push_str(&format!("{:<12}", ""));
        for c in AttributeStats::COLUMNS {
            out.push_str(&format!("{c:>26}"));
        }
        out.push('\n');
        for (t, s) in &self.attributes {
            out.push_str(&format!(
                "{:<12}{:>26}{:>26}{:>26.2}{:>26.2}\n",
                t.title(),
                s.total,
                s.unique,
                s.mean_length,
                s.std_length
            ));
        }
        out
    }
}
