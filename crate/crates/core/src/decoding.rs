//! Turns per-token probabilities into attribute span predictions.
//!
//! Two decoders exist, one per extraction head:
//!
//! * Start-End: every token pair `i <= j` is scored with
//!   `p_range = (p_start[i] + p_end[j]) / 2`. A pair is a candidate when
//!   `p_range` exceeds the threshold, the range is not longer than the token
//!   cap, and no interior token carries a start or end probability reaching
//!   `factor * p_range`. The interior rule rejects ranges that glue the start
//!   of one attribute to the end of another. Candidates are then accepted
//!   greedily by descending `p_range` (ties: smaller `i`, then shorter range),
//!   skipping any that overlap an accepted span.
//! * Contiguous: every maximal run of tokens with `p_inside` above the
//!   threshold is one span, scored by its mean probability.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{char_slice, AttributeType, CharSpan};
use crate::encoding::{tokens_to_char_span, EncodingError, TokenizedPair};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("start and end vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("invalid decoder configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub threshold_start_end: f64,
    pub threshold_contiguous: f64,
    /// Interior tokens must stay below `interior_factor * p_range`.
    pub interior_factor: f64,
    pub max_span_tokens: usize,
    /// Per-type replacement for `max_span_tokens`.
    pub max_span_tokens_by_type: BTreeMap<AttributeType, usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            threshold_start_end: 0.7,
            threshold_contiguous: 0.7,
            interior_factor: 2.0 / 3.0,
            max_span_tokens: 12,
            max_span_tokens_by_type: BTreeMap::new(),
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.threshold_start_end) || !open(self.threshold_contiguous) {
            return Err(DecodeError::Config("thresholds must lie in (0, 1)".into()));
        }
        if !open(self.interior_factor) {
            return Err(DecodeError::Config("interior factor must lie in (0, 1)".into()));
        }
        if self.max_span_tokens == 0 || self.max_span_tokens_by_type.values().any(|&c| c == 0) {
            return Err(DecodeError::Config("span cap must be at least 1".into()));
        }
        Ok(())
    }

    pub fn cap_for(&self, kind: Option<AttributeType>) -> usize {
        kind.and_then(|k| self.max_span_tokens_by_type.get(&k).copied())
            .unwrap_or(self.max_span_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    StartEnd,
    Contiguous,
}

impl ExtractionMethod {
    pub const ALL: [ExtractionMethod; 2] = [ExtractionMethod::StartEnd, ExtractionMethod::Contiguous];

    pub fn as_str(self) -> &'static str {
        match self {
            ExtractionMethod::StartEnd => "start_end",
            ExtractionMethod::Contiguous => "contiguous",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ExtractionMethod::StartEnd => "Start-End",
            ExtractionMethod::Contiguous => "Contiguous",
        }
    }

    /// Output channels per attribute type.
    pub fn channels_per_type(self) -> usize {
        match self {
            ExtractionMethod::StartEnd => 2,
            ExtractionMethod::Contiguous => 1,
        }
    }
}

impl fmt::Display for ExtractionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExtractionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "start_end" | "start-end" => Ok(ExtractionMethod::StartEnd),
            "contiguous" => Ok(ExtractionMethod::Contiguous),
            other => Err(format!("unknown extraction method `{other}`")),
        }
    }
}

/// A decoded token range `i..=j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl TokenSpan {
    pub fn overlaps(&self, other: &TokenSpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Start-End decoding with cap `max_tokens`.
pub fn decode_start_end(
    p_start: &[f32],
    p_end: &[f32],
    threshold: f64,
    interior_factor: f64,
    max_tokens: usize,
) -> Result<Vec<TokenSpan>, DecodeError> {
    if p_start.len() != p_end.len() {
        return Err(DecodeError::LengthMismatch(p_start.len(), p_end.len()));
    }
    let n = p_start.len();
    let mut candidates = Vec::new();
    for i in 0..n {
        let ps = p_start[i] as f64;
        // Interior maximum over (i, j) is maintained incrementally.
        let mut interior_max = f64::NEG_INFINITY;
        for j in i..n.min(i + max_tokens) {
            if j > i + 1 {
                let k = j - 1;
                interior_max = interior_max.max(p_start[k] as f64).max(p_end[k] as f64);
            }
            let p_range = (ps + p_end[j] as f64) / 2.0;
            if p_range <= threshold {
                continue;
            }
            if j > i + 1 && interior_factor * p_range <= interior_max {
                continue;
            }
            candidates.push(TokenSpan {
                start: i,
                end: j,
                score: p_range,
            });
        }
    }
    Ok(resolve_overlaps(candidates))
}

/// Greedy acceptance by descending score, then smaller start, then shorter
/// span; output sorted by start.
pub fn resolve_overlaps(mut candidates: Vec<TokenSpan>) -> Vec<TokenSpan> {
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });
    let mut accepted: Vec<TokenSpan> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|a| !a.overlaps(&c)) {
            accepted.push(c);
        }
    }
    accepted.sort_by_key(|s| s.start);
    accepted
}

/// Maximal runs with `p > threshold`, scored by mean run probability.
pub fn decode_contiguous(p_inside: &[f32], threshold: f64) -> Vec<TokenSpan> {
    let mut out = Vec::new();
    let mut run_start = None;
    for k in 0..=p_inside.len() {
        let above = k < p_inside.len() && p_inside[k] as f64 > threshold;
        match (above, run_start) {
            (true, None) => run_start = Some(k),
            (false, Some(s)) => {
                let sum: f64 = p_inside[s..k].iter().map(|&p| p as f64).sum();
                out.push(TokenSpan {
                    start: s,
                    end: k - 1,
                    score: sum / (k - s) as f64,
                });
                run_start = None;
            }
            _ => {}
        }
    }
    out
}

/// One decoded attribute mapped back to the post text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    #[serde(rename = "type")]
    pub kind: AttributeType,
    pub probability: f64,
    pub text: String,
    #[serde(flatten)]
    pub span: CharSpan,
    #[serde(skip)]
    pub tokens: (usize, usize),
}

/// Maps token spans to text, ordered by attribute type, then descending score.
pub fn spans_to_output(
    pair: &TokenizedPair,
    post_text: &str,
    spans: &[(AttributeType, TokenSpan)],
) -> Result<Vec<SpanPrediction>, DecodeError> {
    let mut out = spans
        .iter()
        .map(|(kind, s)| {
            let span = tokens_to_char_span(pair, s.start, s.end)?;
            Ok(SpanPrediction {
                kind: *kind,
                probability: s.score,
                text: char_slice(post_text, span).to_string(),
                span,
                tokens: (s.start, s.end),
            })
        })
        .collect::<Result<Vec<_>, DecodeError>>()?;
    out.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then(b.probability.total_cmp(&a.probability))
            .then(a.span.start.cmp(&b.span.start))
    });
    Ok(out)
}

/// Per-token probabilities of one extraction model for one pair.
///
/// Channel layout: Start-End uses `2a` (start) and `2a + 1` (end) for the
/// `a`-th type in `types`; Contiguous uses channel `a` (inside).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    pub method: ExtractionMethod,
    pub types: Vec<AttributeType>,
    /// `values[channel][token]`.
    pub values: Vec<Vec<f32>>,
}

impl TokenScores {
    fn channel(&self, kind: AttributeType, offset: usize) -> Option<&[f32]> {
        let a = self.types.iter().position(|&t| t == kind)?;
        let per = self.method.channels_per_type();
        self.values.get(a * per + offset).map(Vec::as_slice)
    }

    pub fn start(&self, kind: AttributeType) -> Option<&[f32]> {
        match self.method {
            ExtractionMethod::StartEnd => self.channel(kind, 0),
            ExtractionMethod::Contiguous => None,
        }
    }

    pub fn end(&self, kind: AttributeType) -> Option<&[f32]> {
        match self.method {
            ExtractionMethod::StartEnd => self.channel(kind, 1),
            ExtractionMethod::Contiguous => None,
        }
    }

    pub fn inside(&self, kind: AttributeType) -> Option<&[f32]> {
        match self.method {
            ExtractionMethod::Contiguous => self.channel(kind, 0),
            ExtractionMethod::StartEnd => None,
        }
    }

    /// Decodes every covered attribute type with the method's decoder.
    pub fn decode(&self, config: &DecoderConfig) -> Result<Vec<(AttributeType, TokenSpan)>, DecodeError> {
        let mut out = Vec::new();
        for &kind in &self.types {
            let spans = match self.method {
                ExtractionMethod::StartEnd => decode_start_end(
                    self.start(kind).expect("covered type"),
                    self.end(kind).expect("covered type"),
                    config.threshold_start_end,
                    config.interior_factor,
                    config.cap_for(Some(kind)),
                )?,
                ExtractionMethod::Contiguous => {
                    decode_contiguous(self.inside(kind).expect("covered type"), config.threshold_contiguous)
                }
            };
            out.extend(spans.into_iter().map(|s| (kind, s)));
        }
        Ok(out)
    }
}
