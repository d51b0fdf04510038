//! Paired `[CLS] description [SEP] post [SEP]` encoding and the alignment
//! between character-level annotations and subword-token targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AttributeAnnotation, AttributeType, CharSpan};
use crate::tokenizer::WordPieceTokenizer;

/// Default encoder length limit.
pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodingError {
    #[error("post text is empty")]
    EmptyPost,
    #[error("symptom description needs {needed} tokens but the encoder limit is {max_len}")]
    DescriptionTooLong { needed: usize, max_len: usize },
    #[error("token range {i}..={j} is invalid")]
    InvalidRange { i: usize, j: usize },
    #[error("token {0} is not part of the post section")]
    NotPostToken(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Section {
    Special,
    Symptom,
    Post,
}

/// Encoded (description, post) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    pub tokens: Vec<u32>,
    /// Code-point span into the post text; `None` outside the post section.
    pub char_offsets: Vec<Option<CharSpan>>,
    pub section: Vec<Section>,
    pub truncated: bool,
}

impl TokenizedPair {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Segment ids: 0 up to and including the first `[SEP]`, 1 afterwards.
    pub fn type_ids(&self) -> Vec<u32> {
        let mut seen_sep = false;
        let mut out = Vec::with_capacity(self.tokens.len());
        for (k, s) in self.section.iter().enumerate() {
            out.push(u32::from(seen_sep));
            if *s == Section::Special && k > 0 && !seen_sep {
                seen_sep = true;
            }
        }
        out
    }

    /// 1 for post-section tokens, 0 elsewhere.
    pub fn post_mask(&self) -> Vec<f32> {
        self.section
            .iter()
            .map(|s| if *s == Section::Post { 1.0 } else { 0.0 })
            .collect()
    }

    /// Indices of the first and last post tokens.
    pub fn post_range(&self) -> Option<(usize, usize)> {
        let first = self.section.iter().position(|s| *s == Section::Post)?;
        let last = self.section.iter().rposition(|s| *s == Section::Post)?;
        Some((first, last))
    }
}

/// Encodes `[CLS] description [SEP] post [SEP]`, truncating the post tail when
/// the pair exceeds `max_len`.
pub fn encode_pair(
    description: &str,
    post_text: &str,
    tokenizer: &WordPieceTokenizer,
    max_len: usize,
) -> Result<TokenizedPair, EncodingError> {
    if post_text.is_empty() {
        return Err(EncodingError::EmptyPost);
    }
    let desc = tokenizer.tokenize(description);
    let post = tokenizer.tokenize(post_text);
    let needed = desc.len() + 3;
    if needed >= max_len {
        return Err(EncodingError::DescriptionTooLong {
            needed: needed + 1,
            max_len,
        });
    }
    let room = max_len - needed;
    let truncated = post.len() > room;

    let n = needed + post.len().min(room);
    let mut tokens = Vec::with_capacity(n);
    let mut char_offsets = Vec::with_capacity(n);
    let mut section = Vec::with_capacity(n);
    let mut push = |id, off, sec| {
        tokens.push(id);
        char_offsets.push(off);
        section.push(sec);
    };
    push(tokenizer.cls_id(), None, Section::Special);
    for t in &desc {
        push(t.id, None, Section::Symptom);
    }
    push(tokenizer.sep_id(), None, Section::Special);
    for t in post.iter().take(room) {
        push(t.id, Some(t.span), Section::Post);
    }
    push(tokenizer.sep_id(), None, Section::Special);
    Ok(TokenizedPair {
        tokens,
        char_offsets,
        section,
        truncated,
    })
}

/// Encodes a single text as `[CLS] text [SEP]` (post section only).
pub fn encode_single(
    text: &str,
    tokenizer: &WordPieceTokenizer,
    max_len: usize,
) -> Result<TokenizedPair, EncodingError> {
    if text.is_empty() {
        return Err(EncodingError::EmptyPost);
    }
    let toks = tokenizer.tokenize(text);
    let room = max_len.saturating_sub(2);
    let truncated = toks.len() > room;
    let mut pair = TokenizedPair {
        tokens: vec![tokenizer.cls_id()],
        char_offsets: vec![None],
        section: vec![Section::Special],
        truncated,
    };
    for t in toks.iter().take(room) {
        pair.tokens.push(t.id);
        pair.char_offsets.push(Some(t.span));
        pair.section.push(Section::Post);
    }
    pair.tokens.push(tokenizer.sep_id());
    pair.char_offsets.push(None);
    pair.section.push(Section::Special);
    Ok(pair)
}

/// Binary start/end/inside target vectors for one attribute type.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeTargets {
    pub start: Vec<f32>,
    pub end: Vec<f32>,
    pub inside: Vec<f32>,
    /// Token ranges of the aligned gold spans.
    pub spans: Vec<(usize, usize)>,
}

impl TypeTargets {
    fn zeros(n: usize) -> Self {
        TypeTargets {
            start: vec![0.0; n],
            end: vec![0.0; n],
            inside: vec![0.0; n],
            spans: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTargets {
    /// Indexed by [`AttributeType::index`].
    pub types: Vec<TypeTargets>,
    /// Gold spans lost to truncation, including those straddling the cut.
    pub dropped: usize,
}

impl TokenTargets {
    pub fn of(&self, kind: AttributeType) -> &TypeTargets {
        &self.types[kind.index()]
    }
}

/// Minimal contiguous post-token range whose offsets cover `span`.
pub fn covering_tokens(pair: &TokenizedPair, span: CharSpan) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = None;
    for (k, off) in pair.char_offsets.iter().enumerate() {
        if let Some(o) = off {
            if o.overlaps(&span) {
                first.get_or_insert(k);
                last = Some(k);
            }
        }
    }
    Some((first?, last?))
}

/// Maps attribute annotations to per-token targets.
///
/// Partially covered tokens are included whole. Spans reaching past the last
/// kept post token of a truncated pair are dropped and counted.
pub fn align_spans_to_tokens(pair: &TokenizedPair, annotations: &[AttributeAnnotation]) -> TokenTargets {
    let n = pair.len();
    let mut types: Vec<TypeTargets> = (0..AttributeType::ALL.len()).map(|_| TypeTargets::zeros(n)).collect();
    let kept_end = pair
        .post_range()
        .and_then(|(_, last)| pair.char_offsets[last])
        .map(|o| o.end)
        .unwrap_or(0);
    let mut dropped = 0;
    for a in annotations {
        if pair.truncated && a.span.end > kept_end {
            dropped += 1;
            continue;
        }
        let Some((i, j)) = covering_tokens(pair, a.span) else {
            dropped += 1;
            continue;
        };
        let t = &mut types[a.kind.index()];
        t.start[i] = 1.0;
        t.end[j] = 1.0;
        for k in i..=j {
            t.inside[k] = 1.0;
        }
        t.spans.push((i, j));
    }
    TokenTargets { types, dropped }
}

/// Character span covered by post tokens `i..=j`.
pub fn tokens_to_char_span(pair: &TokenizedPair, i: usize, j: usize) -> Result<CharSpan, EncodingError> {
    if j < i || j >= pair.len() {
        return Err(EncodingError::InvalidRange { i, j });
    }
    let start = pair.char_offsets[i].ok_or(EncodingError::NotPostToken(i))?;
    let end = pair.char_offsets[j].ok_or(EncodingError::NotPostToken(j))?;
    if let Some(k) = (i..=j).find(|&k| pair.section[k] != Section::Post) {
        return Err(EncodingError::NotPostToken(k));
    }
    Ok(CharSpan::new(start.start, end.end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::SymptomId;
    use crate::tokenizer::{CLS, MASK, PAD, SEP, UNK};

    fn tokenizer(words: &[&str]) -> WordPieceTokenizer {
        let mut v: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        v.extend(words.iter().map(|s| s.to_string()));
        WordPieceTokenizer::from_vocab(v).unwrap()
    }

    fn attr(kind: AttributeType, s: usize, e: usize) -> AttributeAnnotation {
        AttributeAnnotation {
            symptom_id: SymptomId::new("pain"),
            kind,
            span: CharSpan::new(s, e),
        }
    }

    #[test]
    fn layout() {
        let t = tokenizer(&["X", "Y"]);
        let p = encode_pair("X", "Y", &t, 16).unwrap();
        assert_eq!(p.tokens, vec![t.cls_id(), 5, t.sep_id(), 6, t.sep_id()]);
        assert_eq!(
            p.section,
            vec![
                Section::Special,
                Section::Symptom,
                Section::Special,
                Section::Post,
                Section::Special
            ]
        );
        assert_eq!(p.char_offsets[3], Some(CharSpan::new(0, 1)));
        assert_eq!(p.type_ids(), vec![0, 0, 0, 1, 1]);
        assert!(!p.truncated);
    }

    #[test]
    fn empty_post_is_an_error() {
        let t = tokenizer(&[]);
        assert_eq!(encode_pair("X", "", &t, 16).unwrap_err(), EncodingError::EmptyPost);
    }

    #[test]
    fn long_post_is_truncated_to_max_len() {
        let t = tokenizer(&["ab"]);
        let post = "ab ".repeat(3334);
        let p = encode_pair("ab", &post, &t, 512).unwrap();
        assert!(p.truncated);
        assert_eq!(p.len(), 512);
        assert_eq!(*p.section.last().unwrap(), Section::Special);
    }

    #[test]
    fn table_targets() {
        let text = "I have pain in my right knee and shin";
        let t = tokenizer(&["I", "have", "pain", "in", "my", "right", "knee", "and", "shin"]);
        let p = encode_pair("pain", text, &t, 64).unwrap();
        let spans = [
            attr(AttributeType::Location, 18, 28),
            attr(AttributeType::Location, 33, 37),
        ];
        let tt = align_spans_to_tokens(&p, &spans);
        let loc = tt.of(AttributeType::Location);
        // Post tokens start after [CLS] pain [SEP].
        let post = |v: &Vec<f32>| v[3..12].to_vec();
        assert_eq!(post(&loc.start), vec![0., 0., 0., 0., 0., 1., 0., 0., 1.]);
        assert_eq!(post(&loc.end), vec![0., 0., 0., 0., 0., 0., 1., 0., 1.]);
        assert_eq!(post(&loc.inside), vec![0., 0., 0., 0., 0., 1., 1., 0., 1.]);
        assert_eq!(tt.dropped, 0);
        let empty = align_spans_to_tokens(&p, &[]);
        assert!(empty.types.iter().all(|t| t.inside.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn partial_token_overlap_takes_whole_token() {
        let t = tokenizer(&["Bauch", "##schmerzen"]);
        let p = encode_pair("Bauch", "Bauchschmerzen", &t, 16).unwrap();
        // Span "schmer" covers part of the second piece only.
        let tt = align_spans_to_tokens(&p, &[attr(AttributeType::Description, 5, 11)]);
        assert_eq!(tt.of(AttributeType::Description).spans, vec![(4, 4)]);
        assert_eq!(tokens_to_char_span(&p, 4, 4).unwrap(), CharSpan::new(5, 14));
    }

    #[test]
    fn truncated_spans_are_dropped() {
        let t = tokenizer(&["a", "b"]);
        let p = encode_pair("a", "a b a b a b", &t, 7).unwrap();
        // Room for 3 post tokens: "a b a" covering chars 0..5.
        assert!(p.truncated);
        let tt = align_spans_to_tokens(
            &p,
            &[
                attr(AttributeType::Time, 0, 1),
                attr(AttributeType::Time, 4, 7),
                attr(AttributeType::Time, 8, 9),
            ],
        );
        assert_eq!(tt.dropped, 2);
        assert_eq!(tt.of(AttributeType::Time).spans, vec![(3, 3)]);
    }

    #[test]
    fn char_span_errors() {
        let t = tokenizer(&["X", "Y"]);
        let p = encode_pair("X", "Y Y", &t, 16).unwrap();
        assert_eq!(tokens_to_char_span(&p, 3, 3).unwrap(), CharSpan::new(0, 1));
        assert_eq!(tokens_to_char_span(&p, 3, 4).unwrap(), CharSpan::new(0, 3));
        assert!(matches!(
            tokens_to_char_span(&p, 4, 3),
            Err(EncodingError::InvalidRange { .. })
        ));
        assert!(matches!(
            tokens_to_char_span(&p, 1, 3),
            Err(EncodingError::NotPostToken(1))
        ));
        assert!(matches!(
            tokens_to_char_span(&p, 3, 5),
            Err(EncodingError::NotPostToken(5))
        ));
    }
}
