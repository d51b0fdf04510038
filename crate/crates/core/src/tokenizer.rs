//! Cased WordPiece tokenizer with code-point offsets.
//!
//! Pre-tokenization follows BERT's basic tokenizer without lower-casing or
//! accent stripping: whitespace splits words, punctuation and CJK characters
//! become single-character words and control characters are dropped. Each
//! word is then split greedily into the longest vocabulary pieces, with
//! continuation pieces carrying the `##` prefix.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::corpus::CharSpan;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("i/o error reading vocabulary")]
    Io(#[from] std::io::Error),
    #[error("vocabulary is missing required token `{0}`")]
    MissingSpecial(&'static str),
    #[error("duplicate vocabulary entry `{0}`")]
    Duplicate(String),
}

/// One produced token with its code-point range in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub span: CharSpan,
}

#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '«' | '»' | '¡' | '¿' | '§' | '¶' | '·' | '\u{3000}'..='\u{303F}'
        )
}

fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{4E00}'..='\u{9FFF}' | '\u{3400}'..='\u{4DBF}' | '\u{20000}'..='\u{2A6DF}' |
        '\u{2A700}'..='\u{2B73F}' | '\u{2B740}'..='\u{2B81F}' | '\u{2B820}'..='\u{2CEAF}' |
        '\u{F900}'..='\u{FAFF}' | '\u{2F800}'..='\u{2FA1F}')
}

/// Splits text into words with code-point spans.
pub fn pre_tokenize(text: &str) -> Vec<CharSpan> {
    let mut words = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.chars().enumerate() {
        let is_control = c.is_control() && !c.is_whitespace();
        if c.is_whitespace() || is_control || c == '\u{FFFD}' || c == '\0' {
            if let Some(s) = start.take() {
                words.push(CharSpan::new(s, i));
            }
        } else if is_punctuation(c) || is_cjk(c) {
            if let Some(s) = start.take() {
                words.push(CharSpan::new(s, i));
            }
            words.push(CharSpan::new(i, i + 1));
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        words.push(CharSpan::new(s, text.chars().count()));
    }
    words
}

impl WordPieceTokenizer {
    pub fn from_vocab<I, S>(entries: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let vocab: Vec<String> = entries.into_iter().map(Into::into).collect();
        let mut ids = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(TokenizerError::Duplicate(tok.clone()));
            }
        }
        let get = |t: &'static str| ids.get(t).copied().ok_or(TokenizerError::MissingSpecial(t));
        Ok(WordPieceTokenizer {
            pad: get(PAD)?,
            unk: get(UNK)?,
            cls: get(CLS)?,
            sep: get(SEP)?,
            vocab,
            ids,
        })
    }

    /// Reads a `vocab.txt` with one token per line.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_vocab(text.lines().map(|l| l.trim_end_matches('\r').to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for tok in &self.vocab {
            writeln!(f, "{tok}")?;
        }
        f.flush()
    }

    /// Builds a vocabulary from raw texts: the special tokens, every seen
    /// character as a word-initial and a continuation piece, and every word
    /// occurring at least `min_count` times.
    pub fn build(texts: &[&str], min_count: usize) -> Self {
        let mut words: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeMap<char, ()> = BTreeMap::new();
        for text in texts {
            let chars_vec: Vec<char> = text.chars().collect();
            for w in pre_tokenize(text) {
                let word: String = chars_vec[w.start..w.end].iter().collect();
                for c in word.chars() {
                    chars.insert(c, ());
                }
                *words.entry(word).or_insert(0) += 1;
            }
        }
        let mut vocab: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        for c in chars.keys() {
            vocab.push(c.to_string());
            vocab.push(format!("{CONTINUATION}{c}"));
        }
        let mut seen: std::collections::HashSet<String> = vocab.iter().cloned().collect();
        for (w, n) in words {
            if n >= min_count && seen.insert(w.clone()) {
                vocab.push(w);
            }
        }
        Self::from_vocab(vocab).expect("built vocabulary is well-formed")
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    /// Tokenizes `text`; every token carries the code-point span it covers.
    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        for word in pre_tokenize(text) {
            self.word_pieces(&chars[word.start..word.end], word.start, &mut out);
        }
        out
    }

    fn word_pieces(&self, word: &[char], offset: usize, out: &mut Vec<Token>) {
        let whole = CharSpan::new(offset, offset + word.len());
        if word.len() > MAX_WORD_CHARS {
            out.push(Token {
                id: self.unk,
                span: whole,
            });
            return;
        }
        let mark = out.len();
        let mut start = 0;
        let mut buf = String::new();
        while start < word.len() {
            let mut end = word.len();
            let mut found = None;
            while start < end {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.extend(&word[start..end]);
                if let Some(&id) = self.ids.get(&buf) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(Token {
                        id,
                        span: CharSpan::new(offset + start, offset + end),
                    });
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(Token {
                        id: self.unk,
                        span: whole,
                    });
                    return;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(vocab: &[&str]) -> WordPieceTokenizer {
        let mut v = vec![PAD, UNK, CLS, SEP, MASK];
        v.extend_from_slice(vocab);
        WordPieceTokenizer::from_vocab(v.iter().map(|s| s.to_string())).unwrap()
    }

    fn pieces(t: &WordPieceTokenizer, text: &str) -> Vec<(String, usize, usize)> {
        t.tokenize(text)
            .into_iter()
            .map(|tk| (t.id_to_token(tk.id).unwrap().to_string(), tk.span.start, tk.span.end))
            .collect()
    }

    #[test]
    fn pre_tokenization_splits_punctuation() {
        let spans = pre_tokenize("Hallo, wie geht's?");
        let text: Vec<char> = "Hallo, wie geht's?".chars().collect();
        let words: Vec<String> = spans.iter().map(|s| text[s.start..s.end].iter().collect()).collect();
        assert_eq!(words, ["Hallo", ",", "wie", "geht", "'", "s", "?"]);
    }

    #[test]
    fn greedy_longest_match() {
        let t = tok(&["Bauch", "##schmerzen", "##schmerz", "##en", "Kopf"]);
        assert_eq!(
            pieces(&t, "Bauchschmerzen Kopf"),
            vec![
                ("Bauch".into(), 0, 5),
                ("##schmerzen".into(), 5, 14),
                ("Kopf".into(), 15, 19)
            ]
        );
    }

    #[test]
    fn unknown_word_maps_to_single_unk() {
        let t = tok(&["Bauch"]);
        assert_eq!(pieces(&t, "Bauchweh"), vec![("[UNK]".into(), 0, 8)]);
    }

    #[test]
    fn offsets_are_code_points() {
        let t = tok(&["Übelkeit", "ständig"]);
        assert_eq!(
            pieces(&t, "ständig Übelkeit"),
            vec![("ständig".into(), 0, 7), ("Übelkeit".into(), 8, 16)]
        );
    }

    #[test]
    fn built_vocab_covers_every_character() {
        let t = WordPieceTokenizer::build(&["Mir ist übel."], 2);
        // No word reaches min_count, so words split into characters.
        let p = pieces(&t, "übel");
        assert_eq!(p.len(), 4);
        assert_eq!(p[1].0, "##b");
        assert!(t.tokenize("Mir ist übel.").iter().all(|tk| tk.id != t.unk_id()));
    }

    #[test]
    fn missing_specials_are_rejected() {
        assert!(matches!(
            WordPieceTokenizer::from_vocab(vec!["a".to_string()]),
            Err(TokenizerError::MissingSpecial(_))
        ));
    }
}
