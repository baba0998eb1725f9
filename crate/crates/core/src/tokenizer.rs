//! Offset-preserving tokenization and the vocabulary.
//!
//! The reference tokenizer lowercases for lookup only, splits on whitespace,
//! and emits every punctuation character as its own token. Offsets are in
//! characters (Unicode scalar values), matching SGD span annotations.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const INT: u32 = 4;
pub const PV: u32 = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[int]", "[pv]"];

/// Literal token realizing the NONE intent and NONE value candidates.
pub const NONE_TOKEN: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `tokens` in order; duplicates and
    /// reserved names are skipped.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocabulary { ids: HashMap::new(), tokens: Vec::new() };
        for t in RESERVED {
            v.push(t.to_string());
        }
        for t in tokens {
            let t = t.into();
            if !v.ids.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, t: String) {
        self.ids.insert(t.clone(), self.tokens.len() as u32);
        self.tokens.push(t);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a normalized token, `[UNK]` when absent.
    pub fn id(&self, normalized: &str) -> u32 {
        self.ids.get(normalized).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.ids.contains_key(normalized)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(io)?;
        }
        f.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let lines =
            std::io::BufReader::new(f).lines().collect::<std::io::Result<Vec<_>>>().map_err(|e| Error::io(path, e))?;
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Checkpoint(format!(
                "{}: vocabulary must start with the reserved tokens",
                path.display()
            )));
        }
        let v = Self::from_tokens(lines[RESERVED.len()..].iter().cloned());
        if v.len() != lines.len() {
            return Err(Error::Checkpoint(format!("{}: duplicate vocabulary entries", path.display())));
        }
        Ok(v)
    }
}

/// Keeps the `max_size - 6` most frequent normalized tokens of `corpus`,
/// ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary> {
    if max_size <= RESERVED.len() {
        return Err(Error::Config(format!("vocabulary size {max_size} leaves no room beyond the reserved tokens")));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for (start, end) in split_offsets(text.as_ref()) {
            *counts.entry(normalize(&text.as_ref()[start..end])).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> =
        counts.into_iter().filter(|(t, _)| !RESERVED.contains(&t.as_str())).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    /// Surface form, original case.
    pub text: String,
    /// Character offsets into the source text, end exclusive.
    pub char_start: usize,
    pub char_end: usize,
}

impl Token {
    /// A zero-width special token.
    pub fn special(id: u32) -> Self {
        Token { id, text: RESERVED[id as usize].to_string(), char_start: 0, char_end: 0 }
    }

    pub fn is_special(&self) -> bool {
        self.char_start == self.char_end
    }
}

/// Swappable text-to-token mapping. Implementations must report character
/// offsets such that `text[char_start..char_end]` is the token surface.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Token>;
    fn vocab(&self) -> &Vocabulary;
}

/// Whitespace/punctuation tokenizer over a fixed vocabulary.
#[derive(Debug, Clone, Default)]
pub struct BasicTokenizer {
    vocab: Vocabulary,
}

impl BasicTokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        BasicTokenizer { vocab }
    }
}

impl Tokenizer for BasicTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        tokenize(text, &self.vocab)
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
}

pub fn normalize(surface: &str) -> String {
    surface.to_lowercase()
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Byte ranges of the tokens of `text`.
fn split_offsets(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            out.push((s, i));
        }
        if !c.is_whitespace() {
            out.push((i, i + c.len_utf8()));
        }
    }
    if let Some(s) = word_start {
        out.push((s, text.len()));
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<Token> {
    let spans = split_offsets(text);
    let mut out = Vec::with_capacity(spans.len());
    let mut chars_before = 0usize;
    let mut byte_cursor = 0usize;
    for (start, end) in spans {
        chars_before += text[byte_cursor..start].chars().count();
        let surface = &text[start..end];
        let len = surface.chars().count();
        out.push(Token {
            id: vocab.id(&normalize(surface)),
            text: surface.to_string(),
            char_start: chars_before,
            char_end: chars_before + len,
        });
        chars_before += len;
        byte_cursor = end;
    }
    out
}

/// Substring of `text` between character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let b0 = indices.nth(start).unwrap_or(text.len());
    let b1 = if end > start { indices.nth(end - start - 1).unwrap_or(text.len()) } else { b0 };
    &text[b0..b1]
}

/// Original surface text covered by tokens `span.0 ..= span.1`.
pub fn detokenize_span(text: &str, tokens: &[Token], span: (usize, usize)) -> Result<String> {
    let (first, last) = span;
    if first > last || last >= tokens.len() {
        return Err(Error::Span(format!("token span ({first}, {last}) is invalid for {} tokens", tokens.len())));
    }
    if let Some(t) = tokens[first..=last].iter().find(|t| t.is_special()) {
        return Err(Error::Span(format!("span covers special token {}", t.text)));
    }
    Ok(char_slice(text, tokens[first].char_start, tokens[last].char_end).to_string())
}
