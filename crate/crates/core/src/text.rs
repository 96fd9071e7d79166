//! Tokenization, sentence splitting and frozen word-embedding lookup.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::compute::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Case-folded, whitespace-free token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(String);

impl Token {
    /// Builds a token from already-normalized text. Returns `None` for empty
    /// input or input containing whitespace.
    pub fn new(surface: impl Into<String>) -> Option<Self> {
        let s = surface.into();
        if s.is_empty() || s.chars().any(char::is_whitespace) {
            None
        } else {
            Some(Token(s))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Lowercases, splits on whitespace and detaches every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(Token(std::mem::take(&mut word)));
        }
        if !ch.is_whitespace() {
            out.push(Token(ch.to_string()));
        }
    }
    if !word.is_empty() {
        out.push(Token(word));
    }
    out
}

pub fn join_tokens(tokens: &[Token]) -> String {
    tokens.iter().map(Token::as_str).collect::<Vec<_>>().join(" ")
}

/// Splits after `.`, `?` or `!` when followed by whitespace or the end of
/// the text. Abbreviations are not special-cased.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, ch)) = iter.next() {
        if !matches!(ch, '.' | '?' | '!') {
            continue;
        }
        let at_boundary = match iter.peek() {
            None => true,
            Some(&(_, next)) => next.is_whitespace(),
        };
        if at_boundary {
            let end = i + ch.len_utf8();
            let sentence = text[start..end].trim();
            if !sentence.is_empty() {
                out.push(sentence.to_string());
            }
            start = end;
        }
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

/// Read-only table of pretrained word vectors.
///
/// There is no mutating API after construction, so vectors stay bit-identical
/// for the lifetime of the table (embeddings are never trained).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    entries: HashMap<String, Vec<f32>>,
    /// Insertion order, for stable serialization.
    order: Vec<String>,
}

impl EmbeddingTable {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.entries.get(token).map(Vec::as_slice)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    /// Builds a table from `(token, vector)` pairs; later duplicates are ignored.
    pub fn from_entries<I>(dimension: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f32>)>,
    {
        let mut table = EmbeddingTable {
            dimension,
            entries: HashMap::new(),
            order: Vec::new(),
        };
        for (i, (tok, v)) in entries.into_iter().enumerate() {
            if v.len() != dimension {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {dimension} values for `{tok}`, found {}", v.len()),
                });
            }
            table.insert(tok, v);
        }
        Ok(table)
    }

    fn insert(&mut self, tok: String, v: Vec<f32>) -> bool {
        if self.entries.contains_key(&tok) {
            return false;
        }
        self.order.push(tok.clone());
        self.entries.insert(tok, v);
        true
    }

    /// Parses the whitespace-separated text format: a token followed by
    /// `dimension` decimal values per line. Blank lines are skipped.
    pub fn from_reader<R: BufRead>(reader: R, dimension: usize) -> Result<Self> {
        let mut table = EmbeddingTable {
            dimension,
            entries: HashMap::new(),
            order: Vec::new(),
        };
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            let mut fields = line.split_whitespace();
            let Some(tok) = fields.next() else { continue };
            let values = fields
                .map(|f| {
                    f.parse::<f32>().map_err(|_| Error::Parse {
                        line: lineno,
                        message: format!("invalid number `{f}`"),
                    })
                })
                .collect::<Result<Vec<f32>>>()?;
            if values.len() != dimension {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected {dimension} values for `{tok}`, found {}", values.len()),
                });
            }
            if !table.insert(tok.to_string(), values) {
                log::warn!("embedding line {lineno}: duplicate token `{tok}` ignored");
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path, dimension: usize) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file), dimension)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for tok in &self.order {
            write!(w, "{tok}")?;
            for v in &self.entries[tok] {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Gaussian vectors scaled by `1/sqrt(dimension)`, one per token, drawn in
    /// the given order from a seeded stream.
    pub fn random<'a>(tokens: impl IntoIterator<Item = &'a str>, dimension: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dimension.max(1) as f64).sqrt();
        let mut table = EmbeddingTable {
            dimension,
            entries: HashMap::new(),
            order: Vec::new(),
        };
        for tok in tokens {
            let v = (0..dimension)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    (x * scale) as f32
                })
                .collect();
            table.insert(tok.to_string(), v);
        }
        table
    }
}

/// Loads a pretrained embedding file (see [`EmbeddingTable::from_reader`]).
pub fn load_embeddings(path: &Path, dimension: usize) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path, dimension)
}

/// `len x dimension` matrix of token vectors; unknown tokens map to zeros.
pub fn embed<F: Scalar, T: AsRef<str>>(tokens: &[T], table: &EmbeddingTable) -> Tensor<F> {
    let d = table.dimension();
    let mut data = Vec::with_capacity(tokens.len() * d);
    for t in tokens {
        match table.get(t.as_ref()) {
            Some(v) => data.extend(v.iter().map(|&x| F::from_f64(x as f64))),
            None => data.extend(std::iter::repeat(F::zero()).take(d)),
        }
    }
    Tensor::matrix(tokens.len(), d, data).expect("row-major layout")
}
