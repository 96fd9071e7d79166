//! Sentence-aligned chunking and TF-IDF chunk ranking.

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::text::{split_sentences, tokenize, Token};

pub const DEFAULT_CHUNK_BUDGET: usize = 40;

/// Contiguous run of whole sentences from one document.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub tokens: Vec<Token>,
    /// Indices of the sentences this chunk covers.
    pub sentences: Range<usize>,
    pub tfidf_score: f64,
}

/// Greedily packs whole sentences into chunks of at most `budget` tokens.
///
/// A sentence that does not fit starts a new chunk; a sentence longer than
/// `budget` becomes a chunk on its own and is never split. Empty sentences
/// are skipped.
pub fn chunk_document(doc_id: &str, sentences: &[Vec<Token>], budget: usize) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut start = 0;
    let flush = |chunks: &mut Vec<Chunk>, current: &mut Vec<Token>, range: Range<usize>| {
        if !current.is_empty() {
            chunks.push(Chunk {
                doc_id: doc_id.to_string(),
                chunk_index: chunks.len(),
                tokens: std::mem::take(current),
                sentences: range,
                tfidf_score: 0.0,
            });
        }
    };
    for (i, sentence) in sentences.iter().enumerate() {
        if sentence.is_empty() {
            continue;
        }
        if !current.is_empty() && current.len() + sentence.len() > budget {
            flush(&mut chunks, &mut current, start..i);
        }
        if current.is_empty() {
            start = i;
        }
        current.extend(sentence.iter().cloned());
    }
    flush(&mut chunks, &mut current, start..sentences.len());
    chunks
}

/// Tokenized sentences of a raw text.
pub fn sentence_tokens(text: &str) -> Vec<Vec<Token>> {
    split_sentences(text).iter().map(|s| tokenize(s)).collect()
}

pub fn chunk_text(doc_id: &str, text: &str, budget: usize) -> Vec<Chunk> {
    chunk_document(doc_id, &sentence_tokens(text), budget)
}

/// Smoothed TF-IDF statistics: raw term counts, `idf(t) = ln((1+N)/(1+df_t)) + 1`,
/// cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfModel {
    df: HashMap<String, usize>,
    num_docs: usize,
}

impl TfidfModel {
    /// Fits document frequencies over token sequences (one per chunk).
    pub fn fit<'a, I>(chunks: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [Token]>,
    {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n = 0;
        for tokens in chunks {
            n += 1;
            let mut seen: Vec<&str> = tokens.iter().map(Token::as_str).collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t.to_string()).or_default() += 1;
            }
        }
        if n == 0 {
            return Err(Error::Usage("cannot fit TF-IDF on zero chunks".into()));
        }
        Ok(Self { df, num_docs: n })
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn df(&self, token: &str) -> usize {
        self.df.get(token).copied().unwrap_or(0)
    }

    pub fn idf(&self, token: &str) -> f64 {
        let n = self.num_docs as f64;
        ((1.0 + n) / (1.0 + self.df(token) as f64)).ln() + 1.0
    }

    fn weights<'a>(&self, tokens: &'a [Token]) -> HashMap<&'a str, f64> {
        let mut tf: HashMap<&'a str, f64> = HashMap::new();
        for t in tokens {
            *tf.entry(t.as_str()).or_default() += 1.0;
        }
        for (t, w) in tf.iter_mut() {
            *w *= self.idf(t);
        }
        tf
    }

    /// Cosine similarity of the tf·idf vectors; 0 when either is all-zero.
    pub fn similarity(&self, a: &[Token], b: &[Token]) -> f64 {
        let wa = self.weights(a);
        let wb = self.weights(b);
        let norm = |w: &HashMap<&str, f64>| w.values().map(|v| v * v).sum::<f64>().sqrt();
        let (na, nb) = (norm(&wa), norm(&wb));
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let (small, large) = if wa.len() <= wb.len() { (&wa, &wb) } else { (&wb, &wa) };
        let dot: f64 = small
            .iter()
            .filter_map(|(t, v)| large.get(t).map(|u| u * v))
            .sum();
        // an empty float sum is -0.0
        if dot == 0.0 {
            return 0.0;
        }
        dot / (na * nb)
    }

    pub fn score(&self, chunks: &[Chunk], query: &[Token]) -> Vec<f64> {
        chunks.iter().map(|c| self.similarity(&c.tokens, query)).collect()
    }
}

/// Fits on every chunk in `chunks`.
pub fn fit_tfidf(chunks: &[Chunk]) -> Result<TfidfModel> {
    TfidfModel::fit(chunks.iter().map(|c| c.tokens.as_slice()))
}

/// Writes the query similarity of every chunk into its `tfidf_score`.
pub fn score_chunks(model: &TfidfModel, chunks: &mut [Chunk], query: &[Token]) {
    for c in chunks.iter_mut() {
        c.tfidf_score = model.similarity(&c.tokens, query);
    }
}

/// Which chunks of a document the reader sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// The `k` highest-scoring chunks, ties to the earlier chunk.
    TopK(usize),
    /// `k` chunks sampled uniformly without replacement.
    UniformK(usize),
    Full,
}

/// Selected chunks, always returned in document order.
pub fn select_chunks(chunks: &[Chunk], selection: Selection, seed: u64) -> Result<Vec<Chunk>> {
    Ok(select_indices(chunks, selection, seed)?
        .into_iter()
        .map(|i| chunks[i].clone())
        .collect())
}

/// Positions (into `chunks`) chosen by [`select_chunks`].
pub fn select_indices(chunks: &[Chunk], selection: Selection, seed: u64) -> Result<Vec<usize>> {
    let m = chunks.len();
    let mut idx: Vec<usize> = match selection {
        Selection::TopK(0) | Selection::UniformK(0) => {
            return Err(Error::Parameter("chunk selection needs k >= 1".into()))
        }
        Selection::Full => (0..m).collect(),
        _ if matches!(selection, Selection::TopK(k) | Selection::UniformK(k) if k >= m) => (0..m).collect(),
        Selection::TopK(k) => {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| {
                chunks[b]
                    .tfidf_score
                    .total_cmp(&chunks[a].tfidf_score)
                    .then(chunks[a].chunk_index.cmp(&chunks[b].chunk_index))
            });
            order.truncate(k);
            order
        }
        Selection::UniformK(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, m, k).into_vec()
        }
    };
    idx.sort_unstable();
    Ok(idx)
}

#[derive(Serialize)]
struct ChunkDump<'a> {
    doc_id: &'a str,
    chunk_index: usize,
    tokens: Vec<&'a str>,
    score: f64,
}

/// One JSON object per chunk: `{"doc_id", "chunk_index", "tokens", "score"}`.
pub fn write_chunk_dump<W: Write>(chunks: &[Chunk], mut w: W) -> std::io::Result<()> {
    for c in chunks {
        let row = ChunkDump {
            doc_id: &c.doc_id,
            chunk_index: c.chunk_index,
            tokens: c.tokens.iter().map(Token::as_str).collect(),
            score: c.tfidf_score,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
