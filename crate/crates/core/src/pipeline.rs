//! Dataset preparation shared by training and evaluation: chunking, candidate
//! sets, TF-IDF scores and per-question reader contexts.

use std::path::Path;

use crate::corpus::{build_candidate_set, load_dataset, DocumentRecord, Split};
use crate::error::{Error, Result};
use crate::heads::Head;
use crate::retrieval::{chunk_text, fit_tfidf, select_indices, Chunk, Selection, TfidfModel};
use crate::text::{tokenize, EmbeddingTable, Token};
use crate::train::ContextRegime;

#[derive(Debug, Clone)]
pub struct PreparedQuestion {
    pub qid: String,
    pub tokens: Vec<Token>,
    pub gold: usize,
    /// Chunk relevance to question plus gold answer (training-time ranking).
    pub train_scores: Vec<f64>,
    /// Chunk relevance to the question alone (evaluation-time ranking).
    pub eval_scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PreparedDoc {
    pub doc_id: String,
    pub chunks: Vec<Chunk>,
    pub candidates: Vec<Vec<Token>>,
    pub questions: Vec<PreparedQuestion>,
}

impl PreparedDoc {
    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }
}

/// Chunks every document of `docs`.
pub fn chunk_documents(docs: &[DocumentRecord], budget: usize) -> Vec<Vec<Chunk>> {
    docs.iter()
        .map(|d| chunk_text(&d.doc_id, &d.summary_text, budget))
        .collect()
}

/// Builds candidate sets and TF-IDF scores for every question.
///
/// Fails with an integrity error if a gold answer cannot be located in its
/// document's candidate set.
pub fn prepare_documents(docs: &[DocumentRecord], tfidf: &TfidfModel, budget: usize) -> Result<Vec<PreparedDoc>> {
    let chunked = chunk_documents(docs, budget);
    docs.iter()
        .zip(chunked)
        .map(|(doc, chunks)| {
            if chunks.is_empty() {
                return Err(Error::Integrity(format!("document `{}` has no tokens", doc.doc_id)));
            }
            let set = build_candidate_set(doc)?;
            let questions = doc
                .questions
                .iter()
                .map(|q| {
                    let gold = set.gold_index_for(&q.qid).ok_or_else(|| {
                        Error::Integrity(format!(
                            "gold answer of question `{}` in `{}` is not a candidate",
                            q.qid, doc.doc_id
                        ))
                    })?;
                    let tokens = tokenize(&q.question_text);
                    let mut train_query = tokens.clone();
                    train_query.extend(tokenize(&q.gold_answer_text));
                    Ok(PreparedQuestion {
                        qid: q.qid.clone(),
                        train_scores: tfidf.score(&chunks, &train_query),
                        eval_scores: tfidf.score(&chunks, &tokens),
                        tokens,
                        gold,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedDoc {
                doc_id: doc.doc_id.clone(),
                candidates: set.candidates.iter().map(|c| tokenize(c)).collect(),
                chunks,
                questions,
            })
        })
        .collect()
}

/// The reader inputs for one question: token sequences (an empty sequence
/// stands for the zero-vector context) and the TF-IDF score of each.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pub contexts: Vec<Vec<Token>>,
    pub tfidf: Vec<f64>,
    /// Chunk indices each context is made of.
    pub chunk_indices: Vec<Vec<usize>>,
}

/// Selects the contexts a question is read with.
///
/// Multi-chunk heads see each selected chunk separately. The vanilla head
/// reads one context: the selected chunks joined in document order (for
/// `Full`, the whole summary).
pub fn build_contexts(
    doc: &PreparedDoc,
    scores: &[f64],
    regime: ContextRegime,
    head: Head,
    seed: u64,
) -> Result<ContextSet> {
    let selection = match regime {
        ContextRegime::NoContext => {
            return Ok(ContextSet {
                contexts: vec![Vec::new()],
                tfidf: vec![0.0],
                chunk_indices: vec![Vec::new()],
            })
        }
        ContextRegime::Top(k) => Selection::TopK(k),
        ContextRegime::Uniform(k) => Selection::UniformK(k),
        ContextRegime::Full => Selection::Full,
    };
    let mut chunks = doc.chunks.clone();
    for (c, &s) in chunks.iter_mut().zip(scores) {
        c.tfidf_score = s;
    }
    let idx = select_indices(&chunks, selection, seed)?;
    if head.is_multi_chunk() {
        Ok(ContextSet {
            contexts: idx.iter().map(|&i| chunks[i].tokens.clone()).collect(),
            tfidf: idx.iter().map(|&i| scores[i]).collect(),
            chunk_indices: idx.iter().map(|&i| vec![i]).collect(),
        })
    } else {
        let joined = idx.iter().flat_map(|&i| chunks[i].tokens.iter().cloned()).collect();
        let best = idx.iter().map(|&i| scores[i]).fold(0.0, f64::max);
        Ok(ContextSet {
            contexts: vec![joined],
            tfidf: vec![best],
            chunk_indices: vec![idx],
        })
    }
}

/// Loaded splits, embeddings and the TF-IDF model fitted on training chunks.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub embeddings: EmbeddingTable,
    pub tfidf: TfidfModel,
    pub train: Vec<PreparedDoc>,
    pub valid: Vec<PreparedDoc>,
    pub test: Vec<PreparedDoc>,
}

impl Experiment {
    pub fn from_records(
        train: &[DocumentRecord],
        valid: &[DocumentRecord],
        test: &[DocumentRecord],
        embeddings: EmbeddingTable,
        budget: usize,
    ) -> Result<Self> {
        let train_chunks: Vec<Chunk> = chunk_documents(train, budget).into_iter().flatten().collect();
        let tfidf = fit_tfidf(&train_chunks)?;
        Ok(Self {
            train: prepare_documents(train, &tfidf, budget)?,
            valid: prepare_documents(valid, &tfidf, budget)?,
            test: prepare_documents(test, &tfidf, budget)?,
            embeddings,
            tfidf,
        })
    }

    /// Reads `train`/`valid`/`test` JSONL files from `data_dir`.
    pub fn load(data_dir: &Path, embeddings: &Path, embed_dim: usize, budget: usize) -> Result<Self> {
        let table = EmbeddingTable::load(embeddings, embed_dim)?;
        let train = load_dataset(data_dir, Split::Train)?;
        let valid = load_dataset(data_dir, Split::Valid)?;
        let test = load_dataset(data_dir, Split::Test)?;
        Self::from_records(&train, &valid, &test, table, budget)
    }

    pub fn split(&self, split: Split) -> &[PreparedDoc] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}
