//! Dataset records, candidate sets and the planted synthetic generator.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub qid: String,
    #[serde(rename = "question")]
    pub question_text: String,
    #[serde(rename = "answer")]
    pub gold_answer_text: String,
}

/// One long context with its questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    #[serde(rename = "summary")]
    pub summary_text: String,
    pub questions: Vec<QuestionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

fn validate(doc: &DocumentRecord, line: usize) -> Result<()> {
    let bad = |message: String| Error::Parse { line, message };
    if doc.summary_text.trim().is_empty() {
        return Err(bad(format!("document `{}` has an empty summary", doc.doc_id)));
    }
    let mut qids = HashSet::new();
    for q in &doc.questions {
        if q.gold_answer_text.trim().is_empty() {
            return Err(bad(format!("question `{}` has an empty answer", q.qid)));
        }
        if !qids.insert(q.qid.as_str()) {
            return Err(bad(format!("duplicate qid `{}` in document `{}`", q.qid, doc.doc_id)));
        }
    }
    Ok(())
}

/// Parses JSONL dataset text, one document per non-blank line.
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Vec<DocumentRecord>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: DocumentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        validate(&doc, lineno)?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate doc_id `{}` at line {lineno}",
                doc.doc_id
            )));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn load_dataset_file(path: &Path) -> Result<Vec<DocumentRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let docs = parse_dataset(BufReader::new(file))?;
    log::info!(
        "{}: {} documents, {} questions",
        path.display(),
        docs.len(),
        docs.iter().map(|d| d.questions.len()).sum::<usize>()
    );
    Ok(docs)
}

/// Loads `<dir>/<split>.jsonl`.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Vec<DocumentRecord>> {
    load_dataset_file(&dir.join(split.file_name()))
}

pub fn write_dataset<W: Write>(docs: &[DocumentRecord], mut w: W) -> std::io::Result<()> {
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Case-folded, whitespace-normalized form used as the deduplication key.
pub fn answer_key(answer: &str) -> String {
    answer
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deduplicated answers of all questions of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub doc_id: String,
    pub candidates: Vec<String>,
    gold: HashMap<String, usize>,
}

impl CandidateSet {
    pub fn gold_index_for(&self, qid: &str) -> Option<usize> {
        self.gold.get(qid).copied()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Candidates in first-occurrence order over the document's questions.
pub fn build_candidate_set(doc: &DocumentRecord) -> Result<CandidateSet> {
    if doc.questions.is_empty() {
        return Err(Error::Integrity(format!("document `{}` has no questions", doc.doc_id)));
    }
    let mut candidates = Vec::new();
    let mut index_of: HashMap<String, usize> = HashMap::new();
    let mut gold = HashMap::new();
    for q in &doc.questions {
        let key = answer_key(&q.gold_answer_text);
        let idx = *index_of.entry(key).or_insert_with(|| {
            candidates.push(q.gold_answer_text.clone());
            candidates.len() - 1
        });
        gold.insert(q.qid.clone(), idx);
    }
    Ok(CandidateSet {
        doc_id: doc.doc_id.clone(),
        candidates,
        gold,
    })
}

/// Parameters of the planted synthetic corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub num_docs: usize,
    pub questions_per_doc: usize,
    pub sentences_per_summary: usize,
    /// Tokens per sentence, counting the final period.
    pub tokens_per_sentence: usize,
    /// Size of the content vocabulary that question keys and answers draw from.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_docs: 10,
            questions_per_doc: 5,
            sentences_per_summary: 30,
            tokens_per_sentence: 10,
            vocab_size: 400,
            seed: 0,
        }
    }
}

pub const KEY_TOKENS: usize = 3;
pub const ANSWER_TOKENS: usize = 3;
/// Leading word of every synthetic question; never used in summaries.
pub const QUESTION_WORD: &str = "which";

pub const FILLER_WORDS: &[&str] = &[
    "the", "a", "of", "and", "then", "with", "from", "into", "over", "under", "near", "after",
    "before", "while", "there", "here", "it", "was", "were", "is", "had", "has", "been", "very",
    "quite", "also", "later", "soon", "often", "never", "always", "again", "some", "many", "few",
    "each", "every", "this", "that", "those", "these", "their", "his", "her", "its", "our", "so",
    "but",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Pronounceable three-syllable word for a content-vocabulary index.
pub fn content_word(index: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut rest = index;
    let mut out = String::with_capacity(6);
    for _ in 0..3 {
        let syl = rest % base;
        rest /= base;
        out.push(CONSONANTS[syl / VOWELS.len()] as char);
        out.push(VOWELS[syl % VOWELS.len()] as char);
    }
    out
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.questions_per_doc == 0 || self.sentences_per_summary == 0 || self.vocab_size == 0 {
            return err("synthetic counts must be at least 1");
        }
        if self.tokens_per_sentence < KEY_TOKENS + ANSWER_TOKENS + 1 {
            return err("tokens_per_sentence must leave room for 3 key tokens, 3 answer tokens and a period");
        }
        if self.sentences_per_summary < self.questions_per_doc {
            return err("sentences_per_summary must be at least questions_per_doc");
        }
        if self.vocab_size < self.questions_per_doc * (KEY_TOKENS + ANSWER_TOKENS) {
            return err("vocab_size too small to give every question distinct keys and a distinct gold answer");
        }
        let max_vocab = (CONSONANTS.len() * VOWELS.len()).pow(3);
        if self.vocab_size > max_vocab {
            return err("vocab_size exceeds the synthetic word space");
        }
        Ok(())
    }

    /// All tokens the generator can emit, in a fixed order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.vocab_size).map(content_word).collect();
        v.extend(FILLER_WORDS.iter().map(|s| s.to_string()));
        v.push(QUESTION_WORD.to_string());
        v.push(".".to_string());
        v.push("?".to_string());
        v
    }
}

fn filler_sentence(rng: &mut ChaCha8Rng, words: usize) -> Vec<String> {
    let mut s: Vec<String> = (0..words)
        .map(|_| FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())].to_string())
        .collect();
    s.push(".".into());
    s
}

fn planted_sentence(rng: &mut ChaCha8Rng, keys: &[String], answer: &[String], words: usize) -> Vec<String> {
    let mut units: Vec<Vec<String>> = keys.iter().map(|k| vec![k.clone()]).collect();
    units.push(answer.to_vec());
    units.shuffle(rng);
    let fillers = words - keys.len() - answer.len();
    // distribute fillers over the units.len() + 1 gaps
    let mut gaps = vec![0usize; units.len() + 1];
    for _ in 0..fillers {
        let g = rng.gen_range(0..gaps.len());
        gaps[g] += 1;
    }
    let mut s = Vec::with_capacity(words + 1);
    for (i, unit) in units.iter().enumerate() {
        for _ in 0..gaps[i] {
            s.push(FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())].to_string());
        }
        s.extend(unit.iter().cloned());
    }
    for _ in 0..gaps[units.len()] {
        s.push(FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())].to_string());
    }
    s.push(".".into());
    s
}

/// Deterministic planted corpus.
///
/// Each question `which k1 k2 k3 ?` has a gold answer `a1 a2 a3`, and exactly
/// one summary sentence contains all six content tokens. Every other sentence
/// that is not planted for some question consists of filler words only.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<DocumentRecord>> {
    if config.num_docs == 0 {
        return Ok(Vec::new());
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let words = config.tokens_per_sentence - 1;
    let per_q = KEY_TOKENS + ANSWER_TOKENS;
    let vocab: Vec<usize> = (0..config.vocab_size).collect();

    let mut docs = Vec::with_capacity(config.num_docs);
    for d in 0..config.num_docs {
        let content: Vec<String> = vocab
            .choose_multiple(&mut rng, config.questions_per_doc * per_q)
            .map(|&i| content_word(i))
            .collect();
        let mut slots: Vec<usize> = (0..config.sentences_per_summary).collect();
        slots.shuffle(&mut rng);
        let planted_at = &slots[..config.questions_per_doc];

        let mut sentences: Vec<Vec<String>> = vec![Vec::new(); config.sentences_per_summary];
        let mut questions = Vec::with_capacity(config.questions_per_doc);
        for q in 0..config.questions_per_doc {
            let block = &content[q * per_q..(q + 1) * per_q];
            let (keys, answer) = block.split_at(KEY_TOKENS);
            sentences[planted_at[q]] = planted_sentence(&mut rng, keys, answer, words);
            let mut qkeys = keys.to_vec();
            qkeys.shuffle(&mut rng);
            questions.push(QuestionRecord {
                qid: format!("q{q}"),
                question_text: format!("{QUESTION_WORD} {} ?", qkeys.join(" ")),
                gold_answer_text: answer.join(" "),
            });
        }
        for s in sentences.iter_mut().filter(|s| s.is_empty()) {
            *s = filler_sentence(&mut rng, words);
        }
        let summary = sentences
            .iter()
            .map(|s| s.join(" "))
            .collect::<Vec<_>>()
            .join(" ");
        docs.push(DocumentRecord {
            doc_id: format!("doc-{d:05}"),
            summary_text: summary,
            questions,
        });
    }
    Ok(docs)
}

/// Splits documents 80/10/10 in order: the last tenth is test, the tenth
/// before it validation.
pub fn split_documents(docs: Vec<DocumentRecord>) -> [Vec<DocumentRecord>; 3] {
    let n = docs.len();
    let n_eval = n / 10;
    let n_train = n - 2 * n_eval;
    let mut it = docs.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let valid: Vec<_> = it.by_ref().take(n_eval).collect();
    let test: Vec<_> = it.collect();
    [train, valid, test]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{split_sentences, tokenize, Token};

    fn doc(answers: &[&str]) -> DocumentRecord {
        DocumentRecord {
            doc_id: "d".into(),
            summary_text: "s.".into(),
            questions: answers
                .iter()
                .enumerate()
                .map(|(i, a)| QuestionRecord {
                    qid: format!("q{i}"),
                    question_text: "?".into(),
                    gold_answer_text: a.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn load_examples() {
        assert!(parse_dataset("".as_bytes()).unwrap().is_empty());
        let two = concat!(
            r#"{"doc_id":"a","summary":"x.","questions":[{"qid":"1","question":"q?","answer":"y"}]}"#,
            "\n",
            r#"{"doc_id":"b","summary":"z.","questions":[]}"#,
            "\n"
        );
        let docs = parse_dataset(two.as_bytes()).unwrap();
        assert_eq!(docs.iter().map(|d| d.doc_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);

        let missing = r#"{"doc_id":"a","questions":[]}"#;
        match parse_dataset(missing.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 1);
                assert!(message.contains("summary"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_doc_ids_are_integrity_errors() {
        let dup = concat!(
            r#"{"doc_id":"a","summary":"x.","questions":[]}"#,
            "\n",
            r#"{"doc_id":"a","summary":"y.","questions":[]}"#
        );
        assert!(matches!(parse_dataset(dup.as_bytes()), Err(Error::Integrity(_))));
    }

    #[test]
    fn empty_summary_and_answer_rejected() {
        let s = r#"{"doc_id":"a","summary":"  ","questions":[]}"#;
        assert!(parse_dataset(s.as_bytes()).is_err());
        let a = r#"{"doc_id":"a","summary":"x","questions":[{"qid":"1","question":"q","answer":""}]}"#;
        assert!(parse_dataset(a.as_bytes()).is_err());
    }

    #[test]
    fn candidate_examples() {
        let cs = build_candidate_set(&doc(&["A", "B", "A"])).unwrap();
        assert_eq!(cs.candidates, ["A", "B"]);
        let idx: Vec<_> = (0..3).map(|i| cs.gold_index_for(&format!("q{i}")).unwrap()).collect();
        assert_eq!(idx, [0, 1, 0]);

        let cs = build_candidate_set(&doc(&["A"])).unwrap();
        assert_eq!(cs.candidates, ["A"]);
        assert_eq!(cs.gold_index_for("q0"), Some(0));

        let thirty: Vec<String> = (0..30).map(|i| format!("answer {i}")).collect();
        let refs: Vec<&str> = thirty.iter().map(String::as_str).collect();
        assert_eq!(build_candidate_set(&doc(&refs)).unwrap().len(), 30);

        assert!(build_candidate_set(&doc(&[])).is_err());
    }

    #[test]
    fn dedup_is_case_and_space_insensitive_and_idempotent() {
        let cs = build_candidate_set(&doc(&["The  Cat", "the cat", " THE CAT "])).unwrap();
        assert_eq!(cs.candidates, ["The  Cat"]);
        let rebuilt = build_candidate_set(&doc(&cs.candidates.iter().map(String::as_str).collect::<Vec<_>>())).unwrap();
        assert_eq!(rebuilt.candidates, cs.candidates);
    }

    #[test]
    fn synthetic_examples() {
        let empty = generate_synthetic(&SyntheticConfig {
            num_docs: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(empty.is_empty());

        let cfg = SyntheticConfig {
            num_docs: 5,
            questions_per_doc: 4,
            seed: 11,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_dataset(&a, &mut ba).unwrap();
        write_dataset(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(a.len(), 5);
        assert_eq!(a.iter().map(|d| d.questions.len()).sum::<usize>(), 20);

        let fillers: HashSet<&str> = FILLER_WORDS.iter().copied().chain(["."]).collect();
        for d in &a {
            let sentences: Vec<HashSet<Token>> = split_sentences(&d.summary_text)
                .iter()
                .map(|s| tokenize(s).into_iter().collect())
                .collect();
            assert_eq!(sentences.len(), cfg.sentences_per_summary);
            let mut planted = 0;
            for q in &d.questions {
                let qt: HashSet<Token> = tokenize(&q.question_text).into_iter().collect();
                let at: HashSet<Token> = tokenize(&q.gold_answer_text).into_iter().collect();
                let hits = sentences
                    .iter()
                    .filter(|s| s.intersection(&qt).count() >= 3 && s.intersection(&at).count() >= 3)
                    .count();
                assert_eq!(hits, 1, "{}/{}", d.doc_id, q.qid);
                planted += 1;
            }
            let filler_only = sentences
                .iter()
                .filter(|s| s.iter().all(|t| fillers.contains(t.as_str())))
                .count();
            assert_eq!(filler_only + planted, sentences.len());
        }
    }

    #[test]
    fn synthetic_rejects_small_vocab() {
        let cfg = SyntheticConfig {
            num_docs: 1,
            questions_per_doc: 10,
            vocab_size: 20,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_80_10_10() {
        let docs = generate_synthetic(&SyntheticConfig {
            num_docs: 10,
            ..Default::default()
        })
        .unwrap();
        let [tr, va, te] = split_documents(docs);
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    }

    #[test]
    fn every_gold_answer_is_a_candidate() {
        let docs = generate_synthetic(&SyntheticConfig {
            num_docs: 4,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        for d in &docs {
            let cs = build_candidate_set(d).unwrap();
            for q in &d.questions {
                let i = cs.gold_index_for(&q.qid).unwrap();
                assert_eq!(answer_key(&cs.candidates[i]), answer_key(&q.gold_answer_text));
            }
        }
    }
}
