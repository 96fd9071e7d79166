//! Mean reciprocal rank evaluation and the ablation grid.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compute::{Graph, Scalar};
use crate::config::GridRow;
use crate::error::{Error, Result};
use crate::heads::Head;
use crate::model::ModelConfig;
use crate::pipeline::{build_contexts, PreparedDoc};
use crate::text::EmbeddingTable;
use crate::train::{train, ContextRegime, Scorer, TrainConfig};

/// Top-5 chunks, except for the single-context model trained on the top chunk,
/// which is evaluated on the top chunk.
pub fn default_eval_context(head: Head, train_context: ContextRegime) -> ContextRegime {
    if head == Head::Vanilla && train_context == ContextRegime::Top(1) {
        ContextRegime::Top(1)
    } else {
        ContextRegime::Top(5)
    }
}

/// `1 +` the number of other candidates scored at least as high as the gold
/// one, so ties count against the gold answer.
pub fn gold_rank(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != gold && s >= g)
        .count()
}

pub fn mean_reciprocal_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Usage("no questions to evaluate".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Usage("ranks start at 1".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionPrediction {
    pub doc_id: String,
    pub qid: String,
    pub probabilities: Vec<f64>,
    pub gold_index: usize,
    pub gold_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub split: String,
    pub head: String,
    pub eval_context: String,
    pub mrr: f64,
    pub questions: Vec<QuestionPrediction>,
}

impl PredictionReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Usage(format!("cannot write report: {e}")))
    }
}

/// Scores every question of `docs` under `context` with dropout disabled.
///
/// Questions are evaluated in parallel; the report lists them in dataset order.
pub fn evaluate<F: Scalar>(
    scorer: &Scorer<F>,
    embeddings: &EmbeddingTable,
    docs: &[PreparedDoc],
    context: ContextRegime,
    split: &str,
) -> Result<PredictionReport> {
    let jobs: Vec<(usize, usize)> = docs
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| (0..doc.questions.len()).map(move |q| (d, q)))
        .collect();
    if jobs.is_empty() {
        return Err(Error::Usage(format!("split `{split}` has no questions")));
    }
    let questions = jobs
        .par_iter()
        .map(|&(d, qi)| {
            let doc = &docs[d];
            let q = &doc.questions[qi];
            let contexts = build_contexts(doc, &q.eval_scores, context, scorer.head, qi as u64)?;
            let mut g = Graph::eval();
            let lp = scorer.log_probs(&mut g, &scorer.store, embeddings, &q.tokens, &contexts, &doc.candidates)?;
            let log_p: Vec<f64> = g.value(lp).data().iter().map(|v| v.as_f64()).collect();
            Ok(QuestionPrediction {
                doc_id: doc.doc_id.clone(),
                qid: q.qid.clone(),
                probabilities: log_p.iter().map(|l| l.exp()).collect(),
                gold_index: q.gold,
                gold_rank: gold_rank(&log_p, q.gold),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ranks: Vec<usize> = questions.iter().map(|q| q.gold_rank).collect();
    Ok(PredictionReport {
        split: split.to_string(),
        head: scorer.head.to_string(),
        eval_context: context.to_string(),
        mrr: mean_reciprocal_rank(&ranks)?,
        questions,
    })
}

/// MRR of each trained configuration under each evaluation context.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub columns: Vec<ContextRegime>,
    pub rows: Vec<(GridRow, Vec<f64>)>,
}

impl GridResult {
    pub fn get(&self, row: GridRow, column: ContextRegime) -> Option<f64> {
        let c = self.columns.iter().position(|&x| x == column)?;
        self.rows.iter().find(|(r, _)| *r == row).map(|(_, v)| v[c])
    }

    /// Header `model,train_context,<columns>` then one line per row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "model,train_context")?;
        for c in &self.columns {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
        for (row, values) in &self.rows {
            write!(w, "{},{}", row.head.label(), row.train_context)?;
            for v in values {
                write!(w, ",{v:.6}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Trains one model per row and evaluates it on `eval_docs` under every column.
pub fn ablation_grid<F: Scalar>(
    model: &ModelConfig,
    base: &TrainConfig,
    rows: &[GridRow],
    columns: &[ContextRegime],
    embeddings: &EmbeddingTable,
    train_docs: &[PreparedDoc],
    valid_docs: &[PreparedDoc],
    eval_docs: &[PreparedDoc],
) -> Result<GridResult> {
    let mut out = Vec::with_capacity(rows.len());
    for &row in rows {
        let cfg = TrainConfig {
            head: row.head,
            train_context: row.train_context,
            ..base.clone()
        };
        let mut scorer = Scorer::<F>::init(model, &cfg)?;
        let outcome = train(&mut scorer, &cfg, embeddings, train_docs, valid_docs, |_| {})?;
        scorer.store = outcome.best;
        let values = columns
            .iter()
            .map(|&c| Ok(evaluate(&scorer, embeddings, eval_docs, c, "eval")?.mrr))
            .collect::<Result<Vec<_>>>()?;
        log::info!("grid row {row}: {values:?}");
        out.push((row, values));
    }
    Ok(GridResult {
        columns: columns.to_vec(),
        rows: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_examples() {
        assert_eq!(gold_rank(&[0.7, 0.2, 0.1], 0), 1);
        assert_eq!(gold_rank(&[0.7, 0.2, 0.1], 2), 3);
        assert_eq!(gold_rank(&[0.5, 0.5], 1), 2);
        assert_eq!(gold_rank(&[0.5, 0.5], 0), 2);
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mean_reciprocal_rank(&[1, 1, 1]).unwrap(), 1.0);
        assert!((mean_reciprocal_rank(&[1, 2, 4]).unwrap() - 1.75 / 3.0).abs() < 1e-12);
        assert!(mean_reciprocal_rank(&[]).is_err());
    }

    #[test]
    fn random_scorer_mrr_matches_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ranks: Vec<usize> = (0..20_000)
            .map(|_| {
                let scores: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
                gold_rank(&scores, rng.gen_range(0..4))
            })
            .collect();
        let expected = (1.0 + 0.5 + 1.0 / 3.0 + 0.25) / 4.0;
        assert!((mean_reciprocal_rank(&ranks).unwrap() - expected).abs() < 0.03);
    }

    #[test]
    fn default_contexts() {
        assert_eq!(default_eval_context(Head::Vanilla, ContextRegime::Top(1)), ContextRegime::Top(1));
        assert_eq!(default_eval_context(Head::Vanilla, ContextRegime::Full), ContextRegime::Top(5));
        assert_eq!(default_eval_context(Head::Gn, ContextRegime::Top(1)), ContextRegime::Top(5));
    }

    #[test]
    fn csv_layout() {
        let row = GridRow {
            head: Head::Gn,
            train_context: ContextRegime::Top(5),
        };
        let grid = GridResult {
            columns: vec![ContextRegime::Top(1), ContextRegime::Full],
            rows: vec![(row, vec![0.5, 0.25])],
        };
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "model,train_context,top_1,full\nGN,top_5,0.500000,0.250000\n"
        );
        assert_eq!(grid.get(row, ContextRegime::Full), Some(0.25));
        assert_eq!(grid.get(row, ContextRegime::Top(5)), None);
    }
}
