//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every check prints one PASS or FAIL line; exits non-zero on any FAIL.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wgnqa::compute::{finite_difference_check_params, Checkpoint, FdMethod, Graph, ParamId, ParameterStore, Precision, Tensor};
use wgnqa::config::RunConfig;
use wgnqa::corpus::{generate_synthetic, split_documents, write_dataset, DocumentRecord, Split, SyntheticConfig};
use wgnqa::eval::evaluate;
use wgnqa::heads::{
    cross_entropy, global_norm_head, head_log_probs, vanilla_head, weighted_global_norm_head, wt_mlp_weights,
    CandidateDistribution, ChunkWeights, Head, ScoreMatrix, WtMlpParams,
};
use wgnqa::model::ModelConfig;
use wgnqa::pipeline::Experiment;
use wgnqa::retrieval::{chunk_document, fit_tfidf, score_chunks, sentence_tokens, Chunk};
use wgnqa::run::{evaluate_checkpoint, load_experiment, train_checkpoint};
use wgnqa::text::{tokenize, EmbeddingTable, Token};
use wgnqa::train::{train, ContextRegime, Scorer, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [(&str, fn() -> Outcome); 11] = [
        ("head_algebra", head_algebra),
        ("normalization_and_invariance", normalization_and_invariance),
        ("brute_force_heads", brute_force_heads),
        ("pipeline_gradients", pipeline_gradients),
        ("tfidf_oracle", tfidf_oracle),
        ("chunker", chunker),
        ("overfit", overfit),
        ("context_trends", context_trends),
        ("baseline_ordering", baseline_ordering),
        ("determinism", determinism),
        ("checkpoint_round_trip", checkpoint_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:>2} {name} ({:.1}s): {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            result.detail
        );
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Heads

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, scale: f64) -> ScoreMatrix {
    Tensor::matrix(n, m, (0..n * m).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, m: usize) -> ChunkWeights {
    ChunkWeights::new((0..m).map(|_| rng.gen_range(0.01..3.0)).collect()).unwrap()
}

fn random_mlp(rng: &mut ChaCha8Rng, hidden: usize) -> WtMlpParams {
    let mut p = WtMlpParams::zeros(hidden);
    for t in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2] {
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    p
}

/// Random `n x m` score matrices with `1 <= n, m <= 8`, TF-IDF scores and
/// a wide spread of magnitudes.
fn random_suite(count: usize, max_dim: usize, seed: u64) -> Vec<(ScoreMatrix, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let n = rng.gen_range(1..=max_dim);
            let m = rng.gen_range(1..=max_dim);
            let scale = [0.1, 1.0, 10.0, 50.0][k % 4];
            let h = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
            (random_matrix(&mut rng, n, m, scale), h)
        })
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dist_diff(a: &CandidateDistribution, b: &CandidateDistribution) -> f64 {
    max_diff(&a.p, &b.p).max(max_diff(&a.log_p, &b.log_p))
}

fn head_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let suite = random_suite(1200, 8, 1);
    for (s, h) in &suite {
        let gn = global_norm_head(s).unwrap();
        let column: Vec<f64> = (0..s.rows()).map(|i| s.get(i, 0)).collect();
        let single = Tensor::column(column.clone());
        worst = worst.max(dist_diff(&global_norm_head(&single).unwrap(), &vanilla_head(&column).unwrap()));

        let c = rng.gen_range(0.01..5.0);
        let uniform = ChunkWeights::new(vec![c; s.cols()]).unwrap();
        worst = worst.max(dist_diff(&weighted_global_norm_head(s, &uniform).unwrap(), &gn));

        let z = wt_mlp_weights(s, h, &WtMlpParams::zeros(rng.gen_range(1..6))).unwrap();
        worst = worst.max(dist_diff(&weighted_global_norm_head(s, &z).unwrap(), &gn));
    }
    outcome(
        worst <= 1e-9,
        format!("{} matrices, max deviation {worst:.2e} (limit 1e-9)", suite.len()),
    )
}

fn normalization_and_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut sum_err, mut shift_err, mut scale_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let suite = random_suite(1200, 8, 2);
    for (s, h) in &suite {
        let z = random_weights(&mut rng, s.cols());
        let column: Vec<f64> = (0..s.rows()).map(|i| s.get(i, 0)).collect();
        let mlp = wt_mlp_weights(s, h, &random_mlp(&mut rng, 4)).unwrap();
        let dists = [
            vanilla_head(&column).unwrap(),
            global_norm_head(s).unwrap(),
            weighted_global_norm_head(s, &z).unwrap(),
            weighted_global_norm_head(s, &ChunkWeights::from_tfidf(h).unwrap()).unwrap(),
            weighted_global_norm_head(s, &mlp).unwrap(),
        ];
        for d in &dists {
            sum_err = sum_err.max((d.p.iter().sum::<f64>() - 1.0).abs());
        }

        let c = rng.gen_range(-20.0..20.0);
        let shifted = Tensor::matrix(s.rows(), s.cols(), s.data().iter().map(|v| v + c).collect()).unwrap();
        let shifted_column: Vec<f64> = column.iter().map(|v| v + c).collect();
        shift_err = shift_err
            .max(max_diff(&vanilla_head(&shifted_column).unwrap().p, &dists[0].p))
            .max(max_diff(&global_norm_head(&shifted).unwrap().p, &dists[1].p))
            .max(max_diff(&weighted_global_norm_head(&shifted, &z).unwrap().p, &dists[2].p));

        let k = rng.gen_range(0.001..1000.0);
        let scaled = ChunkWeights::new(z.as_slice().iter().map(|v| v * k).collect()).unwrap();
        scale_err = scale_err.max(max_diff(&weighted_global_norm_head(s, &scaled).unwrap().p, &dists[2].p));
    }
    outcome(
        sum_err <= 1e-6 && shift_err <= 1e-6 && scale_err <= 1e-9,
        format!(
            "{} matrices: |sum p - 1| {sum_err:.2e} (1e-6), shift {shift_err:.2e} (1e-6), z scale {scale_err:.2e} (1e-9)",
            suite.len()
        ),
    )
}

/// Direct `p_i = sum_j z_j e^{s_ij} / sum_kj z_j e^{s_kj}`.
fn naive_weighted(s: &ScoreMatrix, z: &[f64]) -> Vec<f64> {
    let num: Vec<f64> = (0..s.rows())
        .map(|i| (0..s.cols()).map(|j| z[j] * s.get(i, j).exp()).sum())
        .collect();
    let total: f64 = num.iter().sum();
    num.iter().map(|v| v / total).collect()
}

/// Direct evaluation of the weighting network on `[h, max, min, mean, std]`.
fn naive_mlp_weights(s: &ScoreMatrix, h: &[f64], p: &WtMlpParams) -> Vec<f64> {
    let hidden = p.b1.cols();
    (0..s.cols())
        .map(|j| {
            let col: Vec<f64> = (0..s.rows()).map(|i| s.get(i, j)).collect();
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let f = [
                h[j],
                col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                col.iter().copied().fold(f64::INFINITY, f64::min),
                mean,
                var.sqrt(),
            ];
            let mut raw = p.b2.get(0, 0);
            for k in 0..hidden {
                let pre: f64 = p.b1.get(0, k) + (0..5).map(|r| f[r] * p.w1.get(r, k)).sum::<f64>();
                raw += pre.max(0.0) * p.w2.get(k, 0);
            }
            raw.exp()
        })
        .collect()
}

fn brute_force_heads() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    let suite = random_suite(1000, 4, 3);
    for (s, h) in &suite {
        let column: Vec<f64> = (0..s.rows()).map(|i| s.get(i, 0)).collect();
        worst = worst.max(max_diff(
            &vanilla_head(&column).unwrap().p,
            &naive_weighted(&Tensor::column(column.clone()), &[1.0]),
        ));
        worst = worst.max(max_diff(&global_norm_head(s).unwrap().p, &naive_weighted(s, &vec![1.0; s.cols()])));
        let z = random_weights(&mut rng, s.cols());
        worst = worst.max(max_diff(&weighted_global_norm_head(s, &z).unwrap().p, &naive_weighted(s, z.as_slice())));
        let params = random_mlp(&mut rng, 3);
        let mlp = wt_mlp_weights(s, h, &params).unwrap();
        worst = worst.max(max_diff(
            &weighted_global_norm_head(s, &mlp).unwrap().p,
            &naive_weighted(s, &naive_mlp_weights(s, h, &params)),
        ));
    }
    outcome(
        worst <= 1e-6,
        format!("{} matrices up to 4x4, max deviation {worst:.2e} (limit 1e-6)", suite.len()),
    )
}

// ---------------------------------------------------------------------------
// Gradients through the whole scorer

fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn pipeline_gradients() -> Outcome {
    const STEP: f64 = 1e-2;
    const SEEDS: usize = 3;
    let mut lines = Vec::new();
    let mut pass = true;
    for head in Head::ALL {
        let mut checked = Vec::new();
        let mut worst: f64 = 0.0;
        for seed in 0..300u64 {
            let model = ModelConfig {
                embed_dim: 4,
                recurrent_hidden: 3,
                linear_hidden: 5,
                gru_layers: 1,
                ffn_layers: 2,
                dropout_rate: 0.0,
                attention_dim: None,
                precision: Precision::F64,
                seed,
            };
            let cfg = TrainConfig {
                head,
                mlp_hidden: 3,
                ..TrainConfig::default()
            };
            let scorer = Scorer::<f64>::init(&model, &cfg).unwrap();
            let mut store = scorer.store.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacc);
            let ids: Vec<ParamId> = store.ids().collect();
            for &id in &ids {
                if store.name(id).ends_with(".b") || store.name(id).ends_with(".b1") {
                    for v in store.value_mut(id).data_mut() {
                        *v = rng.gen_range(-0.5..0.5);
                    }
                }
            }
            let question = random_input(&mut rng, 4, 4);
            let chunks = [random_input(&mut rng, 5, 4), random_input(&mut rng, 3, 4)];
            let candidates: Vec<Tensor<f64>> = [2, 1, 3].iter().map(|&l| random_input(&mut rng, l, 4)).collect();
            let gold = rng.gen_range(0..3);
            let (contexts, tfidf) = if head.is_multi_chunk() {
                (chunks.to_vec(), vec![0.62, 0.17])
            } else {
                let joined: Vec<f64> = chunks.iter().flat_map(|c| c.data().to_vec()).collect();
                (vec![Tensor::matrix(8, 4, joined).unwrap()], vec![0.62])
            };
            let build = |s: &ParameterStore<f64>| {
                let mut g = Graph::eval();
                let m = scorer.model.score_matrix(&mut g, s, &question, &contexts, &candidates)?;
                let lp = head_log_probs(&mut g, head, m, &tfidf, scorer.mlp.as_ref().map(|mlp| (mlp, s)))?;
                let loss = cross_entropy(&mut g, lp, gold)?;
                Ok((g, loss))
            };
            // finite differences are meaningless across a relu or max kink
            if build(&store).unwrap().0.kink_margin() < STEP / 2.0 {
                continue;
            }
            let report =
                finite_difference_check_params(&mut store, &ids, FdMethod::Ridders { initial_step: STEP }, build).unwrap();
            worst = worst.max(report.max_relative_error);
            checked.push(seed);
            if checked.len() == SEEDS {
                break;
            }
        }
        let ok = checked.len() == SEEDS && worst <= 1e-5;
        pass &= ok;
        lines.push(format!("{head} seeds {checked:?} max rel err {worst:.2e}"));
    }
    outcome(pass, format!("{} (limit 1e-5)", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// Retrieval

fn tokens(words: &[&str]) -> Vec<Token> {
    words.iter().map(|w| Token::new(*w).unwrap()).collect()
}

fn chunk(index: usize, toks: Vec<Token>) -> Chunk {
    Chunk {
        doc_id: "d".into(),
        chunk_index: index,
        tokens: toks,
        sentences: index..index + 1,
        tfidf_score: 0.0,
    }
}

/// Independent tf·idf cosine: raw counts and `idf = ln((1+N)/(1+df)) + 1`,
/// with `df = 0` for terms never seen in the fitted chunks.
fn brute_force_tfidf(fitted: &[Chunk], scored: &[Chunk], query: &[Token]) -> Vec<f64> {
    let n = fitted.len() as f64;
    let mut df: BTreeMap<&str, f64> = BTreeMap::new();
    for c in fitted {
        let distinct: BTreeSet<&str> = c.tokens.iter().map(Token::as_str).collect();
        for t in distinct {
            *df.entry(t).or_default() += 1.0;
        }
    }
    let vector = |toks: &[Token]| -> BTreeMap<String, f64> {
        let mut v = BTreeMap::new();
        for t in toks {
            let d = df.get(t.as_str()).copied().unwrap_or(0.0);
            *v.entry(t.as_str().to_string()).or_insert(0.0) += ((1.0 + n) / (1.0 + d)).ln() + 1.0;
        }
        v
    };
    let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let q = vector(query);
    scored
        .iter()
        .map(|c| {
            let v = vector(&c.tokens);
            let dot: f64 = q.iter().map(|(t, w)| w * v.get(t).unwrap_or(&0.0)).sum();
            let denom = norm(&q) * norm(&v);
            if denom == 0.0 { 0.0 } else { dot / denom }
        })
        .collect()
}

fn tfidf_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let mut worst: f64 = 0.0;
    let corpora = 300;
    for _ in 0..corpora {
        let vocab = rng.gen_range(2..words.len());
        let draw = |rng: &mut ChaCha8Rng, len: usize| -> Vec<Token> {
            (0..len).map(|_| Token::new(words[rng.gen_range(0..vocab)].as_str()).unwrap()).collect()
        };
        let sizes: Vec<usize> = (0..rng.gen_range(1..=50)).map(|_| rng.gen_range(0..12)).collect();
        let mut chunks: Vec<Chunk> = sizes.iter().enumerate().map(|(i, &len)| chunk(i, draw(&mut rng, len))).collect();
        let qlen = rng.gen_range(0..8);
        let mut query = draw(&mut rng, qlen);
        if rng.gen_bool(0.3) {
            query.push(Token::new("unseen").unwrap());
        }
        let model = fit_tfidf(&chunks).unwrap();
        score_chunks(&model, &mut chunks, &query);
        let got: Vec<f64> = chunks.iter().map(|c| c.tfidf_score).collect();
        worst = worst.max(max_diff(&got, &brute_force_tfidf(&chunks, &chunks, &query)));
    }

    let mut hand = vec![chunk(0, tokens(&["cat", "sat"])), chunk(1, tokens(&["dog", "ran"]))];
    let model = fit_tfidf(&hand).unwrap();
    score_chunks(&model, &mut hand, &tokenize("cat"));
    let example = (hand[0].tfidf_score - 0.7071).abs() <= 1e-4 && hand[1].tfidf_score == 0.0;
    outcome(
        worst <= 1e-9 && example,
        format!(
            "{corpora} corpora up to 50 chunks, max deviation {worst:.2e} (limit 1e-9); hand example scores [{:.4}, {:.4}]",
            hand[0].tfidf_score, hand[1].tfidf_score
        ),
    )
}

fn chunker() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut problems = Vec::new();
    let mut multi = 0;
    for k in 0..200u64 {
        let cfg = SyntheticConfig {
            num_docs: 1,
            questions_per_doc: rng.gen_range(1..4),
            sentences_per_summary: rng.gen_range(4..40),
            tokens_per_sentence: rng.gen_range(7..25),
            vocab_size: 60,
            seed: k,
        };
        let doc = &generate_synthetic(&cfg).unwrap()[0];
        let budget = rng.gen_range(5..60);
        let sentences = sentence_tokens(&doc.summary_text);
        let chunks = chunk_document(&doc.doc_id, &sentences, budget);

        let flat: Vec<&Token> = sentences.iter().flatten().collect();
        let rebuilt: Vec<&Token> = chunks.iter().flat_map(|c| &c.tokens).collect();
        if flat != rebuilt {
            problems.push(format!("summary {k}: reconstruction differs"));
        }
        let mut next = 0;
        for c in &chunks {
            let own: Vec<&Token> = sentences[c.sentences.clone()].iter().flatten().collect();
            if c.sentences.start != next || own != c.tokens.iter().collect::<Vec<_>>() {
                problems.push(format!("summary {k}: chunk {} splits a sentence", c.chunk_index));
            }
            next = c.sentences.end;
            if c.sentences.len() > 1 {
                multi += 1;
                if c.tokens.len() > budget {
                    problems.push(format!("summary {k}: chunk {} exceeds budget {budget}", c.chunk_index));
                }
            }
        }
        if next != sentences.len() {
            problems.push(format!("summary {k}: sentences left unchunked"));
        }
    }
    outcome(
        problems.is_empty() && multi > 0,
        if problems.is_empty() {
            format!("200 summaries, {multi} multi-sentence chunks within budget, reconstruction exact")
        } else {
            problems[..problems.len().min(3)].join("; ")
        },
    )
}

// ---------------------------------------------------------------------------
// Training

fn synthetic(num_docs: usize, questions: usize, sentences: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        num_docs,
        questions_per_doc: questions,
        sentences_per_summary: sentences,
        tokens_per_sentence: 10,
        vocab_size: 400,
        seed,
    }
}

fn small_model(embed_dim: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        embed_dim,
        recurrent_hidden: 8,
        linear_hidden: 16,
        gru_layers: 1,
        ffn_layers: 2,
        dropout_rate: 0.0,
        attention_dim: None,
        precision: Precision::F32,
        seed,
    }
}

fn overfit() -> Outcome {
    let syn = synthetic(20, 5, 30, 7);
    let docs = generate_synthetic(&syn).unwrap();
    let table = EmbeddingTable::random(syn.vocabulary().iter().map(String::as_str), 16, 7);
    let exp = Experiment::from_records(&docs, &docs, &[], table, 40).unwrap();
    let model = small_model(16, 7);
    let cfg = TrainConfig {
        head: Head::WgnMlp,
        train_context: ContextRegime::Top(5),
        max_epochs: 30,
        patience: None,
        learning_rate: 0.005,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut scorer = Scorer::<f32>::init(&model, &cfg).unwrap();
    let mut reached = None;
    let out = train(&mut scorer, &cfg, &exp.embeddings, &exp.train, &exp.valid, |e| {
        if reached.is_none() && e.valid_mrr.is_some_and(|m| m >= 0.95) {
            reached = Some(e.epoch);
        }
    })
    .unwrap();
    let best = out.best_valid_mrr.unwrap_or(0.0);
    outcome(
        reached.is_some(),
        match reached {
            Some(epoch) => format!("train MRR reached 0.95 at epoch {epoch} (best {best:.3})"),
            None => format!("best train MRR {best:.3} after 30 epochs (need 0.95)"),
        },
    )
}

/// Validation MRR of each trained model under top-1, top-5 and full contexts.
struct TrendRun {
    vanilla_top1: [f64; 3],
    gn: [f64; 3],
    wgn: [f64; 3],
    wgn_mlp: [f64; 3],
    vanilla_full: [f64; 3],
}

const TREND_DOCS: usize = 200;
const TREND_QUESTIONS: usize = 8;
const TREND_SENTENCES: usize = 160;
const TREND_EMBED: usize = 16;
const TREND_SEEDS: [u64; 3] = [0, 1, 2];

fn trend_run(seed: u64) -> TrendRun {
    let syn = synthetic(TREND_DOCS, TREND_QUESTIONS, TREND_SENTENCES, seed);
    let [train_docs, valid_docs, test_docs] = split_documents(generate_synthetic(&syn).unwrap());
    let table = EmbeddingTable::random(syn.vocabulary().iter().map(String::as_str), TREND_EMBED, seed);
    let exp = Experiment::from_records(&train_docs, &valid_docs, &test_docs, table, 40).unwrap();
    let model = small_model(TREND_EMBED, seed);
    let columns = [ContextRegime::Top(1), ContextRegime::Top(5), ContextRegime::Full];
    let run = |head: Head, train_context: ContextRegime| -> [f64; 3] {
        let cfg = TrainConfig {
            head,
            train_context,
            max_epochs: 15,
            patience: Some(5),
            learning_rate: 0.005,
            seed,
            ..TrainConfig::default()
        };
        let mut scorer = Scorer::<f32>::init(&model, &cfg).unwrap();
        let out = train(&mut scorer, &cfg, &exp.embeddings, &exp.train, &exp.valid, |_| {}).unwrap();
        scorer.store = out.best;
        columns.map(|c| evaluate(&scorer, &exp.embeddings, &exp.valid, c, "valid").unwrap().mrr)
    };
    TrendRun {
        vanilla_top1: run(Head::Vanilla, ContextRegime::Top(1)),
        gn: run(Head::Gn, ContextRegime::Top(5)),
        wgn: run(Head::WgnStatic, ContextRegime::Top(5)),
        wgn_mlp: run(Head::WgnMlp, ContextRegime::Top(5)),
        vanilla_full: run(Head::Vanilla, ContextRegime::Full),
    }
}

fn trend_runs() -> &'static [TrendRun] {
    static RUNS: std::sync::OnceLock<Vec<TrendRun>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| TREND_SEEDS.iter().map(|&s| trend_run(s)).collect())
}

fn context_trends() -> Outcome {
    let mut holds = 0;
    let mut lines = Vec::new();
    for (seed, r) in TREND_SEEDS.iter().zip(trend_runs()) {
        let [v1, v5, vf] = r.vanilla_top1;
        let decreasing = v1 > v5 && v5 > vf;
        let gn_drop = r.gn[1] - r.gn[2];
        let wgn_drop = r.wgn[1] - r.wgn[2];
        let smaller = wgn_drop < gn_drop;
        holds += usize::from(decreasing && smaller);
        lines.push(format!(
            "seed {seed}: vanilla {v1:.3}>{v5:.3}>{vf:.3} {decreasing}, drop WGN {wgn_drop:.3} < GN {gn_drop:.3} {smaller}"
        ));
    }
    outcome(holds >= 2, format!("{holds}/3 seeds hold; {}", lines.join("; ")))
}

fn baseline_ordering() -> Outcome {
    let mut holds = 0;
    let mut lines = Vec::new();
    for (seed, r) in TREND_SEEDS.iter().zip(trend_runs()) {
        // each model at its default evaluation context
        let (mlp, gn, full) = (r.wgn_mlp[1], r.gn[1], r.vanilla_full[1]);
        let ok = mlp >= gn + 0.02 && gn >= full + 0.02;
        holds += usize::from(ok);
        lines.push(format!("seed {seed}: WGN-MLP {mlp:.3}, GN {gn:.3}, vanilla/full {full:.3} {ok}"));
    }
    outcome(holds >= 2, format!("{holds}/3 seeds hold (margin 0.02); {}", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// Checkpoints and reproducibility

fn write_split(dir: &Path, split: Split, docs: &[DocumentRecord]) {
    let mut w = BufWriter::new(File::create(dir.join(split.file_name())).unwrap());
    write_dataset(docs, &mut w).unwrap();
}

/// A small dataset and embedding file on disk, and a run config naming them.
fn on_disk_run(dir: &Path, head: Head) -> RunConfig {
    let syn = synthetic(10, 4, 20, 5);
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    for (split, docs) in Split::ALL.into_iter().zip(split_documents(generate_synthetic(&syn).unwrap())) {
        write_split(&data, split, &docs);
    }
    let table = EmbeddingTable::random(syn.vocabulary().iter().map(String::as_str), 8, 5);
    table.write_text(BufWriter::new(File::create(data.join("embeddings.txt")).unwrap())).unwrap();
    let mut cfg = RunConfig::parse(&format!(
        "data_dir = {0}\nembeddings = {0}/embeddings.txt\nembed_dim = 8\nrecurrent_hidden = 4\n\
         linear_hidden = 8\ngru_layers = 1\nffn_layers = 2\nmax_epochs = 2\nseed = 3\n",
        data.display()
    ))
    .unwrap();
    cfg.train.head = head;
    cfg
}

fn report_bytes(cfg: &RunConfig, exp: &Experiment, ckpt: &Checkpoint) -> Vec<u8> {
    let report = evaluate_checkpoint(ckpt, cfg, exp, Split::Valid, None).unwrap();
    let mut buf = Vec::new();
    report.write_json(&mut buf).unwrap();
    buf
}

fn determinism() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for head in [Head::WgnMlp, Head::Gn] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = on_disk_run(dir.path(), head);
        let exp = load_experiment(&cfg).unwrap();
        let a = train_checkpoint(&cfg, &load_experiment(&cfg).unwrap(), |_| {}).unwrap();
        let b = train_checkpoint(&cfg, &exp, |_| {}).unwrap();
        let same_ckpt = a.checkpoint.to_bytes() == b.checkpoint.to_bytes() && a.log == b.log;
        let same_report = report_bytes(&cfg, &exp, &a.checkpoint) == report_bytes(&cfg, &exp, &b.checkpoint);
        pass &= same_ckpt && same_report;
        lines.push(format!("{head}: checkpoints identical {same_ckpt}, reports identical {same_report}"));
    }
    outcome(pass, lines.join("; "))
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for (head, precision) in [(Head::WgnMlp, Precision::F32), (Head::Vanilla, Precision::F64)] {
        let mut cfg = on_disk_run(dir.path(), head);
        cfg.model.precision = precision;
        let exp = load_experiment(&cfg).unwrap();
        let run = train_checkpoint(&cfg, &exp, |_| {}).unwrap();
        let before = evaluate_checkpoint(&run.checkpoint, &cfg, &exp, Split::Valid, None).unwrap().mrr;
        let path = dir.path().join(format!("{head}.ckpt"));
        run.checkpoint.write(&path).unwrap();
        let loaded = Checkpoint::read(&path).unwrap();
        let after = evaluate_checkpoint(&loaded, &cfg, &exp, Split::Valid, None).unwrap().mrr;
        let ok = before.to_bits() == after.to_bits() && loaded == run.checkpoint;
        pass &= ok;
        lines.push(format!("{head} {}: {before} -> {after}", precision.name()));
    }
    outcome(pass, lines.join("; "))
}
