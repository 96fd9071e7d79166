//! Adam, the per-question training loop and the trainable scorer bundle.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Graph, ParameterStore, Scalar, Tensor, Var};
use crate::config::{parse_bool, parse_value};
use crate::error::{Error, Result};
use crate::eval::{default_eval_context, evaluate};
use crate::heads::{cross_entropy, head_log_probs, Head, WtMlp, DEFAULT_MLP_HIDDEN};
use crate::model::{ModelConfig, TriAttention};
use crate::pipeline::{build_contexts, ContextSet, PreparedDoc};
use crate::retrieval::DEFAULT_CHUNK_BUDGET;
use crate::text::{embed, EmbeddingTable, Token};

/// Which chunks the reader sees for a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContextRegime {
    /// The `k` chunks ranked highest by TF-IDF.
    Top(usize),
    /// `k` chunks drawn uniformly at random.
    Uniform(usize),
    /// Every chunk.
    Full,
    /// A single zero-vector token instead of any text.
    NoContext,
}

impl fmt::Display for ContextRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextRegime::Top(k) => write!(f, "top_{k}"),
            ContextRegime::Uniform(k) => write!(f, "uniform_{k}"),
            ContextRegime::Full => f.write_str("full"),
            ContextRegime::NoContext => f.write_str("none"),
        }
    }
}

impl FromStr for ContextRegime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let count = |rest: &str| -> std::result::Result<usize, String> {
            match rest.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(k),
                _ => Err(format!("invalid chunk count in `{s}`")),
            }
        };
        match s {
            "full" => Ok(ContextRegime::Full),
            "none" => Ok(ContextRegime::NoContext),
            _ => {
                if let Some(rest) = s.strip_prefix("top_") {
                    Ok(ContextRegime::Top(count(rest)?))
                } else if let Some(rest) = s.strip_prefix("uniform_") {
                    Ok(ContextRegime::Uniform(count(rest)?))
                } else {
                    Err(format!(
                        "unknown context `{s}` (expected top_K, uniform_K, full or none)"
                    ))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; `None` never stops early.
    pub patience: Option<usize>,
    pub train_context: ContextRegime,
    /// Context used for validation; `None` picks the head's default.
    pub eval_context: Option<ContextRegime>,
    pub head: Head,
    pub mlp_hidden: usize,
    pub stop_feature_gradient: bool,
    pub chunk_budget: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            max_epochs: 10,
            patience: Some(3),
            train_context: ContextRegime::Top(5),
            eval_context: None,
            head: Head::WgnMlp,
            mlp_hidden: DEFAULT_MLP_HIDDEN,
            stop_feature_gradient: false,
            chunk_budget: DEFAULT_CHUNK_BUDGET,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if self.adam_epsilon <= 0.0 {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1 or `none`".into()));
        }
        if self.mlp_hidden == 0 || self.chunk_budget == 0 {
            return Err(Error::Config("mlp_hidden and chunk_budget must be at least 1".into()));
        }
        if self.head == Head::Vanilla && matches!(self.train_context, ContextRegime::Uniform(_)) {
            log::warn!("vanilla head joins uniformly sampled chunks into one context");
        }
        Ok(())
    }

    /// Applies a `key = value` setting; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => {
                self.patience = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "train_context" => self.train_context = parse_value(key, value)?,
            "eval_context" => {
                self.eval_context = match value {
                    "default" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "head" => self.head = parse_value(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse_value(key, value)?,
            "stop_feature_gradient" => self.stop_feature_gradient = parse_bool(key, value)?,
            "chunk_budget" => self.chunk_budget = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_key_values(&self) -> String {
        let patience = self.patience.map_or_else(|| "none".into(), |p| p.to_string());
        let eval = self.eval_context.map_or_else(|| "default".into(), |c| c.to_string());
        format!(
            "learning_rate = {}\nbeta1 = {}\nbeta2 = {}\nadam_epsilon = {}\nmax_epochs = {}\n\
             patience = {patience}\ntrain_context = {}\neval_context = {eval}\nhead = {}\n\
             mlp_hidden = {}\nstop_feature_gradient = {}\nchunk_budget = {}\n",
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.adam_epsilon,
            self.max_epochs,
            self.train_context,
            self.head,
            self.mlp_hidden,
            self.stop_feature_gradient,
            self.chunk_budget,
        )
    }

    /// Context used for validation during training.
    pub fn validation_context(&self) -> ContextRegime {
        self.eval_context
            .unwrap_or_else(|| default_eval_context(self.head, self.train_context))
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    lr: F,
    beta1: F,
    beta2: F,
    epsilon: F,
    step: i32,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: &TrainConfig, store: &ParameterStore<F>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            lr: F::from_f64(config.learning_rate),
            beta1: F::from_f64(config.beta1),
            beta2: F::from_f64(config.beta2),
            epsilon: F::from_f64(config.adam_epsilon),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParameterStore<F>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if !store.grad(id).is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", store.name(id))));
            }
        }
        self.step += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.step);
        let bc2 = one - self.beta2.powi(self.step);
        for (k, &id) in ids.iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((theta, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (one - self.beta1) * g;
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta = *theta - self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Scorer, optional weighting network and their parameter values.
#[derive(Debug, Clone)]
pub struct Scorer<F> {
    pub model: TriAttention,
    pub mlp: Option<WtMlp>,
    pub head: Head,
    pub store: ParameterStore<F>,
}

impl<F: Scalar> Scorer<F> {
    /// Fresh parameters; everything is drawn from `model.seed`.
    pub fn init(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let mut store = ParameterStore::new();
        let tri = TriAttention::init(model, &mut store)?;
        let mlp = if train.head == Head::WgnMlp {
            let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0x5747_4e4d_4c50);
            let mut mlp = WtMlp::init(&mut store, train.mlp_hidden, &mut rng)?;
            mlp.stop_feature_gradient = train.stop_feature_gradient;
            Some(mlp)
        } else {
            None
        };
        Ok(Self {
            model: tri,
            mlp,
            head: train.head,
            store,
        })
    }

    /// Binds to loaded parameter values, checking names and shapes.
    pub fn attach(model: &ModelConfig, train: &TrainConfig, store: ParameterStore<F>) -> Result<Self> {
        let fresh = Self::init(model, train)?;
        fresh.store.check_compatible(&store)?;
        let tri = TriAttention::attach(model, &store)?;
        let mlp = match fresh.mlp {
            Some(_) => {
                let mut m = WtMlp::attach(&store, train.mlp_hidden)?;
                m.stop_feature_gradient = train.stop_feature_gradient;
                Some(m)
            }
            None => None,
        };
        Ok(Self {
            model: tri,
            mlp,
            head: train.head,
            store,
        })
    }

    /// `n x 1` log-probabilities over the document's candidates.
    pub fn log_probs(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        embeddings: &EmbeddingTable,
        question: &[Token],
        contexts: &ContextSet,
        candidates: &[Vec<Token>],
    ) -> Result<Var> {
        let q: Tensor<F> = embed(question, embeddings);
        let ctx: Vec<Tensor<F>> = contexts.contexts.iter().map(|c| embed(c, embeddings)).collect();
        let cands: Vec<Tensor<F>> = candidates.iter().map(|c| embed(c, embeddings)).collect();
        let s = self.model.score_matrix(g, store, &q, &ctx, &cands)?;
        let mlp = self.mlp.as_ref().map(|m| (m, store));
        head_log_probs(g, self.head, s, &contexts.tfidf, mlp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when there are no validation questions.
    pub valid_mrr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    /// Parameters of the epoch with the best validation MRR.
    pub best: ParameterStore<F>,
    pub best_epoch: usize,
    pub best_valid_mrr: Option<f64>,
    pub log: Vec<EpochLog>,
}

/// Checks that every question can be trained on before any update happens.
pub fn check_integrity(docs: &[PreparedDoc]) -> Result<()> {
    let mut questions = 0;
    for d in docs {
        for q in &d.questions {
            questions += 1;
            if q.gold >= d.candidates.len() {
                return Err(Error::Integrity(format!(
                    "gold answer of `{}` in `{}` is outside the candidate set",
                    q.qid, d.doc_id
                )));
            }
        }
    }
    if questions == 0 {
        return Err(Error::Usage("training split has no questions".into()));
    }
    Ok(())
}

/// Loss of one question; gradients are accumulated into `scorer.store`.
pub fn train_step<F: Scalar>(
    scorer: &mut Scorer<F>,
    embeddings: &EmbeddingTable,
    doc: &PreparedDoc,
    question: usize,
    regime: ContextRegime,
    seed: u64,
) -> Result<f64> {
    let q = &doc.questions[question];
    let contexts = build_contexts(doc, &q.train_scores, regime, scorer.head, seed)?;
    let mut g = Graph::new(true, seed);
    let lp = scorer.log_probs(&mut g, &scorer.store, embeddings, &q.tokens, &contexts, &doc.candidates)?;
    let loss = cross_entropy(&mut g, lp, q.gold)?;
    g.backward(loss, &mut scorer.store)?;
    Ok(g.value(loss).item().as_f64())
}

/// Trains with one Adam update per question, in a seeded shuffled order.
///
/// After each epoch the model is evaluated on `valid`; the best epoch's
/// parameters are kept and training stops after `patience` epochs without
/// improvement. `on_epoch` sees each log entry as it is produced.
pub fn train<F: Scalar>(
    scorer: &mut Scorer<F>,
    config: &TrainConfig,
    embeddings: &EmbeddingTable,
    train_docs: &[PreparedDoc],
    valid_docs: &[PreparedDoc],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    check_integrity(train_docs)?;
    let has_valid = valid_docs.iter().any(|d| !d.questions.is_empty());
    let valid_context = config.validation_context();
    let mut adam = Adam::new(config, &scorer.store);
    scorer.store.zero_grads();

    let pairs: Vec<(usize, usize)> = train_docs
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| (0..doc.questions.len()).map(move |q| (d, q)))
        .collect();
    let mut best = scorer.store.clone();
    let mut best_epoch = 0;
    let mut best_mrr: Option<f64> = None;
    let mut log = Vec::new();
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &(d, q) in &order {
            let step_seed: u64 = rng.gen();
            total += train_step(scorer, embeddings, &train_docs[d], q, config.train_context, step_seed)?;
            adam.step(&mut scorer.store)?;
        }
        let train_loss = total / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss in epoch {epoch}")));
        }
        let valid_mrr = if has_valid {
            Some(evaluate(scorer, embeddings, valid_docs, valid_context, "valid")?.mrr)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            valid_mrr,
        };
        log::info!("epoch {epoch}: train_loss {train_loss:.4} valid_mrr {valid_mrr:?}");
        on_epoch(&entry);
        log.push(entry);

        let improved = match (valid_mrr, best_mrr) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = scorer.store.clone();
            best_epoch = epoch;
            best_mrr = valid_mrr;
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                log::info!("stopping after epoch {epoch}: no improvement for {stale} epochs");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_valid_mrr: best_mrr,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::Precision;
    use crate::corpus::{generate_synthetic, split_documents, SyntheticConfig};
    use crate::pipeline::Experiment;

    #[test]
    fn regimes_parse_and_print() {
        for s in ["top_1", "top_5", "uniform_5", "full", "none"] {
            assert_eq!(s.parse::<ContextRegime>().unwrap().to_string(), s);
        }
        for s in ["top_0", "top_", "uniform_x", "all"] {
            assert!(s.parse::<ContextRegime>().is_err(), "{s}");
        }
    }

    fn store_with(values: Vec<f64>, grads: Vec<f64>) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        let id = s.insert("theta", Tensor::row(values)).unwrap();
        s.grad_mut(id).data_mut().copy_from_slice(&grads);
        s
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut s = store_with(vec![1.0, -2.0], vec![0.0, 0.0]);
        let mut adam = Adam::new(&TrainConfig::default(), &s);
        adam.step(&mut s).unwrap();
        assert_eq!(s.value(s.id("theta").unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut s = store_with(vec![0.5, 0.5], vec![1.0, -3.0]);
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&cfg, &s);
        adam.step(&mut s).unwrap();
        let id = s.id("theta").unwrap();
        let v = s.value(id).data();
        assert!((v[0] - (0.5 - 0.002)).abs() < 1e-10);
        assert!((v[1] - (0.5 + 0.002)).abs() < 1e-10);
        assert!(s.grad(id).data().iter().all(|&g| g == 0.0));
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut s = store_with(vec![0.5], vec![f64::NAN]);
        let mut adam = Adam::new(&TrainConfig::default(), &s);
        match adam.step(&mut s) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("theta")),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.value(s.id("theta").unwrap()).data(), &[0.5]);
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 6,
            recurrent_hidden: 4,
            linear_hidden: 8,
            gru_layers: 1,
            ffn_layers: 3,
            dropout_rate: 0.0,
            attention_dim: None,
            precision: Precision::F64,
            seed: 3,
        }
    }

    fn tiny_experiment(docs: usize) -> Experiment {
        let cfg = SyntheticConfig {
            num_docs: docs,
            questions_per_doc: 3,
            sentences_per_summary: 12,
            tokens_per_sentence: 9,
            vocab_size: 60,
            seed: 1,
        };
        let [train, valid, test] = split_documents(generate_synthetic(&cfg).unwrap());
        let table = EmbeddingTable::random(cfg.vocabulary().iter().map(String::as_str), 6, 2);
        Experiment::from_records(&train, &valid, &test, table, 40).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let e = tiny_experiment(10);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 1,
            head: Head::WgnMlp,
            ..TrainConfig::default()
        };
        let mut scorer = Scorer::<f64>::init(&tiny_model(), &cfg).unwrap();
        let initial = scorer.store.clone();
        train(&mut scorer, &cfg, &e.embeddings, &e.train[..2], &[], |_| {}).unwrap();
        for id in initial.ids() {
            let a: Vec<u64> = initial.value(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = scorer.store.value(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{}", initial.name(id));
        }
    }

    #[test]
    fn single_question_loss_falls() {
        let e = tiny_experiment(10);
        let cfg = TrainConfig {
            head: Head::Gn,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut scorer = Scorer::<f64>::init(&tiny_model(), &cfg).unwrap();
        let mut adam = Adam::new(&cfg, &scorer.store);
        let doc = &e.train[0];
        let mut losses = Vec::new();
        for step in 0..10 {
            losses.push(train_step(&mut scorer, &e.embeddings, doc, 0, cfg.train_context, step).unwrap());
            adam.step(&mut scorer.store).unwrap();
        }
        assert!(losses[9] < losses[0], "{losses:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let e = tiny_experiment(10);
        let cfg = TrainConfig {
            head: Head::WgnStatic,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut scorer = Scorer::<f32>::init(&ModelConfig { dropout_rate: 0.2, ..tiny_model() }, &cfg).unwrap();
            let out = train(&mut scorer, &cfg, &e.embeddings, &e.train[..3], &e.valid, |_| {}).unwrap();
            let bits: Vec<u32> = out
                .best
                .ids()
                .flat_map(|id| out.best.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect();
            (out.log, bits)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn attach_rejects_other_heads() {
        let mlp = TrainConfig {
            head: Head::WgnMlp,
            ..TrainConfig::default()
        };
        let gn = TrainConfig {
            head: Head::Gn,
            ..TrainConfig::default()
        };
        let scorer = Scorer::<f64>::init(&tiny_model(), &gn).unwrap();
        assert!(matches!(
            Scorer::attach(&tiny_model(), &mlp, scorer.store.clone()),
            Err(Error::Checkpoint(_))
        ));
        assert!(Scorer::attach(&tiny_model(), &gn, scorer.store).is_ok());
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let cfg = TrainConfig {
            patience: None,
            eval_context: Some(ContextRegime::Full),
            head: Head::Gn,
            train_context: ContextRegime::Uniform(5),
            stop_feature_gradient: true,
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        for (_, k, v) in crate::config::parse_key_values(&cfg.to_key_values()).unwrap() {
            assert!(back.set(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, TrainConfig { seed: 0, ..cfg });
    }
}
