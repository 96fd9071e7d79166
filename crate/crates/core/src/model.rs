//! Tri-attention scorer: one score per (candidate, chunk).
//!
//! Context tokens attend over the question, answer tokens attend over both the
//! question and the context, and three Bi-GRU encoders turn the augmented
//! sequences into `h_q`, `h_c` and `h_a`. The question and answer are pooled by
//! self-attention, the context by attention from the pooled question, and the
//! two resulting dot products feed a small feed-forward network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compute::{Axis, Graph, ParamId, ParameterStore, Precision, Scalar, Tensor, Var};
use crate::config::parse_value;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub recurrent_hidden: usize,
    pub linear_hidden: usize,
    pub gru_layers: usize,
    /// Number of linear layers in the output network.
    pub ffn_layers: usize,
    pub dropout_rate: f64,
    /// Projection width of every attention; `None` keeps the input width.
    pub attention_dim: Option<usize>,
    pub precision: Precision,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            recurrent_hidden: 128,
            linear_hidden: 256,
            gru_layers: 2,
            ffn_layers: 3,
            dropout_rate: 0.2,
            attention_dim: None,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("recurrent_hidden", self.recurrent_hidden),
            ("linear_hidden", self.linear_hidden),
            ("gru_layers", self.gru_layers),
            ("ffn_layers", self.ffn_layers),
            ("attention_dim", self.attention_dim.unwrap_or(1)),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Applies a `key = value` setting; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "recurrent_hidden" => self.recurrent_hidden = parse_value(key, value)?,
            "linear_hidden" => self.linear_hidden = parse_value(key, value)?,
            "gru_layers" => self.gru_layers = parse_value(key, value)?,
            "ffn_layers" => self.ffn_layers = parse_value(key, value)?,
            "dropout" => self.dropout_rate = parse_value(key, value)?,
            "attention_dim" => {
                self.attention_dim = match value {
                    "input" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "precision" => self.precision = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_key_values(&self) -> String {
        let attention = self
            .attention_dim
            .map_or_else(|| "input".to_string(), |a| a.to_string());
        format!(
            "embed_dim = {}\nrecurrent_hidden = {}\nlinear_hidden = {}\ngru_layers = {}\n\
             ffn_layers = {}\ndropout = {}\nattention_dim = {}\nprecision = {}\n",
            self.embed_dim,
            self.recurrent_hidden,
            self.linear_hidden,
            self.gru_layers,
            self.ffn_layers,
            self.dropout_rate,
            attention,
            self.precision.name(),
        )
    }

    fn attention_width(&self, input: usize) -> usize {
        self.attention_dim.unwrap_or(input)
    }
}

/// Which of the three Bi-GRU encoders to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoder {
    /// Question embeddings.
    Question,
    /// Context embeddings with their question-aware summaries.
    Context,
    /// Answer embeddings with question- and context-aware summaries.
    Answer,
}

impl Encoder {
    fn prefix(self) -> &'static str {
        match self {
            Encoder::Question => "question",
            Encoder::Context => "context",
            Encoder::Answer => "answer",
        }
    }

    fn input_width(self, embed: usize) -> usize {
        match self {
            Encoder::Question => embed,
            Encoder::Context => 2 * embed,
            Encoder::Answer => 3 * embed,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct GruIds {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BiLayer {
    fwd: GruIds,
    bwd: GruIds,
}

enum Init {
    Glorot,
    Zeros,
}

fn layout(c: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = c.embed_dim;
    let h = c.recurrent_hidden;
    let mut out = Vec::new();
    for (name, width) in [
        ("context_query", d),
        ("answer_query", d),
        ("answer_context", d),
        ("context_pool", 2 * h),
    ] {
        out.push((format!("attn.{name}.w"), width, c.attention_width(width), Init::Glorot));
    }
    out.push(("pool.question.w".into(), 2 * h, 1, Init::Glorot));
    out.push(("pool.answer.w".into(), 2 * h, 1, Init::Glorot));
    for enc in [Encoder::Question, Encoder::Context, Encoder::Answer] {
        for layer in 0..c.gru_layers {
            let input = if layer == 0 { enc.input_width(d) } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                let p = format!("gru.{}.{layer}.{dir}", enc.prefix());
                out.push((format!("{p}.w"), input, 3 * h, Init::Glorot));
                out.push((format!("{p}.u"), h, 3 * h, Init::Glorot));
                out.push((format!("{p}.b"), 1, 3 * h, Init::Zeros));
            }
        }
    }
    for k in 0..c.ffn_layers {
        let input = if k == 0 { 2 } else { c.linear_hidden };
        let output = if k + 1 == c.ffn_layers { 1 } else { c.linear_hidden };
        out.push((format!("ffn.{k}.w"), input, output, Init::Glorot));
        out.push((format!("ffn.{k}.b"), 1, output, Init::Zeros));
    }
    out
}

/// Parameter handles of the scorer; values live in a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct TriAttention {
    config: ModelConfig,
    context_query: ParamId,
    answer_query: ParamId,
    answer_context: ParamId,
    context_pool: ParamId,
    pool_question: ParamId,
    pool_answer: ParamId,
    question_enc: Vec<BiLayer>,
    context_enc: Vec<BiLayer>,
    answer_enc: Vec<BiLayer>,
    ffn: Vec<(ParamId, ParamId)>,
}

impl TriAttention {
    /// Registers freshly initialized parameters in `store`: Glorot-uniform
    /// weights and zero biases drawn from `config.seed`.
    pub fn init<F: Scalar>(config: &ModelConfig, store: &mut ParameterStore<F>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (name, rows, cols, init) in layout(config) {
            match init {
                Init::Glorot => store.insert_glorot(name, rows, cols, &mut rng)?,
                Init::Zeros => store.insert_zeros(name, &[rows, cols])?,
            };
        }
        Self::attach(config, store)
    }

    /// Binds to parameters already present in `store`, checking every shape.
    pub fn attach<F: Scalar>(config: &ModelConfig, store: &ParameterStore<F>) -> Result<Self> {
        config.validate()?;
        for (name, rows, cols, _) in layout(config) {
            let Some(id) = store.id(&name) else {
                return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
            };
            if store.value(id).shape() != [rows, cols] {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    store.value(id).shape(),
                    [rows, cols]
                )));
            }
        }
        let id = |name: &str| store.id(name).expect("checked above");
        let encoder = |enc: Encoder| -> Vec<BiLayer> {
            (0..config.gru_layers)
                .map(|layer| {
                    let dir = |d: &str| {
                        let p = format!("gru.{}.{layer}.{d}", enc.prefix());
                        GruIds {
                            w: id(&format!("{p}.w")),
                            u: id(&format!("{p}.u")),
                            b: id(&format!("{p}.b")),
                        }
                    };
                    BiLayer {
                        fwd: dir("fwd"),
                        bwd: dir("bwd"),
                    }
                })
                .collect()
        };
        Ok(Self {
            config: config.clone(),
            context_query: id("attn.context_query.w"),
            answer_query: id("attn.answer_query.w"),
            answer_context: id("attn.answer_context.w"),
            context_pool: id("attn.context_pool.w"),
            pool_question: id("pool.question.w"),
            pool_answer: id("pool.answer.w"),
            question_enc: encoder(Encoder::Question),
            context_enc: encoder(Encoder::Context),
            answer_enc: encoder(Encoder::Answer),
            ffn: (0..config.ffn_layers)
                .map(|k| (id(&format!("ffn.{k}.w")), id(&format!("ffn.{k}.b"))))
                .collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Stacked Bi-GRU over the rows of `x`; forward and backward states are
    /// concatenated per token. Dropout is applied to each layer's input.
    pub fn encode<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        encoder: Encoder,
        x: Var,
    ) -> Result<Var> {
        let layers = match encoder {
            Encoder::Question => &self.question_enc,
            Encoder::Context => &self.context_enc,
            Encoder::Answer => &self.answer_enc,
        };
        if g.shape(x)[0] == 0 {
            return Err(Error::Usage("cannot encode an empty sequence".into()));
        }
        let mut h = x;
        for layer in layers {
            let input = g.dropout(h, self.config.dropout_rate)?;
            let mut run = |ids: &GruIds, reverse: bool| -> Result<Var> {
                let w = g.param(store, ids.w)?;
                let u = g.param(store, ids.u)?;
                let b = g.param(store, ids.b)?;
                g.gru(input, w, u, b, reverse)
            };
            let f = run(&layer.fwd, false)?;
            let b = run(&layer.bwd, true)?;
            h = g.concat(&[f, b], Axis::Cols)?;
        }
        Ok(h)
    }

    fn ffn<F: Scalar>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, x: Var) -> Result<Var> {
        let mut h = x;
        for (k, &(w, b)) in self.ffn.iter().enumerate() {
            if k > 0 {
                h = g.dropout(h, self.config.dropout_rate)?;
            }
            let w = g.param(store, w)?;
            let b = g.param(store, b)?;
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if k + 1 < self.ffn.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// `n x m` score matrix for `candidates` against each of `contexts`.
    ///
    /// All inputs are `tokens x embed_dim` embedding matrices. Empty sequences
    /// are replaced by a single zero vector. Column `j` depends only on
    /// context `j`, the question, the candidates and the parameters.
    pub fn score_matrix<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        question: &Tensor<F>,
        contexts: &[Tensor<F>],
        candidates: &[Tensor<F>],
    ) -> Result<Var> {
        if contexts.is_empty() {
            return Err(Error::Usage("at least one context is required".into()));
        }
        if candidates.is_empty() {
            return Err(Error::Usage("at least one candidate is required".into()));
        }
        let d = self.config.embed_dim;
        let q_emb = g.input(self.guard(question)?)?;
        let h_q = self.encode(g, store, Encoder::Question, q_emb)?;
        let pool_q = g.param(store, self.pool_question)?;
        let q = attn_self(g, h_q, pool_q)?;

        let mut lens = Vec::with_capacity(candidates.len());
        let mut stacked = Vec::new();
        for c in candidates {
            let c = self.guard(c)?;
            lens.push(c.rows());
            stacked.extend_from_slice(c.data());
        }
        let total = stacked.len() / d;
        let a_emb = g.input(Tensor::matrix(total, d, stacked)?)?;
        let w_aq = g.param(store, self.answer_query)?;
        let a_q = attn_seq(g, a_emb, q_emb, w_aq)?;

        let w_cq = g.param(store, self.context_query)?;
        let w_ac = g.param(store, self.answer_context)?;
        let w_pool_c = g.param(store, self.context_pool)?;
        let pool_a = g.param(store, self.pool_answer)?;
        let mut columns = Vec::with_capacity(contexts.len());
        for ctx in contexts {
            let c_emb = g.input(self.guard(ctx)?)?;
            let c_q = attn_seq(g, c_emb, q_emb, w_cq)?;
            let c_in = g.concat(&[c_emb, c_q], Axis::Cols)?;
            let h_c = self.encode(g, store, Encoder::Context, c_in)?;
            let c = attn_seq(g, q, h_c, w_pool_c)?;

            let a_c = attn_seq(g, a_emb, c_emb, w_ac)?;
            let a_in = g.concat(&[a_emb, a_q, a_c], Axis::Cols)?;
            let mut pooled = Vec::with_capacity(lens.len());
            let mut start = 0;
            for &len in &lens {
                let x = g.slice(a_in, Axis::Rows, start, len)?;
                start += len;
                let h_a = self.encode(g, store, Encoder::Answer, x)?;
                pooled.push(attn_self(g, h_a, pool_a)?);
            }
            let answers = g.concat(&pooled, Axis::Rows)?;
            let l_aq = g.matmul_bt(answers, q)?;
            let l_ac = g.matmul_bt(answers, c)?;
            let features = g.concat(&[l_aq, l_ac], Axis::Cols)?;
            columns.push(self.ffn(g, store, features)?);
        }
        g.concat(&columns, Axis::Cols)
    }

    fn guard<F: Scalar>(&self, t: &Tensor<F>) -> Result<Tensor<F>> {
        let d = self.config.embed_dim;
        let (r, c) = t.dims2()?;
        if c != d {
            return Err(Error::shape("embedding width", t.shape(), &[r, d]));
        }
        Ok(if r == 0 { zero_token(d) } else { t.clone() })
    }
}

/// Single zero-vector token, the stand-in for an absent context.
pub fn zero_token<F: Scalar>(embed_dim: usize) -> Tensor<F> {
    Tensor::zeros(&[1, embed_dim])
}

/// Attention of every row of `u` over the rows of `v`:
/// `softmax(relu(uW) relu(vW)ᵀ) v`.
pub fn attn_seq<F: Scalar>(g: &mut Graph<F>, u: Var, v: Var, w: Var) -> Result<Var> {
    if g.shape(v)[0] == 0 {
        return Err(Error::Usage("attention over an empty sequence".into()));
    }
    let pu = g.matmul(u, w)?;
    let pu = g.relu(pu);
    let pv = g.matmul(v, w)?;
    let pv = g.relu(pv);
    let logits = g.matmul_bt(pu, pv)?;
    let alpha = g.softmax(logits, Axis::Cols);
    g.matmul(alpha, v)
}

/// Self-attentive pooling `softmax(Hw)ᵀ H` of the rows of `h` into one row.
pub fn attn_self<F: Scalar>(g: &mut Graph<F>, h: Var, w: Var) -> Result<Var> {
    if g.shape(h)[0] == 0 {
        return Err(Error::Usage("attention over an empty sequence".into()));
    }
    let logits = g.matmul(h, w)?;
    let alpha = g.softmax(logits, Axis::Rows);
    let alpha = g.transpose(alpha)?;
    g.matmul(alpha, h)
}
