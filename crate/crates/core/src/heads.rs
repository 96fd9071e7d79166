//! Turning a score matrix into a distribution over candidates.
//!
//! All heads work in log space. With `S` the `n x m` score matrix and `z` the
//! per-chunk weights:
//!
//! - vanilla: `log softmax(S)` for a single column;
//! - global normalization: `log p_i = LSE_j S_ij - LSE_ij S_ij`;
//! - weighted global normalization: global normalization of `S_ij + ln z_j`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::compute::{Axis, Graph, ParamId, ParameterStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Added to TF-IDF scores so that static weights stay strictly positive.
pub const STATIC_WEIGHT_EPSILON: f64 = 1e-6;
pub const DEFAULT_MLP_HIDDEN: usize = 16;
/// Per-chunk weighting features: TF-IDF score, then max, min, mean and
/// population standard deviation of the chunk's score column.
pub const MLP_FEATURES: usize = 5;

/// `n` candidates by `m` chunks.
pub type ScoreMatrix = Tensor<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Vanilla,
    Gn,
    WgnStatic,
    WgnMlp,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::Vanilla, Head::Gn, Head::WgnStatic, Head::WgnMlp];

    pub fn name(self) -> &'static str {
        match self {
            Head::Vanilla => "vanilla",
            Head::Gn => "gn",
            Head::WgnStatic => "wgn_static",
            Head::WgnMlp => "wgn_mlp",
        }
    }

    /// Display label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Head::Vanilla => "T-Attn",
            Head::Gn => "GN",
            Head::WgnStatic => "WGN",
            Head::WgnMlp => "WGN-MLP",
        }
    }

    /// Whether chunks are scored separately (as opposed to one joined context).
    pub fn is_multi_chunk(self) -> bool {
        !matches!(self, Head::Vanilla)
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Head {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Head::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| format!("unknown head `{s}` (expected vanilla, gn, wgn_static or wgn_mlp)"))
    }
}

/// Strictly positive, finite per-chunk weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkWeights(Vec<f64>);

impl ChunkWeights {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = z.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::WeightDomain { index, value });
        }
        Ok(Self(z))
    }

    /// `z_j = h_j + ε` from TF-IDF scores.
    pub fn from_tfidf(h: &[f64]) -> Result<Self> {
        Self::new(h.iter().map(|v| v + STATIC_WEIGHT_EPSILON).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `1 x m` row of `ln z_j`.
    pub fn log_row<F: Scalar>(&self) -> Tensor<F> {
        Tensor::row(self.0.iter().map(|v| F::from_f64(v.ln())).collect())
    }
}

/// Probabilities `p` and their logarithms, one per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDistribution {
    pub p: Vec<f64>,
    pub log_p: Vec<f64>,
}

impl CandidateDistribution {
    pub fn from_log_probs(log_p: Vec<f64>) -> Self {
        Self {
            p: log_p.iter().map(|l| l.exp()).collect(),
            log_p,
        }
    }
}

/// Softmax over the single column of `s` (`n x 1`).
pub fn vanilla_log_probs<F: Scalar>(g: &mut Graph<F>, s: Var) -> Result<Var> {
    let m = g.shape(s)[1];
    if m != 1 {
        return Err(Error::Usage(format!("vanilla head needs exactly one chunk, got {m}")));
    }
    Ok(g.log_softmax(s, Axis::Rows))
}

/// `log p_i = LSE_j s_ij - LSE_ij s_ij`, returned as an `n x 1` column.
pub fn global_norm_log_probs<F: Scalar>(g: &mut Graph<F>, s: Var) -> Result<Var> {
    let per_candidate = g.logsumexp(s, Axis::Cols);
    let total = g.logsumexp(per_candidate, Axis::Rows);
    g.sub(per_candidate, total)
}

/// Global normalization of `s_ij + ln z_j`, with `log_z` a `1 x m` row.
pub fn weighted_global_norm_log_probs<F: Scalar>(g: &mut Graph<F>, s: Var, log_z: Var) -> Result<Var> {
    let shifted = g.add(s, log_z)?;
    global_norm_log_probs(g, shifted)
}

/// `-log p_gold` from an `n x 1` column of log-probabilities.
pub fn cross_entropy<F: Scalar>(g: &mut Graph<F>, log_p: Var, gold: usize) -> Result<Var> {
    let n = g.shape(log_p)[0];
    if gold >= n {
        return Err(Error::Usage(format!("gold index {gold} out of range for {n} candidates")));
    }
    let lp = g.element(log_p, gold, 0)?;
    Ok(g.scale(lp, -F::one()))
}

/// Learned chunk weighting: `raw_j = W2 relu(W1 f_j + b1) + b2`, `z_j = exp(raw_j)`.
#[derive(Debug, Clone, Copy)]
pub struct WtMlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    /// Treat the score statistics as constants when differentiating.
    pub stop_feature_gradient: bool,
}

impl WtMlp {
    pub fn init<F: Scalar>(store: &mut ParameterStore<F>, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("mlp_hidden must be at least 1".into()));
        }
        store.insert_glorot("wt_mlp.w1", MLP_FEATURES, hidden, rng)?;
        store.insert_zeros("wt_mlp.b1", &[1, hidden])?;
        store.insert_glorot("wt_mlp.w2", hidden, 1, rng)?;
        store.insert_zeros("wt_mlp.b2", &[1, 1])?;
        Self::attach(store, hidden)
    }

    pub fn attach<F: Scalar>(store: &ParameterStore<F>, hidden: usize) -> Result<Self> {
        let get = |name: &str, shape: [usize; 2]| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if store.value(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        Ok(Self {
            w1: get("wt_mlp.w1", [MLP_FEATURES, hidden])?,
            b1: get("wt_mlp.b1", [1, hidden])?,
            w2: get("wt_mlp.w2", [hidden, 1])?,
            b2: get("wt_mlp.b2", [1, 1])?,
            stop_feature_gradient: false,
        })
    }

    pub fn hidden<F: Scalar>(&self, store: &ParameterStore<F>) -> usize {
        store.value(self.b1).cols()
    }

    /// `1 x m` row of `raw_j = ln z_j`.
    pub fn log_weights<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        s: Var,
        h: &[f64],
    ) -> Result<Var> {
        let s = if self.stop_feature_gradient { g.stop_gradient(s) } else { s };
        let features = chunk_features(g, s, h)?;
        let w1 = g.param(store, self.w1)?;
        let b1 = g.param(store, self.b1)?;
        let w2 = g.param(store, self.w2)?;
        let b2 = g.param(store, self.b2)?;
        let hidden = g.matmul(features, w1)?;
        let hidden = g.add(hidden, b1)?;
        let hidden = g.relu(hidden);
        let raw = g.matmul(hidden, w2)?;
        let raw = g.add(raw, b2)?;
        g.transpose(raw)
    }
}

/// `m x 5` matrix of `[h_j, max_i s_ij, min_i s_ij, mean_i s_ij, std_i s_ij]`.
pub fn chunk_features<F: Scalar>(g: &mut Graph<F>, s: Var, h: &[f64]) -> Result<Var> {
    let m = g.shape(s)[1];
    if h.len() != m {
        return Err(Error::shape("chunk features", &[h.len()], g.shape(s)));
    }
    let h = g.input(Tensor::column(h.iter().map(|&v| F::from_f64(v)).collect()))?;
    let mut cols = vec![h];
    for stat in [Stat::Max, Stat::Min, Stat::Mean, Stat::Std] {
        let row = match stat {
            Stat::Max => g.max(s, Axis::Rows),
            Stat::Min => g.min(s, Axis::Rows),
            Stat::Mean => g.mean(s, Axis::Rows),
            Stat::Std => g.std(s, Axis::Rows),
        };
        cols.push(g.transpose(row)?);
    }
    g.concat(&cols, Axis::Cols)
}

enum Stat {
    Max,
    Min,
    Mean,
    Std,
}

/// Log-probabilities (`n x 1`) of `head` applied to `s`.
///
/// `h` holds the TF-IDF score of each column and is used by the weighted heads.
pub fn head_log_probs<F: Scalar>(
    g: &mut Graph<F>,
    head: Head,
    s: Var,
    h: &[f64],
    mlp: Option<(&WtMlp, &ParameterStore<F>)>,
) -> Result<Var> {
    match head {
        Head::Vanilla => vanilla_log_probs(g, s),
        Head::Gn => global_norm_log_probs(g, s),
        Head::WgnStatic => {
            let z = ChunkWeights::from_tfidf(h)?;
            if z.len() != g.shape(s)[1] {
                return Err(Error::shape("chunk weights", &[z.len()], g.shape(s)));
            }
            let log_z = g.input(z.log_row())?;
            weighted_global_norm_log_probs(g, s, log_z)
        }
        Head::WgnMlp => {
            let (mlp, store) =
                mlp.ok_or_else(|| Error::Usage("wgn_mlp head needs weighting parameters".into()))?;
            let log_z = mlp.log_weights(g, store, s, h)?;
            weighted_global_norm_log_probs(g, s, log_z)
        }
    }
}

fn column_of(g: &Graph<f64>, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

/// Softmax of a single score column.
pub fn vanilla_head(scores: &[f64]) -> Result<CandidateDistribution> {
    let mut g = Graph::eval();
    let s = g.input(Tensor::column(scores.to_vec()))?;
    let lp = vanilla_log_probs(&mut g, s)?;
    Ok(CandidateDistribution::from_log_probs(column_of(&g, lp)))
}

pub fn global_norm_head(s: &ScoreMatrix) -> Result<CandidateDistribution> {
    if !s.is_finite() {
        return Err(Error::NonFinite("score matrix".into()));
    }
    let mut g = Graph::eval();
    let sv = g.input(s.clone())?;
    let lp = global_norm_log_probs(&mut g, sv)?;
    Ok(CandidateDistribution::from_log_probs(column_of(&g, lp)))
}

pub fn weighted_global_norm_head(s: &ScoreMatrix, z: &ChunkWeights) -> Result<CandidateDistribution> {
    if z.len() != s.cols() {
        return Err(Error::shape("chunk weights", &[z.len()], s.shape()));
    }
    let mut g = Graph::eval();
    let sv = g.input(s.clone())?;
    let lz = g.input(z.log_row())?;
    let lp = weighted_global_norm_log_probs(&mut g, sv, lz)?;
    Ok(CandidateDistribution::from_log_probs(column_of(&g, lp)))
}

/// Plain weights of the learned weighting network.
#[derive(Debug, Clone, PartialEq)]
pub struct WtMlpParams {
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
}

impl WtMlpParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[MLP_FEATURES, hidden]),
            b1: Tensor::zeros(&[1, hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
            b2: Tensor::zeros(&[1, 1]),
        }
    }

    fn into_store(self) -> Result<(ParameterStore<f64>, WtMlp)> {
        let hidden = self.b1.cols();
        let mut store = ParameterStore::new();
        store.insert("wt_mlp.w1", self.w1)?;
        store.insert("wt_mlp.b1", self.b1)?;
        store.insert("wt_mlp.w2", self.w2)?;
        store.insert("wt_mlp.b2", self.b2)?;
        let mlp = WtMlp::attach(&store, hidden)?;
        Ok((store, mlp))
    }
}

/// The `m x 5` feature matrix of [`chunk_features`] for plain inputs.
pub fn wt_mlp_features(s: &ScoreMatrix, h: &[f64]) -> Result<Tensor<f64>> {
    let mut g = Graph::eval();
    let sv = g.input(s.clone())?;
    let f = chunk_features(&mut g, sv, h)?;
    Ok(g.value(f).clone())
}

/// `z_j = exp(raw_j)` for every chunk.
pub fn wt_mlp_weights(s: &ScoreMatrix, h: &[f64], params: &WtMlpParams) -> Result<ChunkWeights> {
    let (store, mlp) = params.clone().into_store()?;
    let mut g = Graph::eval();
    let sv = g.input(s.clone())?;
    let raw = mlp.log_weights(&mut g, &store, sv, h)?;
    ChunkWeights::new(g.value(raw).data().iter().map(|r| r.exp()).collect())
}

/// `-ln p_gold`, taken from the stored log-probability.
pub fn cross_entropy_loss(dist: &CandidateDistribution, gold: usize) -> Result<f64> {
    dist.log_p
        .get(gold)
        .map(|l| -l)
        .ok_or_else(|| Error::Usage(format!("gold index {gold} out of range for {} candidates", dist.log_p.len())))
}
