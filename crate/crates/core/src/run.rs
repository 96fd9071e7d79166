//! Whole runs driven by a [`RunConfig`]: training to a checkpoint, evaluating
//! a checkpoint and the ablation grid, in the configured precision.

use std::io::Write;

use crate::compute::{Checkpoint, Precision, Scalar};
use crate::config::RunConfig;
use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::eval::{ablation_grid, default_eval_context, evaluate, GridResult, PredictionReport};
use crate::pipeline::Experiment;
use crate::retrieval::write_chunk_dump;
use crate::train::{train, ContextRegime, EpochLog, Scorer};

/// Loads the dataset and embeddings named by `cfg` after checking they exist.
pub fn load_experiment(cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    cfg.validate_inputs()?;
    Experiment::load(&cfg.data_dir, &cfg.embeddings, cfg.model.embed_dim, cfg.train.chunk_budget)
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    /// Parameters of the best validation epoch; metadata holds the run settings.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_mrr: Option<f64>,
}

pub fn train_checkpoint(cfg: &RunConfig, exp: &Experiment, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainedRun> {
    match cfg.model.precision {
        Precision::F32 => train_in::<f32>(cfg, exp, on_epoch),
        Precision::F64 => train_in::<f64>(cfg, exp, on_epoch),
    }
}

fn train_in<F: Scalar>(cfg: &RunConfig, exp: &Experiment, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainedRun> {
    let mut scorer = Scorer::<F>::init(&cfg.model, &cfg.train)?;
    let outcome = train(&mut scorer, &cfg.train, &exp.embeddings, &exp.train, &exp.valid, on_epoch)?;
    Ok(TrainedRun {
        checkpoint: Checkpoint::from_store(&outcome.best, cfg.to_key_values()),
        log: outcome.log,
        best_epoch: outcome.best_epoch,
        best_valid_mrr: outcome.best_valid_mrr,
    })
}

/// Run settings recorded in a checkpoint.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    RunConfig::parse(&ckpt.metadata).map_err(|e| Error::Checkpoint(format!("unreadable run settings: {e}")))
}

/// Evaluates `ckpt` with the model and head described by `cfg`.
///
/// `context` defaults to the evaluation context paired with the training
/// context. Fails with a checkpoint error when `cfg` describes different
/// parameter shapes than the checkpoint holds.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    exp: &Experiment,
    split: Split,
    context: Option<ContextRegime>,
) -> Result<PredictionReport> {
    match cfg.model.precision {
        Precision::F32 => evaluate_in::<f32>(ckpt, cfg, exp, split, context),
        Precision::F64 => evaluate_in::<f64>(ckpt, cfg, exp, split, context),
    }
}

fn evaluate_in<F: Scalar>(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    exp: &Experiment,
    split: Split,
    context: Option<ContextRegime>,
) -> Result<PredictionReport> {
    let scorer = Scorer::<F>::attach(&cfg.model, &cfg.train, ckpt.to_store()?)?;
    let context = context.unwrap_or_else(|| default_eval_context(cfg.train.head, cfg.train.train_context));
    evaluate(&scorer, &exp.embeddings, exp.split(split), context, split.name())
}

/// Trains every configured grid row and scores it on the validation split
/// under every configured column.
pub fn run_grid(cfg: &RunConfig, exp: &Experiment) -> Result<GridResult> {
    match cfg.model.precision {
        Precision::F32 => grid_in::<f32>(cfg, exp),
        Precision::F64 => grid_in::<f64>(cfg, exp),
    }
}

fn grid_in<F: Scalar>(cfg: &RunConfig, exp: &Experiment) -> Result<GridResult> {
    ablation_grid::<F>(
        &cfg.model,
        &cfg.train,
        &cfg.grid_rows,
        &cfg.grid_columns,
        &exp.embeddings,
        &exp.train,
        &exp.valid,
        &exp.valid,
    )
}

/// Writes the chunks of every training document once per question, scored
/// against that question's training query.
pub fn dump_training_chunks<W: Write>(exp: &Experiment, mut w: W) -> std::io::Result<()> {
    for doc in &exp.train {
        for q in &doc.questions {
            let mut chunks = doc.chunks.clone();
            for (c, &s) in chunks.iter_mut().zip(&q.train_scores) {
                c.tfidf_score = s;
            }
            write_chunk_dump(&chunks, &mut w)?;
        }
    }
    Ok(())
}
