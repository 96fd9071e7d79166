//! `wgnqa`: generate data, train, evaluate and run ablation grids.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wgnqa::compute::Checkpoint;
use wgnqa::config::RunConfig;
use wgnqa::corpus::{generate_synthetic, split_documents, write_dataset, Split, SyntheticConfig};
use wgnqa::heads::Head;
use wgnqa::run::{checkpoint_config, dump_training_chunks, evaluate_checkpoint, load_experiment, run_grid, train_checkpoint};
use wgnqa::text::EmbeddingTable;
use wgnqa::train::ContextRegime;
use wgnqa::Error;

#[derive(Parser)]
#[command(name = "wgnqa", version, about = "Answer selection over long documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted synthetic dataset and matching random embeddings.
    GenSynth(GenSynthArgs),
    /// Train one model and save its best checkpoint and epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on a split and write a prediction report.
    Eval(EvalArgs),
    /// Train every grid row and write the MRR table as CSV.
    Grid(GridArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    docs: usize,
    #[arg(long, default_value_t = 5)]
    questions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    sentences: usize,
    #[arg(long, default_value_t = 10)]
    sentence_tokens: usize,
    #[arg(long, default_value_t = 400)]
    vocab: usize,
    /// Width of the generated embedding vectors.
    #[arg(long, default_value_t = 300)]
    dim: usize,
}

#[derive(Args)]
struct Overrides {
    /// Overrides the seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    head: Option<Head>,
    #[arg(long)]
    train_context: Option<ContextRegime>,
    /// Write every training question's scored chunks as JSONL.
    #[arg(long)]
    dump_chunks: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "valid")]
    split: String,
    /// Defaults to the context paired with the training context.
    #[arg(long)]
    eval_context: Option<ContextRegime>,
    /// Config whose paths and dimensions replace those stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path; defaults to a file in the report directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Grid(a) => grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        return 3;
    }
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Parse { .. } | Error::Parameter(_) | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> wgnqa::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) -> wgnqa::Result<()> {
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected KEY=VALUE, found `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = o.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(())
}

fn gen_synth(a: GenSynthArgs) -> wgnqa::Result<()> {
    if a.docs == 0 {
        return Err(Error::Usage("--docs must be at least 1".into()));
    }
    if a.dim == 0 {
        return Err(Error::Usage("--dim must be at least 1".into()));
    }
    let cfg = SyntheticConfig {
        num_docs: a.docs,
        questions_per_doc: a.questions,
        sentences_per_summary: a.sentences,
        tokens_per_sentence: a.sentence_tokens,
        vocab_size: a.vocab,
        seed: a.seed,
    };
    let docs = generate_synthetic(&cfg)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    for (split, part) in Split::ALL.into_iter().zip(split_documents(docs)) {
        let path = a.out.join(split.file_name());
        let mut w = create(&path)?;
        write_dataset(&part, &mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
        log::info!("{}: {} documents", path.display(), part.len());
    }
    let vocab = cfg.vocabulary();
    let table = EmbeddingTable::random(vocab.iter().map(String::as_str), a.dim, a.seed);
    let path = a.out.join("embeddings.txt");
    let mut w = create(&path)?;
    table.write_text(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
    Ok(())
}

/// Exclusive claim on a checkpoint directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> wgnqa::Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(".wgnqa.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "`{}` is locked by another run (remove `{}` if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Absolute paths, so that checkpoints can be evaluated from anywhere.
fn absolutize(cfg: &mut RunConfig) {
    for p in [&mut cfg.data_dir, &mut cfg.embeddings] {
        if let Ok(abs) = fs::canonicalize(&*p) {
            *p = abs;
        }
    }
}

fn run_name(cfg: &RunConfig) -> String {
    format!("{}_{}", cfg.train.head, cfg.train.train_context)
}

fn train(a: TrainArgs) -> wgnqa::Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    apply_overrides(&mut cfg, &a.overrides)?;
    if let Some(h) = a.head {
        cfg.train.head = h;
    }
    if let Some(c) = a.train_context {
        cfg.train.train_context = c;
    }
    cfg.validate()?;
    cfg.validate_inputs()?;
    absolutize(&mut cfg);
    let _lock = DirLock::acquire(&cfg.checkpoint_dir)?;
    let exp = load_experiment(&cfg)?;
    if let Some(path) = &a.dump_chunks {
        let mut w = create(path)?;
        dump_training_chunks(&exp, &mut w).and_then(|_| w.flush()).map_err(io_err(path))?;
    }

    let name = run_name(&cfg);
    let log_path = cfg.checkpoint_dir.join(format!("{name}.log.jsonl"));
    let mut log = create(&log_path)?;
    let mut log_err = None;
    let run = train_checkpoint(&cfg, &exp, |entry| {
        let line = serde_json::to_string(entry).expect("epoch log serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_err(&log_path)(e));
    }
    let ckpt_path = cfg.checkpoint_dir.join(format!("{name}.ckpt"));
    run.checkpoint.write(&ckpt_path)?;
    println!(
        "best epoch {} valid MRR {} -> {}",
        run.best_epoch,
        run.best_valid_mrr.map_or("n/a".to_string(), |m| format!("{m:.3}")),
        ckpt_path.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> wgnqa::Result<()> {
    let split: Split = a.split.parse()?;
    let ckpt = Checkpoint::read(&a.checkpoint)?;
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => checkpoint_config(&ckpt)?,
    };
    apply_overrides(&mut cfg, &a.overrides)?;
    let exp = load_experiment(&cfg)?;
    let report = evaluate_checkpoint(&ckpt, &cfg, &exp, split, a.eval_context)?;
    let out = a.out.unwrap_or_else(|| {
        let stem = a.checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        cfg.report_dir
            .join(format!("{stem}_{}_{}.json", report.split, report.eval_context))
    });
    let mut w = create(&out)?;
    report.write_json(&mut w)?;
    w.flush().map_err(io_err(&out))?;
    println!("{:.3}", report.mrr);
    Ok(())
}

fn grid(a: GridArgs) -> wgnqa::Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    apply_overrides(&mut cfg, &a.overrides)?;
    let exp = load_experiment(&cfg)?;
    let result = run_grid(&cfg, &exp)?;
    let out = a.out.unwrap_or_else(|| cfg.report_dir.join("grid.csv"));
    let mut w = create(&out)?;
    result.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&out))?;
    let mut stdout = std::io::stdout().lock();
    result.write_csv(&mut stdout).map_err(io_err(&out))?;
    Ok(())
}
