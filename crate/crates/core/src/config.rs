//! Plain-text `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::heads::Head;
use crate::model::ModelConfig;
use crate::train::{ContextRegime, TrainConfig};

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// ignored. Returns `(line, key, value)` triples in file order.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected `key = value`, found `{line}`"),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                message: "empty key".into(),
            });
        }
        out.push((idx + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`: expected true or false"))),
    }
}

/// One row of an ablation grid: a head trained under a context regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridRow {
    pub head: Head,
    pub train_context: ContextRegime,
}

impl std::str::FromStr for GridRow {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (head, ctx) = s
            .split_once(':')
            .ok_or_else(|| format!("expected `head:train_context`, found `{s}`"))?;
        Ok(GridRow {
            head: head.trim().parse()?,
            train_context: ctx.trim().parse()?,
        })
    }
}

impl std::fmt::Display for GridRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.head, self.train_context)
    }
}

/// Rows of the default grid: learned and static weighting, global
/// normalization with ranked and random chunks, and the single-context
/// baseline under three training contexts.
pub fn default_grid_rows() -> Vec<GridRow> {
    use ContextRegime::*;
    [
        (Head::WgnMlp, Top(5)),
        (Head::WgnStatic, Top(5)),
        (Head::Gn, Top(5)),
        (Head::Gn, Uniform(5)),
        (Head::Vanilla, Top(1)),
        (Head::Vanilla, Full),
        (Head::Vanilla, NoContext),
    ]
    .into_iter()
    .map(|(head, train_context)| GridRow { head, train_context })
    .collect()
}

pub fn default_grid_columns() -> Vec<ContextRegime> {
    vec![ContextRegime::Top(1), ContextRegime::Top(5), ContextRegime::Full]
}

/// Everything a `train`, `eval` or `grid` run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub embeddings: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grid_rows: Vec<GridRow>,
    pub grid_columns: Vec<ContextRegime>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            embeddings: PathBuf::from("data/embeddings.txt"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            grid_rows: default_grid_rows(),
            grid_columns: default_grid_columns(),
        }
    }
}

impl RunConfig {
    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = value.into(),
            "embeddings" => self.embeddings = value.into(),
            "checkpoint_dir" => self.checkpoint_dir = value.into(),
            "report_dir" => self.report_dir = value.into(),
            "seed" => {
                let seed = parse_value(key, value)?;
                self.model.seed = seed;
                self.train.seed = seed;
            }
            "grid_rows" => {
                self.grid_rows = split_list(value)
                    .map(|v| parse_value(key, v))
                    .collect::<Result<_>>()?
            }
            "grid_columns" => {
                self.grid_columns = split_list(value)
                    .map(|v| parse_value(key, v))
                    .collect::<Result<_>>()?
            }
            _ => {
                if !self.model.set(key, value)? && !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Settings needed to rebuild the model; stored inside checkpoints.
    pub fn to_key_values(&self) -> String {
        format!(
            "data_dir = {}\nembeddings = {}\nseed = {}\n{}{}",
            self.data_dir.display(),
            self.embeddings.display(),
            self.train.seed,
            self.model.to_key_values(),
            self.train.to_key_values(),
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, key, value) in parse_key_values(text)? {
            cfg.set(&key, &value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            for p in [
                &mut cfg.data_dir,
                &mut cfg.embeddings,
                &mut cfg.checkpoint_dir,
                &mut cfg.report_dir,
            ] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.grid_rows.is_empty() || self.grid_columns.is_empty() {
            return Err(Error::Config("grid needs at least one row and one column".into()));
        }
        Ok(())
    }

    /// Checks that inputs exist before any compute starts.
    pub fn validate_inputs(&self) -> Result<()> {
        if !self.data_dir.is_dir() {
            return Err(Error::Config(format!(
                "dataset directory `{}` does not exist",
                self.data_dir.display()
            )));
        }
        if !self.embeddings.is_file() {
            return Err(Error::Config(format!(
                "embeddings file `{}` does not exist",
                self.embeddings.display()
            )));
        }
        Ok(())
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}
