//! Flat `key = value` experiment configs.
//!
//! One setting per line, `#` starts a comment, keys may contain spaces.
//! Unknown keys are rejected so typos fail loudly instead of silently
//! falling back to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sparseq_core::embedding::OrderStrategy;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`, got `{content}`")]
    Malformed { line: usize, content: String },
    #[error("config line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config key `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("missing required config key `{key}`")]
    Missing { key: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Lm,
    Pos,
    Recite,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Lm => write!(f, "lm"),
            Task::Pos => write!(f, "pos"),
            Task::Recite => write!(f, "recite"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Per-layer width policy for the recurrent windows.
#[derive(Debug, Clone, PartialEq)]
pub enum GammaSpec {
    /// Solve each layer's fraction so the sparse stack matches the
    /// parameter count of a dense stack with `match dense *` dims.
    MatchBudget,
    /// Explicit fraction per layer.
    PerLayer(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub run_id: String,
    pub train_data: Option<PathBuf>,
    pub valid_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub output_dir: PathBuf,

    pub embedding_size: usize,
    /// Intermediate LSTM widths; the final layer's width is implied
    /// (embedding size for lm/recite so weights can be tied).
    pub hidden_sizes: Vec<usize>,
    /// Vocabulary size for data-free parameter math; training uses the
    /// corpus vocabulary instead.
    pub vocab_size: Option<usize>,
    pub tagset_size: Option<usize>,
    pub min_count: u64,

    /// Segment count per LSTM layer; empty means dense everywhere.
    pub segments: Vec<usize>,
    pub gamma: GammaSpec,
    pub match_dense_hidden: Option<usize>,
    pub match_dense_embedding: Option<usize>,

    pub embedding_density: f64,
    pub embedding_bins: Option<usize>,
    pub order_strategy: OrderStrategy,
    pub tie_weights: bool,

    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt_length: usize,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    /// 0 disables clipping.
    pub grad_clip: f64,

    pub word_dropout: f64,
    pub variational_dropout: f64,
    pub weight_dropconnect: f64,
}

const KEYS: &[&str] = &[
    "task",
    "seed",
    "run id",
    "train data",
    "valid data",
    "test data",
    "output dir",
    "embedding size",
    "hidden sizes",
    "vocab size",
    "tagset size",
    "min count",
    "segments",
    "gamma",
    "match dense hidden",
    "match dense embedding",
    "embedding density",
    "embedding bins",
    "order strategy",
    "tie weights",
    "optimizer",
    "learning rate",
    "epochs",
    "batch size",
    "bptt length",
    "momentum",
    "lr decay factor",
    "grad clip",
    "word level embedding dropout",
    "variational embedding dropout",
    "DropConnect on W_hh",
];

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        if stripped.trim().is_empty() {
            continue;
        }
        let Some(eq) = stripped.find('=') else {
            return Err(ConfigError::Malformed {
                line,
                content: stripped.trim().to_string(),
            });
        };
        let key = stripped[..eq].trim().to_string();
        let value = stripped[eq + 1..].trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Malformed {
                line,
                content: stripped.trim().to_string(),
            });
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(ConfigError::Duplicate { line, key });
        }
    }
    Ok(map)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<String, ConfigError> {
        self.take(key).ok_or(ConfigError::Missing {
            key: key.to_string(),
        })
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("cannot parse `{v}`"),
            }),
        }
    }

    fn parse_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("cannot parse `{v}`"),
            }),
        }
    }

    fn parse_required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, ConfigError> {
        let v = self.required(key)?;
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            reason: format!("cannot parse `{v}`"),
        })
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Vec<T>, ConfigError> {
        match self.take(key) {
            None => Ok(Vec::new()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim().parse().map_err(|_| ConfigError::BadValue {
                        key: key.to_string(),
                        reason: format!("cannot parse list item `{}`", item.trim()),
                    })
                })
                .collect(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            reason: format!("expected true/false, got `{v}`"),
        }),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        for key in pairs.keys() {
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { key: key.clone() });
            }
        }
        let mut f = Fields(pairs);

        let task = match f.required("task")?.as_str() {
            "lm" => Task::Lm,
            "pos" => Task::Pos,
            "recite" => Task::Recite,
            other => {
                return Err(ConfigError::BadValue {
                    key: "task".to_string(),
                    reason: format!("expected lm|pos|recite, got `{other}`"),
                })
            }
        };
        let seed: u64 = f.parse_required("seed")?;
        let run_id = f.take("run id").unwrap_or_else(|| "run".to_string());

        let train_data = f.take("train data").map(PathBuf::from);
        let valid_data = f.take("valid data").map(PathBuf::from);
        let test_data = f.take("test data").map(PathBuf::from);
        let output_dir = PathBuf::from(f.take("output dir").unwrap_or_else(|| ".".to_string()));

        let embedding_size: usize = f.parse_required("embedding size")?;
        let hidden_sizes: Vec<usize> = f.list("hidden sizes")?;
        let vocab_size = f.parse_opt("vocab size")?;
        let tagset_size = f.parse_opt("tagset size")?;
        let min_count = f.parse("min count", 1u64)?;

        let segments: Vec<usize> = f.list("segments")?;
        let gamma = match f.take("gamma") {
            None => GammaSpec::PerLayer(Vec::new()),
            Some(v) if v.trim() == "match-budget" => GammaSpec::MatchBudget,
            Some(v) => {
                let mut out = Vec::new();
                for item in v.split(',') {
                    out.push(item.trim().parse().map_err(|_| ConfigError::BadValue {
                        key: "gamma".to_string(),
                        reason: format!("cannot parse list item `{}`", item.trim()),
                    })?);
                }
                GammaSpec::PerLayer(out)
            }
        };
        let match_dense_hidden = f.parse_opt("match dense hidden")?;
        let match_dense_embedding = f.parse_opt("match dense embedding")?;

        let embedding_density = f.parse("embedding density", 1.0f64)?;
        let embedding_bins = f.parse_opt("embedding bins")?;
        let order_strategy = match f.take("order strategy") {
            None => OrderStrategy::Up,
            Some(v) => v.parse().map_err(|e| ConfigError::BadValue {
                key: "order strategy".to_string(),
                reason: format!("{e}"),
            })?,
        };
        let tie_weights = match f.take("tie weights") {
            None => task != Task::Pos,
            Some(v) => parse_bool("tie weights", &v)?,
        };

        let optimizer = match f.take("optimizer") {
            None => Optimizer::Sgd,
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "sgd" => Optimizer::Sgd,
                "adam" => Optimizer::Adam,
                other => {
                    return Err(ConfigError::BadValue {
                        key: "optimizer".to_string(),
                        reason: format!("expected sgd|adam, got `{other}`"),
                    })
                }
            },
        };
        let learning_rate = f.parse("learning rate", 1.0f64)?;
        let epochs = f.parse("epochs", 1usize)?;
        let batch_size = f.parse("batch size", 20usize)?;
        let bptt_length = f.parse("bptt length", 35usize)?;
        let momentum = f.parse(
            "momentum",
            if optimizer == Optimizer::Sgd { 0.9 } else { 0.0 },
        )?;
        let lr_decay_factor = f.parse("lr decay factor", 1.0f64)?;
        let grad_clip = f.parse(
            "grad clip",
            if task == Task::Pos { 0.0 } else { 5.0f64 },
        )?;

        let word_dropout = f.parse("word level embedding dropout", 0.0f64)?;
        let variational_dropout = f.parse("variational embedding dropout", 0.0f64)?;
        let weight_dropconnect = f.parse("DropConnect on W_hh", 0.0f64)?;

        let cfg = ExperimentConfig {
            task,
            seed,
            run_id,
            train_data,
            valid_data,
            test_data,
            output_dir,
            embedding_size,
            hidden_sizes,
            vocab_size,
            tagset_size,
            min_count,
            segments,
            gamma,
            match_dense_hidden,
            match_dense_embedding,
            embedding_density,
            embedding_bins,
            order_strategy,
            tie_weights,
            optimizer,
            learning_rate,
            epochs,
            batch_size,
            bptt_length,
            momentum,
            lr_decay_factor,
            grad_clip,
            word_dropout,
            variational_dropout,
            weight_dropconnect,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override on top of the loaded file.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let Some(eq) = spec.find('=') else {
            return Err(ConfigError::Malformed {
                line: 0,
                content: spec.to_string(),
            });
        };
        let key = spec[..eq].trim();
        let value = spec[eq + 1..].trim();
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                key: key.to_string(),
            });
        }
        let bad = |reason: String| ConfigError::BadValue {
            key: key.to_string(),
            reason,
        };
        let parse_f64 =
            |v: &str| -> Result<f64, ConfigError> { v.parse().map_err(|_| bad(format!("cannot parse `{v}`"))) };
        match key {
            "task" => {
                self.task = match value {
                    "lm" => Task::Lm,
                    "pos" => Task::Pos,
                    "recite" => Task::Recite,
                    other => return Err(bad(format!("expected lm|pos|recite, got `{other}`"))),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(format!("cannot parse `{value}`")))?,
            "run id" => self.run_id = value.to_string(),
            "train data" => self.train_data = Some(PathBuf::from(value)),
            "valid data" => self.valid_data = Some(PathBuf::from(value)),
            "test data" => self.test_data = Some(PathBuf::from(value)),
            "output dir" => self.output_dir = PathBuf::from(value),
            "embedding size" => {
                self.embedding_size = value.parse().map_err(|_| bad(format!("cannot parse `{value}`")))?
            }
            "hidden sizes" => {
                let mut out = Vec::new();
                for item in value.split(',') {
                    if item.trim().is_empty() {
                        continue;
                    }
                    out.push(
                        item.trim()
                            .parse()
                            .map_err(|_| bad(format!("cannot parse list item `{}`", item.trim())))?,
                    );
                }
                self.hidden_sizes = out;
            }
            "vocab size" => {
                self.vocab_size = Some(value.parse().map_err(|_| bad(format!("cannot parse `{value}`")))?)
            }
            "tagset size" => {
                self.tagset_size = Some(value.parse().map_err(|_| bad(format!("cannot parse `{value}`")))?)
            }
            "min count" => self.min_count = value.parse().map_err(|_| bad(format!("cannot parse `{value}`")))?,
            "segments" => {
                let mut out = Vec::new();
                for item in value.split(',') {
                    if item.trim().is_empty() {
                        continue;
                    }
                    out.push(
                        item.trim()
                            .parse()
                            .map_err(|_| bad(format!("cannot parse list item `{}`", item.trim())))?,
                    );
                }
                self.segments = out;
            }
            "gamma" => {
                self.gamma = if value == "match-budget" {
                    GammaSpec::MatchBudget
                } else {
                    let mut out = Vec::new();
                    for item in value.split(',') {
                        out.push(parse_f64(item.trim())?);
                    }
                    GammaSpec::PerLayer(out)
                }
            }
            "match dense hidden" => {
                self.match_dense_hidden =
                    Some(value.parse().map_err(|_| bad(format!("cannot parse `{value}`")))?)
            }
            "match dense embedding" => {
                self.match_dense_embedding =
                    Some(value.parse().map_err(|_| bad(format!("cannot parse `{value}`")))?)
            }
            "embedding density" => self.embedding_density = parse_f64(value)?,
            "embedding bins" => {
                self.embedding_bins = Some(value.parse().map_err(|_| bad(format!("cannot parse `{value}`")))?)
            }
            "order strategy" => {
                self.order_strategy = value.parse().map_err(|e| bad(format!("{e}")))?
            }
            "tie weights" => self.tie_weights = parse_bool(key, value)?,
            "optimizer" => {
                self.optimizer = match value.to_ascii_lowercase().as_str() {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::Adam,
                    other => return Err(bad(format!("expected sgd|adam, got `{other}`"))),
                }
            }
            "learning rate" => self.learning_rate = parse_f64(value)?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(format!("cannot parse `{value}`")))?,
            "batch size" => self.batch_size = value.parse().map_err(|_| bad(format!("cannot parse `{value}`")))?,
            "bptt length" => self.bptt_length = value.parse().map_err(|_| bad(format!("cannot parse `{value}`")))?,
            "momentum" => self.momentum = parse_f64(value)?,
            "lr decay factor" => self.lr_decay_factor = parse_f64(value)?,
            "grad clip" => self.grad_clip = parse_f64(value)?,
            "word level embedding dropout" => self.word_dropout = parse_f64(value)?,
            "variational embedding dropout" => self.variational_dropout = parse_f64(value)?,
            "DropConnect on W_hh" => self.weight_dropconnect = parse_f64(value)?,
            _ => unreachable!("key checked against KEYS"),
        }
        self.validate()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: String| ConfigError::BadValue {
            key: key.to_string(),
            reason,
        };
        if self.embedding_size == 0 {
            return Err(bad("embedding size", "must be positive".into()));
        }
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(bad("hidden sizes", "widths must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(bad("batch size", "must be positive".into()));
        }
        if self.bptt_length == 0 {
            return Err(bad("bptt length", "must be positive".into()));
        }
        if !(self.embedding_density > 0.0 && self.embedding_density <= 1.0) {
            return Err(bad("embedding density", "must be in (0, 1]".into()));
        }
        for (key, p) in [
            ("word level embedding dropout", self.word_dropout),
            ("variational embedding dropout", self.variational_dropout),
            ("DropConnect on W_hh", self.weight_dropconnect),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(bad(key, "must be in [0, 1)".into()));
            }
        }
        let n_layers = self.lstm_layer_count();
        if !self.segments.is_empty() && self.segments.len() != n_layers {
            return Err(bad(
                "segments",
                format!("expected {} entries (one per LSTM layer)", n_layers),
            ));
        }
        if self.segments.iter().any(|&n| n == 0) {
            return Err(bad("segments", "segment counts must be positive".into()));
        }
        if let GammaSpec::PerLayer(gs) = &self.gamma {
            if !gs.is_empty() && gs.len() != n_layers {
                return Err(bad(
                    "gamma",
                    format!("expected {} entries (one per LSTM layer)", n_layers),
                ));
            }
        }
        Ok(())
    }

    /// lm/recite stacks close back to the embedding width; pos is a fixed
    /// two-direction single layer handled separately.
    pub fn lstm_layer_count(&self) -> usize {
        match self.task {
            Task::Pos => 1,
            _ => self.hidden_sizes.len() + 1,
        }
    }

    pub fn segments_for_layer(&self, layer: usize) -> usize {
        self.segments.get(layer).copied().unwrap_or(1)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}_metrics.csv", self.run_id))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}_best.ckpt", self.run_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "\
task = recite
seed = 7
embedding size = 100
hidden sizes = 250, 250
learning rate = 10
epochs = 150
";

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(cfg.task, Task::Recite);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.hidden_sizes, vec![250, 250]);
        assert_eq!(cfg.lstm_layer_count(), 3);
        assert!(cfg.tie_weights);
        assert_eq!(cfg.grad_clip, 5.0);
        assert_eq!(cfg.batch_size, 20);
    }

    #[test]
    fn rejects_unknown_key() {
        let text = format!("{BASE}typo key = 3\n");
        assert!(matches!(
            ExperimentConfig::parse(&text),
            Err(ConfigError::UnknownKey { .. })
        ));
    }

    #[test]
    fn rejects_duplicate_and_malformed() {
        let dup = format!("{BASE}seed = 8\n");
        assert!(matches!(
            ExperimentConfig::parse(&dup),
            Err(ConfigError::Duplicate { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("task recite\n"),
            Err(ConfigError::Malformed { .. })
        ));
    }

    #[test]
    fn table_style_keys_round_trip() {
        let text = format!(
            "{BASE}optimizer = adam\nword level embedding dropout = 0.1\n\
             variational embedding dropout = 0.4\nDropConnect on W_hh = 0.2\n"
        );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg.optimizer, Optimizer::Adam);
        assert_eq!(cfg.word_dropout, 0.1);
        assert_eq!(cfg.variational_dropout, 0.4);
        assert_eq!(cfg.weight_dropconnect, 0.2);
        assert_eq!(cfg.momentum, 0.0);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut cfg = ExperimentConfig::parse(BASE).unwrap();
        cfg.apply_override("seed=99").unwrap();
        assert_eq!(cfg.seed, 99);
        cfg.apply_override("segments = 3, 3, 2").unwrap();
        assert_eq!(cfg.segments, vec![3, 3, 2]);
        assert!(cfg.apply_override("segments = 3, 3").is_err());
        assert!(cfg.apply_override("nonsense = 1").is_err());
    }

    #[test]
    fn gamma_forms() {
        let mut cfg = ExperimentConfig::parse(BASE).unwrap();
        cfg.apply_override("gamma = match-budget").unwrap();
        assert_eq!(cfg.gamma, GammaSpec::MatchBudget);
        cfg.apply_override("gamma = 0.5, 0.25, 1.0").unwrap();
        assert_eq!(cfg.gamma, GammaSpec::PerLayer(vec![0.5, 0.25, 1.0]));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = format!("# header\n\n{BASE}  # trailing\n");
        assert!(ExperimentConfig::parse(&text).is_ok());
    }
}
