//! Run configuration: TOML files plus dotted `key=value` overrides.
//!
//! Resolution order is defaults, then the file, then overrides. Every key
//! must name a field of [`RunConfig`]; anything else is rejected with the
//! full dotted path in the error.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::cells::ModelConfig;
use crate::data::{self, build_vocab, parse_labeled, read_text, tokenize_lines, DataError, LabeledDoc, Vocab};
use crate::quantizers::QuantConfig;
use crate::training::{Dataset, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{0}` is a section, not a value")]
    NotAValue(String),
    #[error("bad override {0:?}: expected key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Whitespace-tokenized text, one sentence per line.
    Lm,
    /// `label<TAB>text` documents.
    Classify,
    /// Periodic token stream `0 1 .. period-1 0 1 ..`.
    ToyLm,
    /// Documents whose label is the parity of their token ids.
    ToyClassify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// File paths for text data; empty means unused. Relative paths resolve
    /// against the config file's directory.
    pub train: String,
    pub valid: String,
    pub test: String,
    /// Maximum number of non-special vocabulary entries; 0 keeps all.
    pub max_vocab: usize,
    pub toy_period: usize,
    pub toy_tokens: usize,
    pub toy_docs: usize,
    pub toy_vocab: usize,
    pub toy_min_len: usize,
    pub toy_max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::ToyLm,
            train: String::new(),
            valid: String::new(),
            test: String::new(),
            max_vocab: 0,
            toy_period: 4,
            toy_tokens: 2000,
            toy_docs: 400,
            toy_vocab: 10,
            toy_min_len: 5,
            toy_max_len: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub quant: QuantConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn check_keys(given: &Table, reference: &Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in given {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (reference.get(k), v) {
            (None, _) => return Err(ConfigError::UnknownKey(path)),
            (Some(Value::Table(r)), Value::Table(g)) => check_keys(g, r, &path)?,
            (Some(Value::Table(_)), _) => return Err(ConfigError::NotAValue(path)),
            _ => {}
        }
    }
    Ok(())
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Parse an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Turn `a.b.c=value` into a nested table.
pub fn parse_override(arg: &str) -> Result<Table, ConfigError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(arg.into()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(arg.into()));
    }
    let mut value = parse_value(raw.trim());
    for p in parts.iter().rev() {
        let mut t = Table::new();
        t.insert(p.to_string(), value);
        value = Value::Table(t);
    }
    match value {
        Value::Table(t) => Ok(t),
        _ => unreachable!(),
    }
}

impl RunConfig {
    /// Resolve defaults, an optional TOML document, and overrides.
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let reference = match Value::try_from(RunConfig::default()) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("RunConfig serializes to a table"),
        };
        let mut merged = reference.clone();
        let mut layers = Vec::new();
        if let Some(text) = file {
            layers.push(text.parse::<Table>().map_err(|e| ConfigError::Invalid(e.to_string()))?);
        }
        for o in overrides {
            layers.push(parse_override(o)?);
        }
        for layer in layers {
            check_keys(&layer, &reference, "")?;
            merge(&mut merged, layer);
        }
        let cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.message().to_string()))?;
        cfg.quant.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    /// Load `path` and apply overrides; relative data paths become
    /// relative to the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?),
            None => None,
        };
        let mut cfg = Self::resolve(text.as_deref(), overrides)?;
        if let Some(dir) = path.and_then(Path::parent) {
            for f in [&mut cfg.data.train, &mut cfg.data.valid, &mut cfg.data.test] {
                if !f.is_empty() && Path::new(f.as_str()).is_relative() {
                    *f = dir.join(&*f).display().to_string();
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }
}

/// Data prepared for training, with the vocabulary when built from text.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub vocab: Option<Vocab>,
    pub vocab_size: usize,
    pub num_classes: usize,
}

fn split_path<'a>(cfg: &'a DataConfig, split: &str) -> Result<&'a str, ConfigError> {
    let p = match split {
        "train" => &cfg.train,
        "valid" => &cfg.valid,
        "test" => &cfg.test,
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown split `{other}` (train, valid, test)"
            )))
        }
    };
    if p.is_empty() {
        return Err(ConfigError::Invalid(format!("data.{split} is not set")));
    }
    Ok(p)
}

fn toy_docs(cfg: &DataConfig, seed: u64, stream: u64) -> Vec<LabeledDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    data::parity_documents(cfg.toy_docs, cfg.toy_vocab, cfg.toy_min_len, cfg.toy_max_len, &mut rng)
}

fn encode_docs(docs: Vec<(usize, Vec<&str>)>, vocab: &Vocab) -> Vec<LabeledDoc> {
    docs.into_iter().map(|(l, toks)| (l, vocab.encode(toks))).collect()
}

fn max_vocab(cfg: &DataConfig) -> usize {
    if cfg.max_vocab == 0 {
        usize::MAX
    } else {
        cfg.max_vocab
    }
}

/// Build the training/validation data described by `cfg`.
pub fn prepare(cfg: &DataConfig, seed: u64) -> Result<Prepared, ConfigError> {
    match cfg.kind {
        DataKind::ToyLm => Ok(Prepared {
            dataset: Dataset::Lm {
                train: data::periodic_corpus(cfg.toy_period, cfg.toy_tokens),
                valid: data::periodic_corpus(cfg.toy_period, (cfg.toy_tokens / 4).max(cfg.toy_period * 8)),
            },
            vocab: None,
            vocab_size: cfg.toy_period,
            num_classes: 0,
        }),
        DataKind::ToyClassify => Ok(Prepared {
            dataset: Dataset::Classify {
                train: toy_docs(cfg, seed, 10),
                valid: toy_docs(cfg, seed, 11),
            },
            vocab: None,
            vocab_size: cfg.toy_vocab,
            num_classes: 2,
        }),
        DataKind::Lm => {
            let train_text = read_text(Path::new(split_path(cfg, "train")?))?;
            let valid_text = read_text(Path::new(split_path(cfg, "valid")?))?;
            let train_tokens = tokenize_lines(&train_text);
            let vocab = build_vocab(train_tokens.iter().copied(), max_vocab(cfg))?;
            let train = vocab.encode(train_tokens);
            let valid = vocab.encode(tokenize_lines(&valid_text));
            Ok(Prepared {
                vocab_size: vocab.len(),
                dataset: Dataset::Lm { train, valid },
                vocab: Some(vocab),
                num_classes: 0,
            })
        }
        DataKind::Classify => {
            let tp = split_path(cfg, "train")?;
            let vp = split_path(cfg, "valid")?;
            let train_text = read_text(Path::new(tp))?;
            let valid_text = read_text(Path::new(vp))?;
            let train_docs = parse_labeled(&train_text, tp)?;
            let valid_docs = parse_labeled(&valid_text, vp)?;
            let vocab = build_vocab(train_docs.iter().flat_map(|(_, t)| t.iter().copied()), max_vocab(cfg))?;
            let num_classes = train_docs
                .iter()
                .chain(&valid_docs)
                .map(|(l, _)| l + 1)
                .max()
                .unwrap_or(0)
                .max(2);
            Ok(Prepared {
                vocab_size: vocab.len(),
                dataset: Dataset::Classify {
                    train: encode_docs(train_docs, &vocab),
                    valid: encode_docs(valid_docs, &vocab),
                },
                vocab: Some(vocab),
                num_classes,
            })
        }
    }
}

/// Load one split for evaluation, reusing a stored vocabulary for text data.
pub fn load_split(cfg: &DataConfig, split: &str, seed: u64, vocab: Option<&Vocab>) -> Result<Dataset, ConfigError> {
    let text_vocab = || vocab.ok_or_else(|| ConfigError::Invalid("checkpoint has no vocabulary for text data".into()));
    match cfg.kind {
        DataKind::ToyLm | DataKind::ToyClassify => {
            let prepared = prepare(cfg, seed)?;
            Ok(match (prepared.dataset, split) {
                (Dataset::Lm { train, .. }, "train") => Dataset::Lm {
                    valid: train.clone(),
                    train,
                },
                (Dataset::Lm { valid, .. }, "valid" | "test") => Dataset::Lm {
                    train: valid.clone(),
                    valid,
                },
                (Dataset::Classify { train, .. }, "train") => Dataset::Classify {
                    valid: train.clone(),
                    train,
                },
                (Dataset::Classify { .. }, "test") => {
                    let test = toy_docs(cfg, seed, 12);
                    Dataset::Classify {
                        train: test.clone(),
                        valid: test,
                    }
                }
                (Dataset::Classify { valid, .. }, "valid") => Dataset::Classify {
                    train: valid.clone(),
                    valid,
                },
                (_, other) => {
                    return Err(ConfigError::Invalid(format!(
                        "unknown split `{other}` (train, valid, test)"
                    )))
                }
            })
        }
        DataKind::Lm => {
            let ids = text_vocab()?.encode(tokenize_lines(&read_text(Path::new(split_path(cfg, split)?))?));
            Ok(Dataset::Lm {
                train: Vec::new(),
                valid: ids,
            })
        }
        DataKind::Classify => {
            let p = split_path(cfg, split)?;
            let text = read_text(Path::new(p))?;
            let docs = encode_docs(parse_labeled(&text, p)?, text_vocab()?);
            Ok(Dataset::Classify {
                train: Vec::new(),
                valid: docs,
            })
        }
    }
}

/// Fill data-dependent model sizes left at 0.
pub fn finalize_model(model: &mut ModelConfig, prepared: &Prepared) {
    if model.vocab == 0 {
        model.vocab = prepared.vocab_size;
    }
    if model.num_classes == 0 && prepared.num_classes > 0 {
        model.num_classes = prepared.num_classes;
    }
}
