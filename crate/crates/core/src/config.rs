//! Run configuration as a flat `section.key = value` document.
//!
//! ```text
//! seed = 1
//! data.train_size = 500
//! data.phonemes_per_word = [2,4]
//! model.d_model = 64
//! train.adam.beta2 = 0.98
//! paths.corpus_dir = runs/data
//! ```
//!
//! Keys missing from a file keep their defaults; unknown keys are errors.
//! Blank lines and lines starting with `#` are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::SynthConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` set twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Manifests, text pairs and the vocabulary.
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

/// Everything one command needs. `seed` is the single root seed: it
/// overrides the seeds inside `data` and `train` and seeds parameter init.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Derived from `seed`, the vocabulary or the data section at run time.
const DERIVED_KEYS: [&str; 4] = ["data.seed", "train.seed", "model.vocab_size", "model.feature_dim"];

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn slot<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.').try_fold(root, |node, part| match node {
        Value::Object(map) => map.get_mut(part),
        _ => None,
    })
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Copies the root seed and data feature width into the sections.
    pub fn resolved(mut self) -> Self {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.model.feature_dim = self.data.feature_dim;
        self
    }

    pub fn to_text(&self) -> String {
        let tree = serde_json::to_value(self).expect("plain data");
        let mut entries = Vec::new();
        flatten("", &tree, &mut entries);
        let mut s = String::new();
        for (k, v) in entries {
            if !DERIVED_KEYS.contains(&k.as_str()) {
                s.push_str(&format!("{k} = {}\n", render(&v)));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(Self::default()).expect("plain data");
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            let unknown = || ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            };
            if DERIVED_KEYS.contains(&key) {
                return Err(unknown());
            }
            let target = slot(&mut tree, key).ok_or_else(unknown)?;
            if target.is_object() {
                return Err(unknown());
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            *target = if target.is_string() {
                Value::String(value.to_string())
            } else {
                serde_json::from_str(value).map_err(|e| ConfigError::Value {
                    line,
                    key: key.to_string(),
                    msg: e.to_string(),
                })?
            };
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_text()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
