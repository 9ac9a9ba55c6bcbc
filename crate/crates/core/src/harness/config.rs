//! Run configuration and its flat `section.key=value` text form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::error::{Error, Result};
use crate::meta::{AdaptConfig, MetaConfig, TrainMode};
use crate::model::ModelConfig;
use crate::sampler::{SamplerConfig, Strategy};
use crate::tasks::SuiteConfig;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub train_mode: TrainMode,
    pub suite_seed: u64,
    pub train_seed: u64,
    pub out_dir: String,
    /// Languages to evaluate (and adapt to); empty means all of them.
    pub languages: Vec<usize>,
    /// Dataset order for sequential fine-tuning; empty means `0..k`.
    pub sequential_order: Vec<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            train_mode: TrainMode::Ctml,
            suite_seed: 1000,
            train_seed: 0,
            out_dir: "out".into(),
            languages: Vec::new(),
            sequential_order: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySection {
    pub strategies: Vec<Strategy>,
    /// Paired seeds; seed `s` uses suite seed `run.suite_seed + s` and
    /// train seed `run.train_seed + s`.
    pub seeds: Vec<u64>,
    pub subset_sizes: Vec<usize>,
    /// Random subsets drawn per size strictly between 1 and k.
    pub subsets_per_size: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            strategies: vec![
                Strategy::Uniform,
                Strategy::Fix,
                Strategy::Sample,
                Strategy::First,
                Strategy::Last,
                Strategy::Rl,
            ],
            seeds: (0..10).collect(),
            subset_sizes: vec![1, 3, 4, 5, 6],
            subsets_per_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub sampler: SamplerConfig,
    pub adapt: AdaptConfig,
    pub run: RunSection,
    pub study: StudySection,
}

fn parse_scalar(raw: &str, like: &Value) -> Value {
    let number = || -> Option<Value> {
        if let Ok(u) = raw.parse::<u64>() {
            return Some(Value::from(u));
        }
        if let Ok(i) = raw.parse::<i64>() {
            return Some(Value::from(i));
        }
        raw.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number)
    };
    match like {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Bool(_) => raw
            .parse::<bool>()
            .map(Value::Bool)
            .unwrap_or_else(|_| Value::String(raw.to_string())),
        _ => number()
            .or_else(|| raw.parse::<bool>().ok().map(Value::Bool))
            .unwrap_or_else(|| Value::String(raw.to_string())),
    }
}

fn parse_value(raw: &str, like: &Value) -> Value {
    match like {
        Value::Array(items) => {
            let raw = raw.trim();
            let inner = raw
                .strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .unwrap_or(raw)
                .trim();
            if inner.is_empty() {
                return Value::Array(Vec::new());
            }
            let elem = items.first().cloned().unwrap_or(Value::Null);
            Value::Array(
                inner
                    .split(',')
                    .map(|s| parse_scalar(s.trim().trim_matches('"'), &elem))
                    .collect(),
            )
        }
        other => parse_scalar(raw.trim(), other),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(render).collect::<Vec<_>>().join(","),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), render(leaf))),
    }
}

impl RunConfig {
    /// Sets one dotted key from its text value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = match node {
                Value::Object(m) => m
                    .get_mut(part)
                    .ok_or_else(|| Error::UnknownConfigKey(key.to_string()))?,
                _ => return Err(Error::UnknownConfigKey(key.to_string())),
            };
        }
        if node.is_object() {
            return Err(Error::UnknownConfigKey(key.to_string()));
        }
        *node = parse_value(raw, node);
        *self = serde_json::from_value(tree).map_err(|e| Error::InvalidConfigValue {
            key: key.to_string(),
            reason: e.to_string(),
        })?;
        Ok(())
    }

    /// Parses `key=value` assignment text (`#` starts a comment).
    pub fn set_from_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::InvalidConfigValue {
                key: line.to_string(),
                reason: "expected key=value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "format_version" {
                if value != CONFIG_FORMAT_VERSION.to_string() {
                    return Err(Error::VersionMismatch {
                        expected: CONFIG_FORMAT_VERSION,
                        found: value.to_string(),
                    });
                }
                continue;
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, which must carry a `format_version` line.
    pub fn from_text(text: &str) -> Result<Self> {
        let has_version = text
            .lines()
            .map(str::trim)
            .any(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == "format_version"));
        if !has_version {
            return Err(Error::Corrupt {
                path: String::new(),
                reason: "missing format_version line".into(),
            });
        }
        let mut cfg = RunConfig::default();
        cfg.set_from_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut pairs = Vec::new();
        flatten("", &tree, &mut pairs);
        let mut s = format!("format_version={CONFIG_FORMAT_VERSION}\n");
        for (k, v) in pairs {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Corrupt { reason, .. } => Error::Corrupt {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, reason: String| Error::InvalidConfigValue {
            key: key.into(),
            reason,
        };
        self.model.validate()?;
        self.meta.validate()?;
        self.sampler.validate()?;
        let k = self.suite.k();
        if k == 0 {
            return Err(invalid("suite.relatedness", "no source datasets".into()));
        }
        for (key, len) in [
            ("suite.noise", self.suite.noise.len()),
            ("suite.candidates", self.suite.candidates.len()),
            ("suite.sizes", self.suite.sizes.len()),
        ] {
            if len != 1 && len != k {
                return Err(invalid(key, format!("has {len} entries, expected 1 or {k}")));
            }
        }
        if self.model.feature_dim != self.suite.feature_dim {
            return Err(invalid(
                "model.feature_dim",
                format!("differs from suite.feature_dim {}", self.suite.feature_dim),
            ));
        }
        if self.run.train_mode == TrainMode::Ctml && self.meta.meta_batch > k {
            return Err(invalid("meta.meta_batch", format!("exceeds the {k} source datasets")));
        }
        let n_lang = self.suite.language_magnitudes.len() + 1;
        if let Some(&l) = self.run.languages.iter().find(|&&l| l >= n_lang) {
            return Err(invalid("run.languages", format!("no language {l}")));
        }
        if let Some(&j) = self.run.sequential_order.iter().find(|&&j| j >= k) {
            return Err(invalid("run.sequential_order", format!("no source dataset {j}")));
        }
        Ok(())
    }

    /// Languages a run evaluates, in order.
    pub fn languages(&self) -> Vec<usize> {
        if self.run.languages.is_empty() {
            (0..=self.suite.language_magnitudes.len()).collect()
        } else {
            self.run.languages.clone()
        }
    }
}
