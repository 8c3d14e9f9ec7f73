//! Run configuration: one JSON document, with dotted-path overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{BaselineConfig, BaselineKind, RecordAggregatorKind};
use crate::error::{Error, Result};
use crate::tensor::DType;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TvmKa,
    Flattened,
    RecordSum,
    RecordConcat,
    RecordSelfattn,
}

impl ModelKind {
    /// The baseline this selects, or `None` for the key-centric model.
    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            ModelKind::TvmKa => None,
            ModelKind::Flattened => Some(BaselineKind::Flattened),
            ModelKind::RecordSum => Some(BaselineKind::Record(RecordAggregatorKind::Sum)),
            ModelKind::RecordConcat => Some(BaselineKind::Record(RecordAggregatorKind::ConcatProject)),
            ModelKind::RecordSelfattn => Some(BaselineKind::Record(RecordAggregatorKind::SelfAttnAvg)),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown model `{s}`")))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("unit enum serializes");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Run directory name under the run root.
    pub name: String,
    pub model: ModelKind,
    pub precision: DType,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub data: DataPaths,
    pub min_freq: usize,
    /// Learning rates and batch sizes a grid search may enumerate.
    pub lr_grid: Vec<f64>,
    pub batch_grid: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            model: ModelKind::TvmKa,
            precision: DType::F32,
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            data: DataPaths::default(),
            min_freq: 1,
            lr_grid: vec![1e-4, 3e-4, 5e-4, 1e-5, 3e-5, 5e-5, 1e-6, 3e-6, 5e-6],
            batch_grid: vec![2, 4, 8, 16, 32],
        }
    }
}

impl RunConfig {
    /// Every validation problem at once.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.train.problems();
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            out.push(format!("name must be a plain directory name, got `{}`", self.name));
        }
        if self.min_freq == 0 {
            out.push("min_freq must be >= 1".into());
        }
        if self.baseline.flattened_max_tokens < crate::data::views::MIN_FLATTENED_TOKENS {
            out.push(format!(
                "baseline.flattened_max_tokens must be >= {}",
                crate::data::views::MIN_FLATTENED_TOKENS
            ));
        }
        if self.baseline.batch == 0 {
            out.push("baseline.batch must be >= 1".into());
        }
        if !(self.baseline.lr > 0.0) {
            out.push("baseline.lr must be > 0".into());
        }
        for (name, p) in [("train", &self.data.train), ("dev", &self.data.dev), ("test", &self.data.test)] {
            if p.as_os_str().is_empty() {
                out.push(format!("data.{name} must be set"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Reads a config file and applies `path=value` overrides. Relative data
    /// paths are resolved against the config file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        let mut cfg = Self::from_value(value, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train, &mut cfg.data.dev, &mut cfg.data.test] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Sets `a.b.c=value` inside a JSON document. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let map = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert(Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty override path in `{assignment}`")))
}
