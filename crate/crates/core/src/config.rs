//! Run configuration: one JSON document with `data`, `train` and `eval`
//! sections, plus `dotted.key=value` overrides applied on top.
//!
//! Unknown keys anywhere are errors naming the full dotted path.

use crate::dataio::SyntheticSpec;
use crate::error::{Error, Result};
use crate::metrics::{EvalOptions, DEFAULT_IOU_THRESHOLD, DEFAULT_TAU};
use crate::training::TrainRunConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Validation,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tau: f64,
    pub include_background: bool,
    /// Also report instance F1 (foreground connected components).
    pub instance_f1: bool,
    pub iou_threshold: f64,
    pub split: Split,
    pub batch_size: usize,
    /// Write one PGM per predicted mask.
    pub export_pgm: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            include_background: false,
            instance_f1: false,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            split: Split::default(),
            batch_size: 8,
            export_pgm: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("eval.tau: must be finite and non-negative, got {}", self.tau)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!("eval.iou_threshold: must lie in (0, 1], got {}", self.iou_threshold)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("eval.batch_size: must be at least 1".into()));
        }
        Ok(())
    }

    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            tau: self.tau,
            include_background: self.include_background,
            iou_threshold: self.instance_f1.then_some(self.iou_threshold),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Where `gen-data` writes and the other commands read the dataset.
    pub data_dir: PathBuf,
    /// Training output: log, checkpoints.
    pub out_dir: PathBuf,
    pub data: SyntheticSpec,
    pub train: TrainRunConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "run".into(),
            data: SyntheticSpec::default(),
            train: TrainRunConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn prefixed(section: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::InvalidConfig(m) => Error::InvalidConfig(format!("{section}.{m}")),
        e => e,
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        prefixed("data", self.data.validate())?;
        prefixed("train", self.train.validate())?;
        self.eval.validate()
    }

    /// Parses `text` (an empty document when `None`), applies `overrides`
    /// in order, and validates the result.
    pub fn parse(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut root = match text {
            Some(t) => serde_json::from_str::<Value>(t)
                .map_err(|e| Error::InvalidConfig(format!("config is not valid JSON: {e}")))?,
            None => Value::Object(Map::new()),
        };
        if !root.is_object() {
            return Err(Error::InvalidConfig("config must be a JSON object".into()));
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
            let path = e.path().to_string();
            Error::InvalidConfig(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets `a.b.c` in `root` from `a.b.c=value`. The value is JSON when it
/// parses as JSON and a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidConfig(m));
    let Some((key, raw)) = assignment.split_once('=') else {
        return bad(format!("override `{assignment}` is not of the form key=value"));
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return bad(format!("override key `{key}` has an empty segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let Value::Object(map) = node else {
            return bad(format!("{}: not a section, cannot set `{key}`", parts[..i].join(".")));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}
