//! Pipeline configuration: a JSON document layered over complete defaults,
//! with `section.field=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::config_hash;
use crate::corpus::{Split, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::training::{ModelConfig, TrainConfig};

/// File locations. Relative paths resolve against the working directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    /// Corpus read by select, generate, evaluate and sweep.
    pub eval: Option<PathBuf>,
    /// Word vectors for the embedding metrics; those metrics are absent
    /// when unset.
    pub embeddings: Option<PathBuf>,
    /// Parent of the per-configuration run directories.
    pub runs_root: PathBuf,
    /// Explicit run directory, bypassing the hash-named default.
    pub run_dir: Option<PathBuf>,
    /// Checkpoint to evaluate. Defaults to the best (else latest) one in
    /// the run directory.
    pub checkpoint: Option<PathBuf>,
    /// Pseudo-label cache directory; defaults to `<run dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Report file written by evaluate; defaults to `<run dir>/report.json`.
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Select,
    Truncate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: Split,
    pub mode: EvalMode,
    /// Overrides `train.t_max` at evaluation time.
    pub t_max: Option<usize>,
    /// Total token budget in truncate mode.
    pub trunc_budget: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            mode: EvalMode::Select,
            t_max: None,
            trunc_budget: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub vocab_max_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig {
                runs_root: PathBuf::from("runs"),
                ..PathsConfig::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            vocab_max_size: 30_000,
        }
    }
}

/// Copies `overlay` onto `base`, refusing keys the defaults do not have.
fn merge(base: &mut Value, overlay: Value, prefix: &str) -> Result<()> {
    let Value::Object(fields) = overlay else {
        *base = overlay;
        return Ok(());
    };
    let Value::Object(base_fields) = base else {
        return Err(Error::Config(format!("`{prefix}` is not a section")));
    };
    for (key, value) in fields {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let slot = base_fields
            .get_mut(&key)
            .ok_or_else(|| Error::Config(format!("unknown field `{path}`")))?;
        if slot.is_object() {
            merge(slot, value, &path)?;
        } else {
            *slot = value;
        }
    }
    Ok(())
}

/// Applies one `a.b.c=value` override. The value is read as JSON when it
/// parses, otherwise as a string.
fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let mut slot = &mut *doc;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| Error::Config(format!("unknown field `{path}`")))?;
    }
    if slot.is_object() {
        return Err(Error::Config(format!("`{path}` is a section, not a field")));
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

impl PipelineConfig {
    /// Defaults, then the file (if any), then the overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let overlay: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if !overlay.is_object() {
                return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
            }
            merge(&mut doc, overlay, "")?;
        }
        for assignment in overrides {
            apply_override(&mut doc, assignment)?;
        }
        let config: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.vocab_max_size < RESERVED_TOKENS.len() {
            return Err(Error::Config(format!(
                "vocab_max_size must be at least {}",
                RESERVED_TOKENS.len()
            )));
        }
        if self.eval.t_max == Some(0) {
            return Err(Error::Config("eval.t_max must be at least 1".into()));
        }
        if self.eval.trunc_budget == 0 {
            return Err(Error::Config("eval.trunc_budget must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(&self.model, &self.train)
    }

    pub fn eval_t_max(&self) -> usize {
        self.eval.t_max.unwrap_or(self.train.t_max)
    }

    /// The explicit run directory, else the newest `<hash>-<time>`
    /// directory under `runs_root`. With `create`, a new one is made when
    /// none exists.
    pub fn run_dir(&self, create: bool) -> Result<Option<PathBuf>> {
        if let Some(dir) = &self.paths.run_dir {
            if create {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            return Ok(Some(dir.clone()));
        }
        let prefix = format!("{}-", &self.hash()[..12]);
        let root = &self.paths.runs_root;
        let mut existing: Vec<PathBuf> = match fs::read_dir(root) {
            Ok(entries) => entries
                .filter_map(|e| e.ok())
                .filter(|e| e.file_name().to_string_lossy().starts_with(&prefix))
                .map(|e| e.path())
                .collect(),
            Err(_) => Vec::new(),
        };
        existing.sort();
        if let Some(dir) = existing.pop() {
            return Ok(Some(dir));
        }
        if !create {
            return Ok(None);
        }
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let dir = root.join(format!("{prefix}{secs:012}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Some(dir))
    }
}
