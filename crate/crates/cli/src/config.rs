//! Run configuration: defaults, a TOML file, then `--set key=value`
//! overrides, deserialized strictly so that misspelled keys fail.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sliceworld::model::{Intervention, ModelConfig};
use sliceworld::objectives::{LossConfig, Stage};
use sliceworld::phantom::{PhantomConfig, SplitCounts};
use sliceworld::trainer::{AblationMode, StageConfig};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset written by `gen-data`. Without it, splits are generated in
    /// memory from `phantom` and the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub phantom: PhantomConfig,
    pub counts: SplitCounts,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            phantom: PhantomConfig::default(),
            counts: SplitCounts::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub split: String,
    /// Evaluate only the first studies of the split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_studies: Option<usize>,
    pub modes: Vec<Intervention>,
    pub budgets: Vec<f64>,
    pub resamples: usize,
    /// Record kind and metric compared by `eval-significance`.
    pub kind: String,
    pub metric: String,
    pub higher_is_better: bool,
    /// Record files (or run directories) of systems A and B.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records_a: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records_b: Option<PathBuf>,
    /// Run directory whose logs `report` re-reads.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: "test".into(),
            max_studies: None,
            modes: Intervention::ALL.to_vec(),
            budgets: vec![1.0, 0.5, 0.25],
            resamples: 10_000,
            kind: "report".into(),
            metric: "bleu1".into(),
            higher_is_better: true,
            records_a: None,
            records_b: None,
            from: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation and both training stages.
    pub seed: u64,
    pub mode: AblationMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    /// Checkpoint directory (or a run directory holding `checkpoint/`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: AblationMode::Full,
            out: None,
            jobs: None,
            checkpoint: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            pretrain: StageConfig::toy_pretrain(),
            finetune: StageConfig::toy_finetune(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file`, then each `key=value` of `sets` in order.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self, ConfigError> {
        let mut root = Value::try_from(RunConfig::default())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.to_path_buf(),
                source,
            })?;
            let table: Table = text
                .parse()
                .map_err(|e: toml::de::Error| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
            merge(&mut root, Value::Table(table));
        }
        for s in sets {
            apply_set(&mut root, s)?;
        }
        let cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        let mut cfg = cfg;
        cfg.pretrain.seed = cfg.seed;
        cfg.finetune.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: sliceworld::Error| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(bad)?;
        self.loss.validate().map_err(bad)?;
        self.pretrain.validate().map_err(bad)?;
        self.finetune.validate().map_err(bad)?;
        self.data.phantom.validate().map_err(bad)?;
        if self.model.horizon != self.loss.horizon {
            return Err(ConfigError::Invalid(format!(
                "model.horizon = {} but loss.horizon = {}",
                self.model.horizon, self.loss.horizon
            )));
        }
        if self.pretrain.stage != Stage::Pretrain || self.finetune.stage != Stage::Finetune {
            return Err(ConfigError::Invalid("stage tags of [pretrain] and [finetune] are swapped".into()));
        }
        if self.jobs == Some(0) {
            return Err(ConfigError::Invalid("jobs must be at least 1".into()));
        }
        if let Some(b) = self.eval.budgets.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(ConfigError::Invalid(format!("slice budget {b} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_set(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("`--set {assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Invalid(format!("malformed key `{key}`")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("`{key}` descends into a non-table")))?;
        node = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| ConfigError::Invalid(format!("`{key}` descends into a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
