//! Run configuration: a TOML file of dotted keys merged with repeatable
//! `--override key=value` pairs, resolved into the typed settings each
//! command consumes. Every field has a default, so an empty config is
//! valid, and the effective merged config is dumped into the output
//! directory before any command does work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::TextLaw;
use crate::decode::GenParams;
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("override {0:?} is not a key=value pair")]
    BadOverride(String),
    #[error("{0}")]
    Invalid(String),
}

/// Model selection: a named size plus optional layout overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// "micro" or "small".
    pub size: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            size: "micro".into(),
            patch: None,
            stride: None,
            layers: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig, ConfigError> {
        let mut cfg = match self.size.as_str() {
            "micro" => ModelConfig::micro(),
            "small" => ModelConfig::small(),
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown model size {other:?} (expected \"micro\" or \"small\")"
                )))
            }
        };
        if let Some(p) = self.patch {
            cfg.patch = p;
        }
        if let Some(s) = self.stride {
            cfg.stride = s;
        }
        if let Some(l) = self.layers {
            cfg.layers = l;
        }
        cfg.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

/// Dataset paths and generation counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    pub eval: PathBuf,
    pub n_train: usize,
    pub n_eval: usize,
    pub law: TextLaw,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train: "runs/data/train.jsonl".into(),
            eval: "runs/data/eval.jsonl".into(),
            n_train: 2000,
            n_eval: 200,
            law: TextLaw::default(),
        }
    }
}

/// Eval harness settings plus the bounds `--assert` gates on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Cap on eval items (prefix of the dataset); 0 means all.
    pub limit: usize,
    /// Greedy SER ceiling checked under `eval --assert`.
    pub ser_max: f64,
    /// Style consistency floor checked under `eval --assert`.
    pub style_min: f64,
    /// Allowed SER(pruned) - SER(0) checked under `ablate pruning --assert`.
    pub prune_delta_max: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            limit: 0,
            ser_max: 0.05,
            style_min: 0.95,
            prune_delta_max: 0.02,
        }
    }
}

/// Everything the commands read. Top-level `seed` drives data
/// generation, synthesis, and evaluation; training keeps its own
/// `train.seed` because it is checkpointed state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory for checkpoints, logs, and reports.
    pub out: PathBuf,
    /// Checkpoint to evaluate or synthesize from; empty means the
    /// newest `ckpt_*.dstr` under `out`.
    pub ckpt: PathBuf,
    /// Utterance-level eval workers; reports are identical at any count.
    pub threads: usize,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub gen: GenParams,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out: "runs/out".into(),
            ckpt: PathBuf::new(),
            threads: 1,
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainConfig::default(),
            gen: GenParams::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.resolve()?;
        self.gen
            .decode
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.batch_frames == 0 {
            return Err(ConfigError::Invalid("train.batch_frames must be > 0".into()));
        }
        if self.train.clip <= 0.0 {
            return Err(ConfigError::Invalid("train.clip must be > 0".into()));
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.seed,
            gen: self.gen.clone(),
            threads: self.threads,
            limit: self.eval.limit,
        }
    }

    /// The effective config as TOML, exactly what `load` would read back.
    pub fn dump(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `effective.toml` under `out`; call before doing any work.
    pub fn write_effective(&self) -> Result<PathBuf, std::io::Error> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join("effective.toml");
        std::fs::write(&path, self.dump())?;
        Ok(path)
    }
}

fn merge_value(base: &mut toml::Value, add: toml::Value) {
    match (base, add) {
        (toml::Value::Table(b), toml::Value::Table(a)) => {
            for (k, v) in a {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses one `key.path=value` override as a TOML document; bare words
/// on the value side are retried as strings so paths need no quoting.
fn override_table(ov: &str) -> Result<toml::Table, ConfigError> {
    let (key, value) = ov
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(ov.to_string()))?;
    match toml::from_str::<toml::Table>(ov) {
        Ok(t) => Ok(t),
        Err(first) => toml::from_str(&format!("{key} = {value:?}"))
            .map_err(|_| ConfigError::Parse(format!("override {ov:?}: {first}"))),
    }
}

/// Reads the optional config file and folds in overrides, last wins.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut root = toml::Value::Table(toml::Table::new());
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let table: toml::Table = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        merge_value(&mut root, toml::Value::Table(table));
    }
    for ov in overrides {
        merge_value(&mut root, toml::Value::Table(override_table(ov)?));
    }
    let cfg: RunConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
