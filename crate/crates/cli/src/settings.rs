//! Resolving `--config FILE` and `--set key=value` against the config
//! structs a command accepts.

use std::fs;
use std::path::Path;

use hfgd::config::{parse_assignment, parse_lines, ConfigError, KeyValue};
use hfgd::data::SceneSpec;
use hfgd::model::ModelConfig;
use hfgd::train::{PretrainConfig, TrainConfig};

use crate::CliError;

/// Model and training settings together; the two key sets are disjoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        ModelConfig::key_docs()
            .iter()
            .chain(TrainConfig::key_docs())
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if ModelConfig::has_key(key) {
            self.model.set(key, value)
        } else if TrainConfig::has_key(key) {
            self.train.set(key, value)
        } else {
            Err(ConfigError::UnknownKey {
                key: key.to_string(),
                valid: Self::keys().into_iter().map(String::from).collect(),
            })
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        format!("{}{}", self.model.to_text(), self.train.to_text())
    }
}

/// Applies a config file, then the `--set` pairs, then validates.
pub fn resolve<T>(
    base: T,
    file: Option<&Path>,
    sets: &[String],
    set: impl Fn(&mut T, &str, &str) -> Result<(), ConfigError>,
    validate: impl Fn(&T) -> Result<(), ConfigError>,
) -> Result<T, CliError> {
    let mut cfg = base;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let pairs = parse_lines(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for (k, v) in pairs {
            set(&mut cfg, &k, &v).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
    }
    for raw in sets {
        let (k, v) = parse_assignment(raw).ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{raw}`")))?;
        set(&mut cfg, &k, &v).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    validate(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn run_config(file: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
    resolve(RunConfig::default(), file, sets, RunConfig::set, RunConfig::validate)
}

pub fn model_config(file: Option<&Path>, sets: &[String]) -> Result<ModelConfig, CliError> {
    resolve(ModelConfig::default(), file, sets, ModelConfig::set, ModelConfig::validate)
}

pub fn scene_spec(base: SceneSpec, file: Option<&Path>, sets: &[String]) -> Result<SceneSpec, CliError> {
    resolve(base, file, sets, SceneSpec::set, SceneSpec::validate)
}

pub fn pretrain_config(file: Option<&Path>, sets: &[String]) -> Result<PretrainConfig, CliError> {
    resolve(PretrainConfig::default(), file, sets, PretrainConfig::set, PretrainConfig::validate)
}

fn key_table<T: KeyValue>(title: &str) -> String {
    let defaults = T::default().pairs();
    let mut s = format!("{title}:\n");
    for (key, doc) in T::key_docs() {
        let value = defaults.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).unwrap_or("");
        s.push_str(&format!("  {key}={value}\n      {doc}\n"));
    }
    s
}

pub fn model_train_keys_help() -> String {
    format!(
        "{}\n{}",
        key_table::<ModelConfig>("Model keys (default shown)"),
        key_table::<TrainConfig>("Training keys (default shown)")
    )
}

pub fn model_keys_help() -> String {
    key_table::<ModelConfig>("Model keys (default shown)")
}

pub fn spec_keys_help() -> String {
    key_table::<SceneSpec>("Scene keys (default shown)")
}

pub fn pretrain_keys_help() -> String {
    key_table::<PretrainConfig>("Pretraining keys (default shown)")
}
