//! A saved model directory: `model.txt` with the configuration plus a
//! parameter checkpoint covering every parameter and buffer.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Hfgd, ModelConfig};
use crate::config::{ConfigError, KeyValue};
use crate::nn::{Checkpoint, CheckpointError, ParamStore};

pub const MODEL_CONFIG_FILE: &str = "model.txt";

#[derive(Debug, thiserror::Error)]
pub enum SavedModelError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Config {
        path: PathBuf,
        #[source]
        source: ConfigError,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub fn save_model(dir: &Path, model: &Hfgd, store: &ParamStore) -> Result<(), SavedModelError> {
    Checkpoint::from_store(store, "").save(dir)?;
    let path = dir.join(MODEL_CONFIG_FILE);
    fs::write(&path, model.cfg.to_text()).map_err(|source| SavedModelError::Io { path, source })
}

pub fn load_model_config(dir: &Path) -> Result<ModelConfig, SavedModelError> {
    let path = dir.join(MODEL_CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|source| SavedModelError::Io {
        path: path.clone(),
        source,
    })?;
    ModelConfig::from_text(&text).map_err(|source| SavedModelError::Config { path, source })
}

/// Rebuilds the network from `model.txt` and loads the weights strictly:
/// any missing, extra or misshapen parameter is an error naming it.
pub fn load_model(dir: &Path) -> Result<(Hfgd, ParamStore), SavedModelError> {
    let cfg = load_model_config(dir)?;
    let (model, mut store) = Hfgd::new(&cfg, 0).map_err(|source| SavedModelError::Config {
        path: dir.join(MODEL_CONFIG_FILE),
        source,
    })?;
    Checkpoint::load(dir)?.apply(&mut store, "", true)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            target_os: 2,
            ..ModelConfig::default()
        };
        let (m, s) = Hfgd::new(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &m, &s).unwrap();
        let (m2, s2) = load_model(dir.path()).unwrap();
        assert_eq!(m2.cfg, cfg);
        for (id, e) in s.entries() {
            assert_eq!(s2.get(id).data(), e.value.data(), "{}", e.name);
        }
    }

    #[test]
    fn config_mismatch_names_the_parameter() {
        let (m, s) = Hfgd::new(&ModelConfig::default(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &m, &s).unwrap();
        let other = ModelConfig {
            hfg_guidance_enabled: false,
            ..ModelConfig::default()
        };
        fs::write(dir.path().join(MODEL_CONFIG_FILE), other.to_text()).unwrap();
        let err = load_model(dir.path()).unwrap_err().to_string();
        assert!(err.contains("usfpn.classifier"), "{err}");
    }
}
