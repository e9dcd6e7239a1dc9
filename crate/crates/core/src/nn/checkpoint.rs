//! Parameter checkpoints: `weights.hfgt` holds one HFGT record per entry,
//! back to back; `manifest.txt` lists `name<TAB>dims<TAB>byte offset`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::params::ParamStore;
use crate::tensor::io::{HfgtError, HfgtTensor};

pub const WEIGHTS_FILE: &str = "weights.hfgt";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] HfgtError),
    #[error("{path}:{line}: malformed manifest line")]
    Manifest { path: PathBuf, line: usize },
    #[error("parameter {name}: checkpoint has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} is missing from the checkpoint")]
    Missing(String),
    #[error("checkpoint entry {0} does not exist in the model")]
    Unexpected(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

/// Names that were absent on either side when loading a subset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn dims_string(dims: &[usize]) -> String {
    if dims.is_empty() {
        return "scalar".into();
    }
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Self {
        Checkpoint {
            entries: store
                .entries()
                .filter(|(_, e)| e.name.starts_with(prefix))
                .map(|(_, e)| CheckpointEntry {
                    name: e.name.clone(),
                    dims: e.value.shape().to_vec(),
                    data: e.value.to_vec(),
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut payload = Vec::new();
        let mut manifest = String::new();
        for e in &self.entries {
            let _ = writeln!(manifest, "{}\t{}\t{}", e.name, dims_string(&e.dims), payload.len());
            HfgtTensor::f64(&e.dims, e.data.clone())
                .write_to(&mut payload)
                .expect("writing to a Vec cannot fail");
        }
        let wpath = dir.join(WEIGHTS_FILE);
        fs::write(&wpath, payload).map_err(io_err(&wpath))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let mpath = dir.join(MANIFEST_FILE);
        let manifest = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let wpath = dir.join(WEIGHTS_FILE);
        let payload = fs::read(&wpath).map_err(io_err(&wpath))?;
        let mut entries = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || CheckpointError::Manifest {
                path: mpath.clone(),
                line: i + 1,
            };
            let mut cols = line.split('\t');
            let (Some(name), Some(_dims), Some(offset), None) = (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad());
            };
            let offset: usize = offset.parse().map_err(|_| bad())?;
            let record = payload.get(offset..).ok_or_else(bad)?;
            let (t, _) = HfgtTensor::decode(record)?;
            let (dims, data) = t.into_f64()?;
            entries.push(CheckpointEntry {
                name: name.to_string(),
                dims,
                data,
            });
        }
        Ok(Checkpoint { entries })
    }

    /// Copies every entry whose name starts with `prefix` into `store`.
    /// With `strict`, any missing or extra name is an error.
    pub fn apply(&self, store: &mut ParamStore, prefix: &str, strict: bool) -> Result<LoadReport, CheckpointError> {
        let mut report = LoadReport::default();
        let wanted: Vec<(crate::tensor::ParamId, String, Vec<usize>)> = store
            .entries()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec()))
            .collect();
        for (id, name, shape) in &wanted {
            match self.get(name) {
                Some(e) if &e.dims == shape => {
                    store.set_data(*id, e.data.clone());
                    report.loaded += 1;
                }
                Some(e) => {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: e.dims.clone(),
                    })
                }
                None => report.missing.push(name.clone()),
            }
        }
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            if store.id(&e.name).is_none() {
                report.extra.push(e.name.clone());
            }
        }
        if strict {
            if let Some(m) = report.missing.first() {
                return Err(CheckpointError::Missing(m.clone()));
            }
            if let Some(x) = report.extra.first() {
                return Err(CheckpointError::Unexpected(x.clone()));
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamKind;

    #[test]
    fn save_load_apply() {
        let mut s = ParamStore::new();
        s.register("a.w", "a", ParamKind::Weight, &[2, 2], vec![1.0, -2.0, 3.5, 0.25]);
        s.register("a.rm", "a", ParamKind::Buffer, &[2], vec![0.5, 0.75]);
        s.register("b.w", "b", ParamKind::Weight, &[1], vec![9.0]);
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::from_store(&s, "").save(dir.path()).unwrap();
        let ck = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(ck, Checkpoint::from_store(&s, ""));

        let mut t = ParamStore::new();
        t.register("a.w", "a", ParamKind::Weight, &[2, 2], vec![0.0; 4]);
        t.register("a.rm", "a", ParamKind::Buffer, &[2], vec![0.0; 2]);
        let rep = ck.apply(&mut t, "a.", true).unwrap();
        assert_eq!(rep.loaded, 2);
        assert_eq!(t.by_name("a.w").unwrap().data(), &[1.0, -2.0, 3.5, 0.25]);
        assert!(ck.apply(&mut t, "", true).is_err());
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let mut s = ParamStore::new();
        s.register("x", "g", ParamKind::Weight, &[3], vec![0.0; 3]);
        let ck = Checkpoint {
            entries: vec![CheckpointEntry {
                name: "x".into(),
                dims: vec![2],
                data: vec![0.0; 2],
            }],
        };
        let err = ck.apply(&mut s, "", true).unwrap_err();
        assert!(err.to_string().contains("parameter x"));
    }
}
