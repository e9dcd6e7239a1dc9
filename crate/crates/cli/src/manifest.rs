//! `run_manifest.txt`: metadata as `#` comments followed by the fully
//! resolved configuration, so the file itself is a valid `--config`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";

pub struct RunManifest {
    pub command: String,
    pub config_text: String,
    pub started: u64,
    pub finished: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(command: &str, config_text: String) -> Self {
        RunManifest {
            command: command.to_string(),
            config_text,
            started: now(),
            finished: None,
            outputs: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("# command: {}\n", self.command);
        s.push_str(&format!("# version: {} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("# started_unix: {}\n", self.started));
        match self.finished {
            Some(t) => s.push_str(&format!("# finished_unix: {t}\n")),
            None => s.push_str("# finished_unix: running\n"),
        }
        for p in &self.outputs {
            s.push_str(&format!("# output: {}\n", p.display()));
        }
        s.push_str(&self.config_text);
        s
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::write(dir.join(RUN_MANIFEST_FILE), self.render())
    }

    pub fn finish(&mut self, dir: &Path, outputs: Vec<PathBuf>) -> std::io::Result<()> {
        self.finished = Some(now());
        self.outputs = outputs;
        self.write(dir)
    }
}
