//! Artifact writing: atomic files, JSON sidecars, and removal of partial
//! outputs when a command fails.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

pub const GIT_DESCRIBE: &str = env!("RMD_GIT_DESCRIBE");

/// Tracks files written by a command; unless [`commit`](Self::commit) is
/// called they are deleted on drop.
#[derive(Debug, Default)]
pub struct Outputs {
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    fn prepare(&mut self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| rmd_core::Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
        self.written.push(path.to_path_buf());
        Ok(())
    }

    pub fn bytes(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        self.prepare(path)?;
        rmd_core::motion::write_atomic(path, bytes)?;
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(path, text.as_bytes())
    }

    pub fn text(&mut self, path: &Path, text: &str) -> Result<()> {
        self.bytes(path, text.as_bytes())
    }

    /// Registers a file written by library code.
    pub fn with<F>(&mut self, path: &Path, write: F) -> Result<()>
    where
        F: FnOnce(&Path) -> rmd_core::Result<()>,
    {
        self.prepare(path)?;
        write(path)?;
        Ok(())
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

/// `<artifact>.json` next to the artifact.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Provenance block echoed into every sidecar.
pub fn provenance(command: &str, cfg: &RunConfig) -> Value {
    json!({
        "command": command,
        "seed": cfg.seed,
        "git_describe": GIT_DESCRIBE,
        "config": cfg,
    })
}

/// Merges `extra` fields into the provenance object.
pub fn sidecar(command: &str, cfg: &RunConfig, extra: Value) -> Value {
    let mut v = provenance(command, cfg);
    if let (Some(obj), Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    v
}
