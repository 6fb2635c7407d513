//! Buffered command outputs, committed only after a command succeeds.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use dbe_core::config::KeyValues;

pub const MANIFEST: &str = "manifest.txt";

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Files produced by one command plus its manifest.
pub struct Run {
    command: &'static str,
    started: u64,
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
    manifest: KeyValues,
}

impl Run {
    pub fn new(command: &'static str, dir: &Path) -> Self {
        Self {
            command,
            started: unix_now(),
            dir: dir.to_path_buf(),
            files: Vec::new(),
            manifest: KeyValues::new(),
        }
    }

    pub fn config(&mut self, kv: &KeyValues) {
        for (k, v) in kv.iter() {
            self.manifest.set(format!("config.{k}"), v);
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.manifest.set(format!("input.{name}"), path.display());
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.manifest.set(key, value.to_string());
    }

    pub fn file(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    /// Writes every file, then the manifest. Each file goes through a
    /// temporary name in the output directory and is renamed into place.
    pub fn commit(mut self) -> Result<()> {
        fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating output directory {}", self.dir.display()))?;
        for (name, _) in &self.files {
            self.manifest
                .set(format!("output.{name}"), self.dir.join(name).display());
        }
        self.manifest.set("command", self.command);
        self.manifest.set("tool_version", env!("CARGO_PKG_VERSION"));
        self.manifest.set("started_unix", self.started);
        self.manifest.set("finished_unix", unix_now());
        let manifest = self.manifest.to_text().into_bytes();
        self.files.push((MANIFEST.to_string(), manifest));
        let staged: Vec<(PathBuf, PathBuf)> = self
            .files
            .iter()
            .map(|(name, bytes)| {
                let tmp = self.dir.join(format!(".{name}.partial"));
                fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
                Ok((tmp, self.dir.join(name)))
            })
            .collect::<Result<_>>()?;
        for (tmp, dst) in staged {
            fs::rename(&tmp, &dst).with_context(|| format!("moving output into {}", dst.display()))?;
        }
        Ok(())
    }
}
