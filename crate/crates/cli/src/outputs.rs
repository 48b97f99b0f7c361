//! Output bookkeeping for one subcommand invocation: a directory lock,
//! `.meta.json` sidecars carrying the config hash and toolkit version, and
//! removal of partial outputs when the command fails.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const LOCK_NAME: &str = ".neardup.lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
}

impl Meta {
    pub fn new(command: &str, config_hash: &str) -> Self {
        Self {
            tool: "neardup".into(),
            version: neardup::VERSION.into(),
            command: command.into(),
            config_hash: config_hash.into(),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

pub fn read_meta(path: &Path) -> Option<Meta> {
    let text = std::fs::read_to_string(sidecar_path(path)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Holds the lock on an output directory until committed or dropped.
pub struct Outputs {
    dir: PathBuf,
    lock: PathBuf,
    meta: Meta,
    files: Vec<PathBuf>,
    effective_config: Option<serde_json::Value>,
    committed: bool,
}

impl Outputs {
    /// Creates `dir` if needed and takes its lock.
    pub fn begin(dir: &Path, meta: Meta) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let lock = dir.join(LOCK_NAME);
        let created: std::io::Result<File> = OpenOptions::new().write(true).create_new(true).open(&lock);
        if let Err(e) = created {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                bail!(
                    "{} is locked by another invocation (remove {} if it is stale)",
                    dir.display(),
                    lock.display()
                );
            }
            return Err(e).with_context(|| format!("creating {}", lock.display()));
        }
        std::fs::write(&lock, std::process::id().to_string())?;
        Ok(Self {
            dir: dir.to_path_buf(),
            lock,
            meta,
            files: Vec::new(),
            effective_config: None,
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    /// Path of an output inside the directory; it is removed if the command
    /// fails before [`Outputs::commit`].
    pub fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    /// Registers an output path outside the directory.
    pub fn external(&mut self, path: &Path) -> PathBuf {
        self.files.push(path.to_path_buf());
        path.to_path_buf()
    }

    pub fn set_effective_config<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        self.effective_config = Some(serde_json::to_value(cfg)?);
        Ok(())
    }

    /// True when every expected output exists with a sidecar of this config.
    pub fn up_to_date(&self, names: &[&str]) -> bool {
        !names.is_empty()
            && names.iter().all(|n| {
                let p = self.dir.join(n);
                p.exists() && read_meta(&p).is_some_and(|m| m == self.meta)
            })
    }

    /// Writes sidecars for every registered file and the effective config.
    pub fn commit(mut self) -> Result<()> {
        let meta = serde_json::to_string_pretty(&self.meta)?;
        for f in &self.files {
            if f.exists() {
                std::fs::write(sidecar_path(f), &meta)?;
            }
        }
        if let Some(cfg) = &self.effective_config {
            let doc = serde_json::json!({ "meta": &self.meta, "config": cfg });
            let name = format!("{}.config.json", self.meta.command);
            std::fs::write(self.dir.join(name), serde_json::to_string_pretty(&doc)?)?;
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for f in &self.files {
                let _ = std::fs::remove_file(f);
                let _ = std::fs::remove_file(sidecar_path(f));
            }
        }
        let _ = std::fs::remove_file(&self.lock);
    }
}
