use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

/// Output directory that remembers what was written into it.
pub(crate) struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    status: &'a str,
    files: &'a [String],
    config: &'a RunConfig,
}

impl OutputDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_owned(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(rel.to_owned());
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    pub fn finish(mut self, command: &str, status: &str, config: &RunConfig) -> anyhow::Result<()> {
        self.files.sort();
        let manifest = Manifest {
            command,
            status,
            files: &self.files,
            config,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let path = self.root.join(MANIFEST);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}

/// File-name-safe form of a player id.
pub(crate) fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}
