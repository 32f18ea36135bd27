use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Files produced by one command. Nothing touches the disk until
/// [`Outputs::commit`], and each file lands via temp file plus rename, so a
/// failed command leaves no partial output behind.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((path.into(), bytes));
    }

    pub fn add_with<F>(&mut self, path: impl Into<PathBuf>, write: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> cpc_harness::Result<()>,
    {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.add(path, buf);
        Ok(())
    }

    pub fn add_json<T: Serialize>(&mut self, path: impl Into<PathBuf>, value: &T) -> Result<()> {
        let mut buf = serde_json::to_vec_pretty(value)?;
        buf.push(b'\n');
        self.add(path, buf);
        Ok(())
    }

    pub fn commit(self) -> Result<()> {
        for (path, bytes) in self.files {
            write_atomic(&path, &bytes)?;
            log::info!("wrote {}", path.display());
        }
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)
        .with_context(|| format!("temp file in {}", parent.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
