use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Tracks files and directories a command creates and deletes them again
/// unless [`Outputs::commit`] is reached.
#[derive(Debug, Default)]
pub struct Outputs {
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `path` for cleanup if it does not exist yet, and returns it.
    pub fn file(&mut self, path: impl AsRef<Path>) -> PathBuf {
        let path = path.as_ref().to_path_buf();
        if !path.exists() && !self.created.contains(&path) {
            self.created.push(path.clone());
        }
        path
    }

    /// Creates `dir` and any missing parents, registering the topmost
    /// directory that did not exist.
    pub fn dir(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref().to_path_buf();
        let mut first_missing = None;
        for a in dir.ancestors() {
            if a.as_os_str().is_empty() || a.exists() {
                break;
            }
            first_missing = Some(a.to_path_buf());
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        if let Some(top) = first_missing {
            self.created.push(top);
        }
        Ok(dir)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for path in self.created.iter().rev() {
            let removed = if path.is_dir() {
                fs::remove_dir_all(path)
            } else if path.exists() {
                fs::remove_file(path)
            } else {
                Ok(())
            };
            match removed {
                Ok(()) => log::debug!("removed partial output {}", path.display()),
                Err(e) => log::warn!("could not remove partial output {}: {e}", path.display()),
            }
        }
    }
}
