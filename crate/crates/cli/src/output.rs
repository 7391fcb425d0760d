//! Output files appear only once complete: single files are written through
//! a temporary sibling, multi-file outputs are staged in a temporary directory
//! and moved into place on success.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tempfile::{NamedTempFile, TempDir};

fn parent_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = parent_of(path);
    std::fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let mut tmp = NamedTempFile::new_in(&parent).with_context(|| format!("writing {}", path.display()))?;
    tmp.write_all(bytes)
        .with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// A scratch directory next to the final output location; removed on drop.
pub struct Staging {
    dir: TempDir,
}

impl Staging {
    fn in_parent(parent: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let dir = tempfile::Builder::new()
            .prefix(".automlm-staging-")
            .tempdir_in(&parent)
            .with_context(|| format!("creating a staging directory in {}", parent.display()))?;
        Ok(Staging { dir })
    }

    pub fn for_dir(out_dir: &Path) -> Result<Self> {
        Staging::in_parent(parent_of(out_dir))
    }

    pub fn for_file(out: &Path) -> Result<Self> {
        Staging::in_parent(parent_of(out))
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Moves every staged file into `out_dir`, replacing same-named files.
    pub fn commit_dir(self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let entries = std::fs::read_dir(self.path()).context("reading staging directory")?;
        for entry in entries {
            let entry = entry.context("reading staging directory")?;
            let target = out_dir.join(entry.file_name());
            std::fs::rename(entry.path(), &target).with_context(|| format!("moving output to {}", target.display()))?;
        }
        Ok(())
    }

    pub fn commit_file(self, name: &str, out: &Path) -> Result<()> {
        std::fs::rename(self.path().join(name), out).with_context(|| format!("moving output to {}", out.display()))?;
        Ok(())
    }
}
