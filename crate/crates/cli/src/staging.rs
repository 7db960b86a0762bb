use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// A scratch directory beside the final output directory. It is renamed
/// over the destination by [`Staging::commit`] and deleted if dropped
/// uncommitted, so failed runs leave nothing behind.
pub struct Staging {
    dir: PathBuf,
    dest: PathBuf,
    committed: Cell<bool>,
}

fn sibling(dest: &Path, tag: &str) -> PathBuf {
    let name = dest
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    dest.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

impl Staging {
    pub fn new(dest: &Path) -> Result<Self> {
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let dir = sibling(dest, "partial");
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            dest: dest.to_path_buf(),
            committed: Cell::new(false),
        })
    }

    /// Path of `rel` inside the staging directory; parent directories are
    /// created on demand.
    pub fn path(&self, rel: &str) -> PathBuf {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            let _ = fs::create_dir_all(parent);
        }
        p
    }

    pub fn root(&self) -> &Path {
        &self.dir
    }

    /// Every staged file, relative and sorted.
    pub fn files(&self) -> Result<Vec<String>> {
        fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
            for e in fs::read_dir(dir)? {
                let p = e?.path();
                if p.is_dir() {
                    walk(root, &p, out)?;
                } else {
                    let rel = p.strip_prefix(root).expect("under root");
                    out.push(rel.to_string_lossy().replace('\\', "/"));
                }
            }
            Ok(())
        }
        let mut out = Vec::new();
        walk(&self.dir, &self.dir, &mut out)?;
        out.sort();
        Ok(out)
    }

    pub fn commit(&self) -> Result<()> {
        let old = sibling(&self.dest, "old");
        let had_old = self.dest.exists();
        if had_old {
            fs::rename(&self.dest, &old)
                .with_context(|| format!("moving aside {}", self.dest.display()))?;
        }
        fs::rename(&self.dir, &self.dest)
            .with_context(|| format!("renaming output into {}", self.dest.display()))?;
        self.committed.set(true);
        if had_old {
            if old.is_dir() {
                fs::remove_dir_all(&old)?;
            } else {
                fs::remove_file(&old)?;
            }
        }
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed.get() {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}
