//! Output-directory plumbing. Artifacts are never overwritten: a name
//! that already exists gets the next numeric suffix, so re-running
//! against the same directory leaves every prior file intact.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

/// First of `stem.ext`, `stem-2.ext`, `stem-3.ext`, … that does not
/// exist yet.
pub fn fresh_path(dir: &Path, stem: &str, ext: &str) -> Result<PathBuf, String> {
    let first = dir.join(format!("{stem}.{ext}"));
    if !first.exists() {
        return Ok(first);
    }
    for k in 2..10_000u32 {
        let candidate = dir.join(format!("{stem}-{k}.{ext}"));
        if !candidate.exists() {
            return Ok(candidate);
        }
    }
    Err(format!(
        "{}: thousands of prior {stem}.{ext} artifacts; clean up the output directory",
        dir.display()
    ))
}

/// Opens the file for writing, failing if it appeared since the name was
/// picked rather than clobbering it.
pub fn create_fresh(path: &Path) -> Result<File, String> {
    OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| format!("cannot create {}: {e}", path.display()))
}

/// Picks a fresh name under `dir` and writes `content` to it.
pub fn write_fresh(dir: &Path, stem: &str, ext: &str, content: &str) -> Result<PathBuf, String> {
    let path = fresh_path(dir, stem, ext)?;
    let mut f = create_fresh(&path)?;
    f.write_all(content.as_bytes())
        .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    Ok(path)
}
