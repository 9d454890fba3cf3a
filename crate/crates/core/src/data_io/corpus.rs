use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::error::{Error, Result};

const EXTENSIONS: &[&str] = &["png", "ppm", "pnm", "pgm"];

/// All image files under `dir`, recursively, sorted lexicographically by path.
pub fn scan_corpus(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let matches = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if matches {
            out.push(entry.into_path());
        }
    }
    out.sort();
    Ok(out)
}
