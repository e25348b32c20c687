//! Manifests, the tensor container, checkpoints, images and synthetic data.

pub mod checkpoint;
pub mod dataset;
pub mod image;
pub mod manifest;
pub mod synthetic;
pub mod tensorfile;

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes through a temporary file in the target directory, then renames,
/// so a failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
