//! File helpers: missing inputs surface as "file not found", outputs are
//! written to a sibling temp file and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use panostitch::ply::{read_ply, write_ply_to, PlyCloud, PlyFormat};
use panostitch::PointCloud;
use tempfile::NamedTempFile;

use crate::error::CliError;

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::FileNotFound(path.to_path_buf()))
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<PlyCloud, CliError> {
    require_file(path)?;
    read_ply(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Resolves `rel` against `base` unless it is already absolute.
pub fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    ensure_dir(dir)?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.flush().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_cloud(path: &Path, cloud: &PointCloud, room_ids: Option<&[i32]>) -> Result<(), CliError> {
    let mut bytes = Vec::new();
    write_ply_to(&mut bytes, cloud, room_ids, PlyFormat::BinaryLittleEndian)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
