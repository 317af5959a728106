//! Output helpers shared by every artifact writer.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// JSON with lexicographically sorted object keys and serde_json's shortest
/// round-trip float formatting, so equal values always serialise to equal
/// bytes.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // `serde_json::Value` objects are BTreeMap-backed, hence sorted.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place. A failure leaves no file at `path`.
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

/// Serialises rows with the `csv` crate into memory, then writes atomically.
pub fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

pub fn csv_bytes<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}
