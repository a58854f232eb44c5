//! CSV tables with JSON mirrors.

use std::fs;
use std::path::{Path, PathBuf};

use olab_core::{Error, Result};
use serde::Serialize;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `{stem}.csv` (with `header`, even when `rows` is empty) and
/// `{stem}.json`. Returns both paths.
pub fn write_table<R: Serialize>(dir: &Path, stem: &str, header: &[&str], rows: &[R]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&csv_path)
        .map_err(|e| csv_err(&csv_path, e))?;
    w.write_record(header).map_err(|e| csv_err(&csv_path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    write_json(&json_path, rows)?;
    Ok(vec![csv_path, json_path])
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
