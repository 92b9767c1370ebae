//! Line-delimited JSON helpers shared by the file formats.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::{Error, Result};

/// Serializes an `f64` with 17 significant digits, enough to re-read the
/// exact value.
pub fn f64_17<S: Serializer>(value: &f64, serializer: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::Error as _;
    if !value.is_finite() {
        return Err(S::Error::custom(format!(
            "cannot write non-finite score {value}"
        )));
    }
    let raw = RawValue::from_string(format!("{value:.16e}")).map_err(S::Error::custom)?;
    raw.serialize(serializer)
}

/// Serializes a slice of `f64` with a fixed number of decimals.
pub fn f64_fixed9<S: Serializer>(
    values: &[f64],
    serializer: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::Error as _;
    let mut text = String::with_capacity(values.len() * 14 + 2);
    text.push('[');
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(S::Error::custom(format!(
                "cannot write non-finite value {v}"
            )));
        }
        if i > 0 {
            text.push(',');
        }
        text.push_str(&format!("{v:.9}"));
    }
    text.push(']');
    RawValue::from_string(text)
        .map_err(S::Error::custom)?
        .serialize(serializer)
}

/// Rounds to the precision written by [`f64_fixed9`].
pub fn round9(v: f64) -> f64 {
    format!("{v:.9}").parse().expect("formatted float parses")
}

pub fn write_lines<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line =
            serde_json::to_string(&r).map_err(|e| Error::format("json line", path.display(), e))?;
        w.write_all(line.as_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::format("json line", format!("{}:{}", path.display(), i + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format("json", path.display(), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("json", path.display(), e))
}
