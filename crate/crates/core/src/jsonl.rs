//! JSON-lines reading and writing.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Parse { line: usize, field: String, message: String },
}

/// Parses one JSON value per nonblank line, reporting the 1-based line number
/// and the JSON path of the offending field on failure.
pub fn parse_str<T: DeserializeOwned>(input: &str) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, idx + 1)?);
    }
    Ok(out)
}

pub fn parse_line<T: DeserializeOwned>(line: &str, line_no: usize) -> Result<T, JsonlError> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        JsonlError::Parse {
            line: line_no,
            field: if field == "." { "<root>".into() } else { field },
            message: e.into_inner().to_string(),
        }
    })
}

pub fn read_path<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let io_err = |source| JsonlError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, idx + 1)?);
    }
    Ok(out)
}

/// Serializes each item on its own line, each line terminated by `\n`.
pub fn to_string<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        // Serializing plain data structs into a String cannot fail.
        out.push_str(&serde_json::to_string(item).expect("serializable record"));
        out.push('\n');
    }
    out
}

pub fn write_path<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    let io_err = |source| JsonlError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(to_string(items).as_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)
}
