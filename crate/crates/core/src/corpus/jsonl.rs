//! JSONL persistence: streamable, append-only, resumable.
//!
//! Each record is written as a single line in one `write_all` call and flushed
//! immediately, so a crash can truncate at most the final line, and a
//! truncated line never parses as a valid record.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::CorpusError;

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Read every record of a JSONL file.
///
/// A line that is not valid JSON yields [`CorpusError::ParseError`] with its
/// 1-based line number; valid JSON that does not match `T` yields
/// [`CorpusError::SchemaError`]. An empty file is an empty vec.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        records.push(parse_line(path, i + 1, &line)?);
    }
    Ok(records)
}

fn parse_line<T: DeserializeOwned>(path: &Path, line_no: usize, line: &str) -> Result<T, CorpusError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| CorpusError::ParseError {
            path: path.display().to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
    serde_json::from_value(value).map_err(|e| CorpusError::SchemaError {
        path: path.display().to_string(),
        line: line_no,
        message: e.to_string(),
    })
}

/// Like [`read_records`], but tolerate a torn final line: if only the last
/// line fails to parse it is dropped and `true` is returned alongside the
/// records that precede it. A missing file reads as empty.
///
/// Used by resume paths, where an interrupted writer may have left a partial
/// trailing line.
pub fn read_records_tolerant_tail<T: DeserializeOwned>(
    path: &Path,
) -> Result<(Vec<T>, bool), CorpusError> {
    if !path.exists() {
        return Ok((Vec::new(), false));
    }
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let lines: Vec<String> = reader
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| io_err(path, e))?;
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match parse_line(path, i + 1, line) {
            Ok(rec) => records.push(rec),
            Err(err) if i + 1 == lines.len() => {
                tracing::warn!(path = %path.display(), line = i + 1, %err, "dropping partial final line");
                return Ok((records, true));
            }
            Err(err) => return Err(err),
        }
    }
    Ok((records, false))
}

/// Append-only JSONL writer; one flushed line per record.
pub struct JsonlWriter {
    file: File,
    path: std::path::PathBuf,
}

impl JsonlWriter {
    /// Create or truncate the file.
    pub fn create(path: &Path) -> Result<Self, CorpusError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        Ok(JsonlWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Open for appending, creating the file if needed.
    pub fn append(path: &Path) -> Result<Self, CorpusError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(JsonlWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), CorpusError> {
        let mut line = serde_json::to_string(record).map_err(|e| CorpusError::SchemaError {
            path: self.path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| io_err(&self.path, e))
    }
}

/// Write all records to `path` atomically: serialize into a temp file in the
/// same directory, then rename over the target.
pub fn write_records_atomic<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut writer = JsonlWriter::create(&tmp)?;
        for rec in records {
            writer.write(rec)?;
        }
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}
