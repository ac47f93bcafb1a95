//! On-disk SDSF log: a header line `SDSF-LOG <version>` followed by one JSON
//! journal entry per line. Loading replays the entries into a fresh store.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use isac_core::sdsf::{LogEntry, SdsfStore, StoreError};
use thiserror::Error;

pub const MAGIC: &str = "SDSF-LOG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: not an SDSF log (header {found:?})")]
    BadMagic { path: PathBuf, found: String },
    #[error("{path}: unsupported format version {found}, expected {FORMAT_VERSION}")]
    Version { path: PathBuf, found: String },
    #[error("{path}, line {line}: {source}")]
    Entry {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Replay { path: PathBuf, source: StoreError },
}

fn header() -> String {
    format!("{MAGIC} {FORMAT_VERSION}")
}

/// Reads every entry of the log at `path`.
pub fn read_entries(path: &Path) -> Result<Vec<LogEntry>, LogError> {
    let io = |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut lines = BufReader::new(File::open(path).map_err(io)?).lines();
    let first = lines.next().transpose().map_err(io)?.unwrap_or_default();
    let mut parts = first.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(LogError::BadMagic {
            path: path.to_path_buf(),
            found: first,
        });
    }
    let version = parts.next().unwrap_or("").to_string();
    if version != FORMAT_VERSION.to_string() {
        return Err(LogError::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|source| LogError::Entry {
            path: path.to_path_buf(),
            line: i + 2,
            source,
        })?);
    }
    Ok(entries)
}

/// Rebuilds the store kept at `path`, or `None` when no log exists yet.
pub fn load(path: &Path) -> Result<Option<SdsfStore>, LogError> {
    if !path.exists() {
        return Ok(None);
    }
    let entries = read_entries(path)?;
    SdsfStore::replay(entries)
        .map(Some)
        .map_err(|source| LogError::Replay {
            path: path.to_path_buf(),
            source,
        })
}

/// Appends the store's pending journal, creating the log if needed.
pub fn append(path: &Path, store: &mut SdsfStore) -> Result<usize, LogError> {
    let io = |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{}", header()).map_err(io)?;
    }
    let entries = store.take_journal();
    for e in &entries {
        let line = serde_json::to_string(e).expect("log entries serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(entries.len())
}
