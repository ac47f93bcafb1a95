//! Sweep CSV: `g,g_det,pd_mean,pd_std,fa_mean,fa_std,n`.
//!
//! Floats use the shortest representation that parses back to the same
//! value. The baseline row has an empty `g`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::sweep::SweepRow;

pub const HEADER: [&str; 7] = ["g", "g_det", "pd_mean", "pd_std", "fa_mean", "fa_std", "n"];

#[derive(Debug, Error)]
pub enum TableError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: unexpected header {found:?}")]
    Header { path: PathBuf, found: Vec<String> },
    #[error("{path}, line {line}: bad value {value:?} in column {column}")]
    Value {
        path: PathBuf,
        line: u64,
        column: &'static str,
        value: String,
    },
}

pub fn write_rows<W: Write>(rows: &[SweepRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record([
            r.g.map(|g| g.to_string()).unwrap_or_default(),
            r.g_det.to_string(),
            r.pd_mean.to_string(),
            r.pd_std.to_string(),
            r.fa_mean.to_string(),
            r.fa_std.to_string(),
            r.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(rows: &[SweepRow], path: &Path) -> Result<(), TableError> {
    let file = File::create(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_rows(rows, file).map_err(|source| TableError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rows<R: Read>(input: R, path: &Path) -> Result<Vec<SweepRow>, TableError> {
    let csv_err = |source| TableError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(HEADER) {
        return Err(TableError::Header {
            path: path.to_path_buf(),
            found: header.iter().map(String::from).collect(),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |i: usize| TableError::Value {
            path: path.to_path_buf(),
            line,
            column: HEADER[i],
            value: rec[i].to_string(),
        };
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(i));
        rows.push(SweepRow {
            g: if rec[0].is_empty() { None } else { Some(f(0)?) },
            g_det: f(1)?,
            pd_mean: f(2)?,
            pd_std: f(3)?,
            fa_mean: f(4)?,
            fa_std: f(5)?,
            n: rec[6].parse().map_err(|_| bad(6))?,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<SweepRow>, TableError> {
    let file = File::open(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_rows(file, path)
}
