//! Call-flow trace files, one JSON object per delivered message.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use isac_core::callflow::TraceEntry;

pub fn write_trace<W: Write>(entries: &[TraceEntry], out: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_trace_file(entries: &[TraceEntry], path: &Path) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_trace(entries, file).with_context(|| format!("writing {}", path.display()))
}

pub fn read_trace_file(path: &Path) -> anyhow::Result<Vec<TraceEntry>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line?;
            serde_json::from_str(&line).with_context(|| format!("{}, line {}", path.display(), i + 1))
        })
        .collect()
}
