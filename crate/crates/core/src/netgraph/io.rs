//! Line-delimited dataset files.
//!
//! The first line is a header object naming the format, its version and the
//! number of graph records that follow; each later line is one graph.
//!
//! ```text
//! {"format":"flowkan-dataset","version":1,"graphs":2}
//! {"flows":[...],"links":[...],"edges_f2l":[...],"edges_l2f":[...]}
//! {"flows":[...],"links":[...],"edges_f2l":[...],"edges_l2f":[...]}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HeteroGraph;
use crate::error::{FlowKanError, Result};

pub const DATASET_FORMAT: &str = "flowkan-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    graphs: usize,
}

pub fn write_dataset(graphs: &[HeteroGraph], mut w: impl Write) -> std::io::Result<()> {
    let header = Header {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        graphs: graphs.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for g in graphs {
        serde_json::to_writer(&mut w, g)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Parses a whole dataset. Any malformed or missing record fails the read;
/// no partial dataset is returned.
pub fn read_dataset(r: impl Read, source: &str) -> Result<Vec<HeteroGraph>> {
    let mut lines = BufReader::new(r).lines();
    let ctx = |line: usize| format!("{source}:{line}");
    let header_line = lines
        .next()
        .ok_or_else(|| FlowKanError::parse(ctx(1), "missing header"))?
        .map_err(|e| FlowKanError::parse(ctx(1), e.to_string()))?;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| FlowKanError::parse(ctx(1), format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(FlowKanError::parse(ctx(1), format!("unknown format `{}`", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(FlowKanError::parse(ctx(1), format!("unsupported version {}", header.version)));
    }
    let mut graphs = Vec::with_capacity(header.graphs);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| FlowKanError::parse(ctx(lineno), e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let g: HeteroGraph = serde_json::from_str(&line)
            .map_err(|e| FlowKanError::parse(ctx(lineno), format!("record {}: {e}", graphs.len())))?;
        g.validate()
            .map_err(|e| FlowKanError::parse(ctx(lineno), format!("record {}: {e}", graphs.len())))?;
        graphs.push(g);
    }
    if graphs.len() != header.graphs {
        return Err(FlowKanError::parse(
            ctx(graphs.len() + 2),
            format!("header announces {} graphs, found {}", header.graphs, graphs.len()),
        ));
    }
    Ok(graphs)
}

pub fn save_dataset(graphs: &[HeteroGraph], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_dataset(graphs, &mut buf).map_err(|e| FlowKanError::io(path, e))?;
    fs::write(path, buf).map_err(|e| FlowKanError::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<HeteroGraph>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| FlowKanError::io(path, e))?;
    read_dataset(file, &path.display().to_string())
}
