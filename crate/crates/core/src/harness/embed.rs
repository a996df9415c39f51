//! `ACMEMB1` embedding files and their CSV alternative.
//!
//! Binary layout: magic `ACMEMB1\0`, `u32` n, `u32` d, then n records of
//! `u32` class id followed by d little-endian `f32` values.

use std::path::Path;

use crate::error::{Error, Result};

use super::stream::{stream_from_rows, SplitSpec, TaskStream};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"ACMEMB1\0";
const HEADER_LEN: usize = 16;

/// Decoded rows of an embedding file, values widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl EmbeddingTable {
    pub fn n_classes(&self) -> usize {
        let mut c: Vec<usize> = self.rows.iter().map(|r| r.0).collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingTable> {
    if bytes.len() < EMBEDDING_MAGIC.len() || &bytes[..8] != EMBEDDING_MAGIC {
        let at = bytes
            .iter()
            .zip(EMBEDDING_MAGIC)
            .position(|(a, b)| a != b)
            .unwrap_or(bytes.len());
        return Err(format_err(at, "bad magic, expected ACMEMB1"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let n = read_u32(bytes, 8) as usize;
    let d = read_u32(bytes, 12) as usize;
    if d == 0 {
        return Err(format_err(12, "embedding dim is zero"));
    }
    let record = 4 + 4 * d;
    let expected = n
        .checked_mul(record)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| format_err(8, "record count overflows"))?;
    if bytes.len() < expected {
        let complete = (bytes.len() - HEADER_LEN) / record;
        return Err(format_err(
            HEADER_LEN + complete * record,
            format!("truncated: header declares {n} records, payload holds {complete}"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            expected,
            format!("{} trailing bytes after {n} records", bytes.len() - expected),
        ));
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let at = HEADER_LEN + i * record;
        let class = read_u32(bytes, at) as usize;
        let mut x = Vec::with_capacity(d);
        for k in 0..d {
            let o = at + 4 + 4 * k;
            let v = f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(format_err(o, "non-finite value"));
            }
            x.push(f64::from(v));
        }
        rows.push((class, x));
    }
    Ok(EmbeddingTable { dim: d, rows })
}

/// Values are narrowed to f32.
pub fn encode_embeddings(table: &EmbeddingTable) -> Result<Vec<u8>> {
    let n = u32::try_from(table.rows.len()).map_err(|_| Error::Data("too many rows".into()))?;
    let d = u32::try_from(table.dim).map_err(|_| Error::Data("dim too large".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + table.rows.len() * (4 + 4 * table.dim));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for (c, x) in &table.rows {
        if x.len() != table.dim {
            return Err(Error::shape(format!("row has dim {}, table dim {}", x.len(), table.dim)));
        }
        let c = u32::try_from(*c).map_err(|_| Error::Data(format!("class id {c} exceeds u32")))?;
        out.extend_from_slice(&c.to_le_bytes());
        for v in x {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// `class_id,v0,...,v{d-1}`.
pub fn decode_embeddings_csv(text: &str) -> Result<EmbeddingTable> {
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| format_err(0, "empty file"))?;
    let cols: Vec<&str> = header.trim_end().split(',').map(str::trim).collect();
    if cols.first() != Some(&"class_id") || cols.len() < 2 {
        return Err(format_err(0, "header must be class_id,v0,...,v{d-1}"));
    }
    for (k, c) in cols[1..].iter().enumerate() {
        if *c != format!("v{k}") {
            return Err(format_err(0, format!("header column {} should be v{k}", k + 1)));
        }
    }
    let dim = cols.len() - 1;
    let mut offset = header.len();
    let mut rows = Vec::new();
    for line in lines {
        let start = offset;
        offset += line.len();
        let body = line.trim_end();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(format_err(start, format!("expected {} fields, found {}", dim + 1, fields.len())));
        }
        let class = fields[0]
            .parse::<usize>()
            .map_err(|_| format_err(start, format!("bad class id `{}`", fields[0])))?;
        let x = fields[1..]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(format_err(start, format!("bad value `{f}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((class, x));
    }
    Ok(EmbeddingTable { dim, rows })
}

pub fn encode_embeddings_csv(table: &EmbeddingTable) -> String {
    let mut out = String::from("class_id");
    for k in 0..table.dim {
        out.push_str(&format!(",v{k}"));
    }
    out.push('\n');
    for (c, x) in &table.rows {
        out.push_str(&c.to_string());
        for v in x {
            out.push(',');
            out.push_str(&crate::diagnostics::fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

/// Reads either format; CSV is recognised by its `class_id` header.
pub fn read_embedding_file(path: &Path) -> Result<EmbeddingTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"class_id") {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| format_err(e.valid_up_to(), "CSV is not valid UTF-8"))?;
        decode_embeddings_csv(text)
    } else {
        decode_embeddings(&bytes)
    }
}

/// Writes CSV when the extension is `.csv`, binary otherwise.
pub fn write_embedding_file(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let bytes = if path.extension().is_some_and(|e| e == "csv") {
        encode_embeddings_csv(table).into_bytes()
    } else {
        encode_embeddings(table)?
    };
    crate::diagnostics::write_atomic(path, &bytes)
}

pub fn load_embedding_stream(path: &Path, split: &SplitSpec) -> Result<TaskStream> {
    let table = read_embedding_file(path)?;
    stream_from_rows(table.rows, table.dim, split)
}

/// Flattens a stream back into rows (train, val, eval order per task).
pub fn stream_to_table(stream: &TaskStream) -> EmbeddingTable {
    EmbeddingTable {
        dim: stream.input_dim,
        rows: stream.all_samples().map(|s| (s.y, s.x.clone())).collect(),
    }
}
