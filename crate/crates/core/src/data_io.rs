//! Embedding and label files.
//!
//! Binary layouts (all little-endian):
//!
//! ```text
//! embeddings: "HIRLEMB1" | n: u32 | d: u32 | n*d f32, row-major
//! labels:     "HIRLLAB1" | n: u32 | n i32
//! ```
//!
//! CSV is accepted as a slow path: one sample per line, comma separated,
//! optionally followed by an integer label column.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"HIRLEMB1";
pub const LABEL_MAGIC: &[u8; 8] = b"HIRLLAB1";
/// Upper bound on the number of values the CSV reader will accept.
pub const CSV_MAX_VALUES: usize = 1_000_000;

/// N row vectors of dimension d with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    n: usize,
    d: usize,
    data: Vec<f32>,
    labels: Option<Vec<u32>>,
}

impl EmbeddingSet {
    pub fn new(n: usize, d: usize, data: Vec<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Data(format!("empty embedding set (n={n}, d={d})")));
        }
        if data.len() != n * d {
            return Err(Error::Data(format!(
                "expected {} values for n={n}, d={d}, found {}",
                n * d,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Data(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
        }
        Ok(Self { n, d, data, labels })
    }

    /// Builds a set from a 64-bit matrix, narrowing every value to f32.
    pub fn from_matrix(m: &Array2<f64>, labels: Option<Vec<u32>>) -> Result<Self> {
        let data = m.iter().map(|&v| v as f32).collect();
        Self::new(m.nrows(), m.ncols(), data, labels)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::Data(format!(
                "{} labels for {} samples",
                labels.len(),
                self.n
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Widens the payload to a 64-bit n x d matrix (exact).
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n, self.d), |(i, j)| self.data[i * self.d + j] as f64)
    }

    /// Rows selected by `indices`, labels carried along.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.n {
                return Err(Error::Index(format!(
                    "row {i} out of range for n={}",
                    self.n
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(indices.len(), self.d, data, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv { has_labels: bool },
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.data.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(set.n as u32).to_le_bytes());
    out.extend_from_slice(&(set.d as u32).to_le_bytes());
    for v in &set.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(EMBEDDING_MAGIC)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let payload = r.rest();
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::Data(format!("n={n}, d={d} overflows")))?;
    if payload.len() != expected {
        return Err(Error::Data(format!(
            "header declares n={n}, d={d} ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingSet::new(n, d, data, None)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    atomic_write(path, &encode_embeddings(set))
}

pub fn read_embeddings(path: &Path, format: Format) -> Result<EmbeddingSet> {
    match format {
        Format::Binary => decode_embeddings(&fs::read(path)?),
        Format::Csv { has_labels } => parse_csv(&fs::read_to_string(path)?, has_labels),
    }
}

pub fn encode_labels(labels: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + labels.len() * 4);
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&(l as i32).to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(LABEL_MAGIC)?;
    let n = r.u32()? as usize;
    if n == 0 {
        return Err(Error::Data("label file declares n=0".into()));
    }
    let payload = r.rest();
    if payload.len() != n * 4 {
        return Err(Error::Data(format!(
            "header declares {n} labels but payload holds {} bytes",
            payload.len()
        )));
    }
    payload
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            u32::try_from(v).map_err(|_| Error::Data(format!("negative label {v} at index {i}")))
        })
        .collect()
}

pub fn write_labels(labels: &[u32], path: &Path) -> Result<()> {
    if labels.iter().any(|&l| l > i32::MAX as u32) {
        return Err(Error::Data("label exceeds i32 range".into()));
    }
    atomic_write(path, &encode_labels(labels))
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    decode_labels(&fs::read(path)?)
}

/// Parses the CSV slow path. Rows must all have the same width.
pub fn parse_csv(text: &str, has_labels: bool) -> Result<EmbeddingSet> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let mut n = 0;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let value_count = if has_labels {
            fields
                .len()
                .checked_sub(1)
                .filter(|&c| c > 0)
                .ok_or_else(|| {
                    Error::Format(format!("line {}: expected values and a label", line_no + 1))
                })?
        } else {
            fields.len()
        };
        match width {
            None => width = Some(value_count),
            Some(w) if w != value_count => {
                return Err(Error::Data(format!(
                    "line {}: {value_count} values, expected {w}",
                    line_no + 1
                )))
            }
            _ => {}
        }
        if data.len() + value_count > CSV_MAX_VALUES {
            return Err(Error::Data(format!(
                "CSV input exceeds {CSV_MAX_VALUES} values; use the binary format"
            )));
        }
        for f in &fields[..value_count] {
            let v: f32 = f.parse().map_err(|_| {
                Error::Format(format!("line {}: cannot parse {f:?} as float", line_no + 1))
            })?;
            data.push(v);
        }
        if has_labels {
            let raw = fields[value_count];
            let l: i64 = raw.parse().map_err(|_| {
                Error::Format(format!("line {}: cannot parse label {raw:?}", line_no + 1))
            })?;
            let l = u32::try_from(l)
                .map_err(|_| Error::Data(format!("line {}: invalid label {l}", line_no + 1)))?;
            labels.push(l);
        }
        n += 1;
    }
    let d = width.unwrap_or(0);
    EmbeddingSet::new(n, d, data, has_labels.then_some(labels))
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated input".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}
