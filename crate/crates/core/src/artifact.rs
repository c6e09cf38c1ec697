//! Binary section container for fitted artifacts.
//!
//! Layout (little-endian): magic `"EMBS"`, version u32 = 1, section count
//! u32, then one 64-byte table entry per section (32-byte zero-padded UTF-8
//! name, dtype u8 with 0 = f32 and 1 = f64, 7 zero bytes, rows u64, cols
//! u64, payload offset u64 relative to the end of the table), then the
//! payloads back to back in row-major order.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::store::write_bytes;

const MAGIC: &[u8; 4] = b"EMBS";
const VERSION: u32 = 1;
const ENTRY_LEN: usize = 64;
const NAME_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dtype: Dtype,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SectionFile {
    pub sections: Vec<Section>,
}

impl SectionFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_matrix(&mut self, name: &str, dtype: Dtype, m: &Array2<f64>) {
        self.sections.push(Section {
            name: name.to_string(),
            dtype,
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        });
    }

    pub fn push_vector(&mut self, name: &str, dtype: Dtype, v: &[f64]) {
        self.sections.push(Section {
            name: name.to_string(),
            dtype,
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        });
    }

    fn find(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::format("artifact", format!("missing section {name}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let s = self.find(name)?;
        Array2::from_shape_vec((s.rows, s.cols), s.data.clone())
            .map_err(|e| Error::format("artifact", e.to_string()))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        Ok(Array1::from(self.find(name)?.data.clone()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut table = Vec::with_capacity(ENTRY_LEN * self.sections.len());
        let mut blob = Vec::new();
        for s in &self.sections {
            let name = s.name.as_bytes();
            if name.len() > NAME_LEN {
                return Err(Error::InvalidInput(format!("section name {} too long", s.name)));
            }
            if s.rows * s.cols != s.data.len() {
                return Err(Error::InvalidInput(format!("section {} shape mismatch", s.name)));
            }
            let mut padded = [0u8; NAME_LEN];
            padded[..name.len()].copy_from_slice(name);
            table.extend_from_slice(&padded);
            table.push(s.dtype.code());
            table.extend_from_slice(&[0u8; 7]);
            table.extend_from_slice(&(s.rows as u64).to_le_bytes());
            table.extend_from_slice(&(s.cols as u64).to_le_bytes());
            table.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            for &v in &s.data {
                match s.dtype {
                    Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let mut out = Vec::with_capacity(12 + table.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        out.extend_from_slice(&table);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |r: &str| Error::format(origin, r.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad("unsupported version"));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let table_end = 12 + count * ENTRY_LEN;
        if bytes.len() < table_end {
            return Err(bad("truncated section table"));
        }
        let blob = &bytes[table_end..];
        let mut sections = Vec::with_capacity(count);
        let mut expected_end = 0usize;
        for i in 0..count {
            let e = &bytes[12 + i * ENTRY_LEN..12 + (i + 1) * ENTRY_LEN];
            let name_end = e[..NAME_LEN].iter().position(|&b| b == 0).unwrap_or(NAME_LEN);
            let name = std::str::from_utf8(&e[..name_end])
                .map_err(|_| bad("section name not utf-8"))?
                .to_string();
            let dtype = match e[32] {
                0 => Dtype::F32,
                1 => Dtype::F64,
                _ => return Err(bad("unknown dtype")),
            };
            let rows = u64::from_le_bytes(e[40..48].try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(e[48..56].try_into().unwrap()) as usize;
            let offset = u64::from_le_bytes(e[56..64].try_into().unwrap()) as usize;
            let len = rows
                .checked_mul(cols)
                .and_then(|c| c.checked_mul(dtype.width()))
                .ok_or_else(|| bad("section size overflow"))?;
            let end = offset.checked_add(len).ok_or_else(|| bad("section size overflow"))?;
            if end > blob.len() {
                return Err(bad("truncated section payload"));
            }
            let raw = &blob[offset..end];
            let data: Vec<f64> = match dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite value in section {name}")));
            }
            expected_end = expected_end.max(end);
            sections.push(Section {
                name,
                dtype,
                rows,
                cols,
                data,
            });
        }
        if expected_end != blob.len() {
            return Err(bad("trailing bytes after sections"));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<Vec<u8>> {
        let bytes = self.encode()?;
        write_bytes(path, &bytes)?;
        Ok(bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}
