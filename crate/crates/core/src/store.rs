//! Embedding sets, the EMBD binary format, manifests, and splits.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBD_VERSION: u32 = 1;
pub const EMBD_HEADER_LEN: usize = 28;
const UNIT_TOL: f64 = 1e-6;
const NORM_FLOOR: f64 = 1e-12;

/// One modality's n×d embeddings. Entries are finite; `normalized` is true
/// exactly when every row has unit norm to within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: Array2<f64>,
    modality: String,
    normalized: bool,
}

impl EmbeddingSet {
    pub fn new(data: Array2<f64>, modality: impl Into<String>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let d = data.ncols().max(1);
            return Err(Error::InvalidInput(format!(
                "non-finite entry at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        let normalized = data.nrows() > 0
            && data
                .rows()
                .into_iter()
                .all(|r| (r.dot(&r).sqrt() - 1.0).abs() <= UNIT_TOL);
        Ok(Self {
            data,
            modality: modality.into(),
            normalized,
        })
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn select(&self, idx: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            data: self.data.select(Axis(0), idx),
            modality: self.modality.clone(),
            normalized: self.normalized,
        }
    }

    pub fn with_modality(mut self, modality: impl Into<String>) -> Self {
        self.modality = modality.into();
        self
    }
}

/// Rescale every row to unit norm.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let data = normalize_rows(&set.data)?;
    Ok(EmbeddingSet {
        data,
        modality: set.modality.clone(),
        normalized: true,
    })
}

pub fn normalize_rows(x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = x.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm >= NORM_FLOOR) {
            return Err(Error::DegenerateRow(i));
        }
        row /= norm;
    }
    Ok(out)
}

pub fn encode_embd(set: &EmbeddingSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(EMBD_HEADER_LEN + 4 * set.n() * set.d());
    buf.extend_from_slice(EMBD_MAGIC);
    buf.extend_from_slice(&EMBD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.n() as u64).to_le_bytes());
    buf.extend_from_slice(&(set.d() as u32).to_le_bytes());
    buf.push(0u8);
    buf.extend_from_slice(&[0u8; 7]);
    for v in set.data.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_embd(bytes: &[u8], origin: &str, modality: &str) -> Result<EmbeddingSet> {
    if bytes.len() < EMBD_HEADER_LEN {
        return Err(Error::format(origin, "truncated header"));
    }
    if &bytes[0..4] != EMBD_MAGIC {
        return Err(Error::format(origin, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBD_VERSION {
        return Err(Error::format(origin, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if bytes[20] != 0 {
        return Err(Error::format(origin, format!("unsupported dtype {}", bytes[20])));
    }
    if bytes[21..28].iter().any(|&b| b != 0) {
        return Err(Error::format(origin, "reserved bytes not zero"));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::format(origin, "shape overflow"))?;
    let payload = &bytes[EMBD_HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(
            origin,
            format!(
                "header says {n}x{d} ({expected} bytes) but payload has {} bytes",
                payload.len()
            ),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let data = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::format(origin, e.to_string()))?;
    EmbeddingSet::new(data, modality)
}

pub fn load(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let modality = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_embd(&bytes, &path.display().to_string(), &modality)
}

/// Write a set in EMBD format; returns the sha256 of the written bytes.
pub fn save(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<String> {
    let bytes = encode_embd(set);
    write_bytes(path.as_ref(), &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetManifest {
    pub path: String,
    pub modality: String,
    pub n: usize,
    pub d: usize,
    pub normalized: bool,
    pub sha256: String,
}

impl SetManifest {
    pub fn describe(set: &EmbeddingSet, path: impl AsRef<Path>, sha256: String) -> Self {
        Self {
            path: path.as_ref().display().to_string(),
            modality: set.modality.clone(),
            n: set.n(),
            d: set.d(),
            normalized: set.normalized,
            sha256,
        }
    }
}

/// Save a set and its JSON manifest next to it (`<path>.json`).
pub fn save_with_manifest(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<SetManifest> {
    let path = path.as_ref();
    let sha = save(set, path)?;
    let manifest = SetManifest::describe(set, path, sha);
    let mpath = path.with_extension("json");
    let text = serde_json::to_string_pretty(&manifest)?;
    write_bytes(&mpath, text.as_bytes())?;
    Ok(manifest)
}

/// Index-aligned pair of sets; row i of `x` and row i of `y` describe the
/// same item.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSet {
    pub x: EmbeddingSet,
    pub y: EmbeddingSet,
}

impl PairedSet {
    pub fn new(x: EmbeddingSet, y: EmbeddingSet) -> Result<Self> {
        if x.n() != y.n() || x.d() != y.d() {
            return Err(Error::PairMismatch(format!(
                "x is {}x{}, y is {}x{}",
                x.n(),
                x.d(),
                y.n(),
                y.d()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.n()
    }

    pub fn d(&self) -> usize {
        self.x.d()
    }

    pub fn select(&self, idx: &[usize]) -> PairedSet {
        PairedSet {
            x: self.x.select(idx),
            y: self.y.select(idx),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub estimation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            estimation_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub estimation: PairedSet,
    pub heldout: PairedSet,
    pub estimation_idx: Vec<usize>,
    pub heldout_idx: Vec<usize>,
    seed: u64,
}

impl Split {
    /// The estimation part with its pairing destroyed: the y side is
    /// reshuffled by an independent stream.
    pub fn unpaired(&self) -> (EmbeddingSet, EmbeddingSet) {
        let mut order: Vec<usize> = (0..self.estimation.n()).collect();
        order.shuffle(&mut rng::stream(rng::derive(self.seed, "unpair"), 0));
        (self.estimation.x.clone(), self.estimation.y.select(&order))
    }
}

pub fn split(pairs: &PairedSet, spec: &SplitSpec) -> Result<Split> {
    let n = pairs.n();
    if n < 2 {
        return Err(Error::insufficient(2, n));
    }
    let f = spec.estimation_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::InvalidSplit(format!("fraction {f} outside (0,1)")));
    }
    let n_est = (f * n as f64).round() as usize;
    if n_est == 0 || n_est >= n {
        return Err(Error::InvalidSplit(format!(
            "fraction {f} on n={n} leaves an empty part"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(spec.seed, 0));
    let estimation_idx = idx[..n_est].to_vec();
    let heldout_idx = idx[n_est..].to_vec();
    Ok(Split {
        estimation: pairs.select(&estimation_idx),
        heldout: pairs.select(&heldout_idx),
        estimation_idx,
        heldout_idx,
        seed: spec.seed,
    })
}
