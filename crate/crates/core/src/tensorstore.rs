//! Named-tensor archive (`.osaq`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OSAQTNSR"                8 bytes
//! header_len                u64
//! header                    UTF-8 JSON object, keys sorted, space-padded so the
//!                           payload starts on an 8-byte boundary
//! payload                   raw tensor bytes
//! ```
//!
//! The header maps each tensor name to `{"dtype", "nbytes", "offset", "shape"}`.
//! Offsets are relative to the payload start, 8-byte aligned, and ascend in
//! name order without overlapping.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"OSAQTNSR";
pub const MAX_NAME_BYTES: usize = 256;
const PREAMBLE: usize = 16;
const ALIGN: usize = 8;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate tensor name {0:?}")]
    NameCollision(String),
    #[error("invalid tensor name {0:?} (must be non-empty and at most 256 bytes)")]
    InvalidName(String),
    #[error("tensor {0:?} contains NaN or infinite values")]
    NonFinite(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor {name:?} extends to byte {end} but the payload holds {len} bytes")]
    TruncatedPayload { name: String, end: u64, len: u64 },
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("archive has no tensor named {0:?}")]
    Missing(String),
    #[error("tensor {name:?}: {reason}")]
    WrongKind { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F64,
    I32,
    U8,
}

impl DType {
    pub fn tag(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I32 => "i32",
            DType::U8 => "u8",
        }
    }

    pub fn parse(tag: &str) -> Result<Self, ArchiveError> {
        match tag {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            "i32" => Ok(DType::I32),
            "u8" => Ok(DType::U8),
            other => Err(ArchiveError::UnknownDtype(other.to_string())),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_finite(&self) -> bool {
        match self {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
            _ => true,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(bytes.to_vec()),
        }
    }
}

/// Float storage precision for matrices written to an archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape does not match data length"
        );
        Self { shape, data }
    }

    pub fn from_matrix<T: Real>(m: &Matrix<T>, precision: Precision) -> Self {
        let shape = vec![m.rows(), m.cols()];
        Self::new(shape, float_data(m.as_slice(), precision))
    }

    pub fn from_vector<T: Real>(v: &[T], precision: Precision) -> Self {
        Self::new(vec![v.len()], float_data(v, precision))
    }

    pub fn from_i32(v: Vec<i32>) -> Self {
        Self::new(vec![v.len()], TensorData::I32(v))
    }

    pub fn from_u8(shape: Vec<usize>, v: Vec<u8>) -> Self {
        Self::new(shape, TensorData::U8(v))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Float contents widened or narrowed to `T`.
    pub fn to_vec<T: Real>(&self) -> Option<Vec<T>> {
        match &self.data {
            TensorData::F32(v) => Some(v.iter().map(|&x| T::lit(x as f64)).collect()),
            TensorData::F64(v) => Some(v.iter().map(|&x| T::lit(x)).collect()),
            _ => None,
        }
    }

    /// Interprets a 2-D float tensor as a matrix.
    pub fn to_matrix<T: Real>(&self) -> Option<Matrix<T>> {
        if self.shape.len() != 2 {
            return None;
        }
        Matrix::from_vec(self.shape[0], self.shape[1], self.to_vec()?).ok()
    }
}

fn float_data<T: Real>(v: &[T], precision: Precision) -> TensorData {
    match precision {
        Precision::Single => TensorData::F32(v.iter().map(|x| x.to_f64_lossless() as f32).collect()),
        Precision::Double => TensorData::F64(v.iter().map(|x| x.to_f64_lossless()).collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    nbytes: u64,
    offset: u64,
    shape: Vec<u64>,
}

/// Location and type of one tensor inside an archive payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryInfo {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

/// A parsed archive: validated header entries plus the raw payload.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    entries: BTreeMap<String, EntryInfo>,
    payload: Vec<u8>,
}

impl TensorArchive {
    pub fn entries(&self) -> &BTreeMap<String, EntryInfo> {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<Tensor, ArchiveError> {
        let info = self
            .entries
            .get(name)
            .ok_or_else(|| ArchiveError::Missing(name.to_string()))?;
        let bytes = &self.payload[info.offset..info.offset + info.nbytes];
        Ok(Tensor {
            shape: info.shape.clone(),
            data: TensorData::read_le(info.dtype, bytes),
        })
    }

    pub fn matrix<T: Real>(&self, name: &str) -> Result<Matrix<T>, ArchiveError> {
        self.get(name)?
            .to_matrix()
            .ok_or_else(|| ArchiveError::WrongKind {
                name: name.to_string(),
                reason: "expected a finite 2-D float tensor".into(),
            })
    }

    pub fn vector<T: Real>(&self, name: &str) -> Result<Vec<T>, ArchiveError> {
        self.get(name)?.to_vec().ok_or_else(|| ArchiveError::WrongKind {
            name: name.to_string(),
            reason: "expected a float tensor".into(),
        })
    }

    pub fn i32s(&self, name: &str) -> Result<Vec<i32>, ArchiveError> {
        match self.get(name)?.data {
            TensorData::I32(v) => Ok(v),
            _ => Err(ArchiveError::WrongKind {
                name: name.to_string(),
                reason: "expected an i32 tensor".into(),
            }),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<Vec<u8>, ArchiveError> {
        match self.get(name)?.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(ArchiveError::WrongKind {
                name: name.to_string(),
                reason: "expected a u8 tensor".into(),
            }),
        }
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .keys()
            .map(|k| (k.clone(), self.get(k).expect("validated entry")))
            .collect()
    }
}

fn validate_name(name: &str) -> Result<(), ArchiveError> {
    if name.is_empty() || name.len() > MAX_NAME_BYTES {
        return Err(ArchiveError::InvalidName(name.to_string()));
    }
    Ok(())
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

/// Serializes tensors into archive bytes. Output depends only on the logical content.
pub fn encode<I>(tensors: I) -> Result<Vec<u8>, ArchiveError>
where
    I: IntoIterator<Item = (String, Tensor)>,
{
    let mut sorted = BTreeMap::new();
    for (name, t) in tensors {
        validate_name(&name)?;
        if !t.data.is_finite() {
            return Err(ArchiveError::NonFinite(name));
        }
        if sorted.contains_key(&name) {
            return Err(ArchiveError::NameCollision(name));
        }
        sorted.insert(name, t);
    }

    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in &sorted {
        payload.resize(align_up(payload.len()), 0);
        let offset = payload.len();
        t.data.write_le(&mut payload);
        header.insert(
            name.clone(),
            HeaderEntry {
                dtype: t.dtype().tag().to_string(),
                nbytes: (payload.len() - offset) as u64,
                offset: offset as u64,
                shape: t.shape.iter().map(|&d| d as u64).collect(),
            },
        );
    }

    let mut header_bytes = serde_json::to_vec(&header).expect("header serializes");
    header_bytes.resize(align_up(PREAMBLE + header_bytes.len()) - PREAMBLE, b' ');

    let mut out = Vec::with_capacity(PREAMBLE + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and validates archive bytes.
pub fn decode(bytes: &[u8]) -> Result<TensorArchive, ArchiveError> {
    let malformed = |msg: &str| ArchiveError::MalformedHeader(msg.to_string());
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(malformed("bad magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = (bytes.len() - PREAMBLE) as u64;
    if header_len > available {
        return Err(malformed("header length exceeds file size"));
    }
    let header_end = PREAMBLE + header_len as usize;
    let text = std::str::from_utf8(&bytes[PREAMBLE..header_end])
        .map_err(|_| malformed("header is not UTF-8"))?;
    let raw: BTreeMap<String, HeaderEntry> =
        serde_json::from_str(text).map_err(|e| ArchiveError::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut entries = BTreeMap::new();
    let mut cursor = 0u64;
    for (name, e) in raw {
        validate_name(&name).map_err(|_| malformed("invalid tensor name"))?;
        let dtype = DType::parse(&e.dtype)?;
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed("shape product overflows"))?;
        let expected = numel
            .checked_mul(dtype.size() as u64)
            .ok_or_else(|| malformed("byte length overflows"))?;
        if expected != e.nbytes {
            return Err(ArchiveError::MalformedHeader(format!(
                "{name}: nbytes {} does not match shape and dtype ({expected})",
                e.nbytes
            )));
        }
        if e.offset % ALIGN as u64 != 0 {
            return Err(ArchiveError::MalformedHeader(format!("{name}: unaligned offset")));
        }
        if e.offset < cursor {
            return Err(ArchiveError::MalformedHeader(format!(
                "{name}: offset overlaps or is out of order"
            )));
        }
        let end = e
            .offset
            .checked_add(e.nbytes)
            .ok_or_else(|| malformed("offset overflows"))?;
        if end > payload.len() as u64 {
            return Err(ArchiveError::TruncatedPayload {
                name,
                end,
                len: payload.len() as u64,
            });
        }
        cursor = end;
        let info = EntryInfo {
            dtype,
            shape: e.shape.iter().map(|&d| d as usize).collect(),
            offset: e.offset as usize,
            nbytes: e.nbytes as usize,
        };
        let data = TensorData::read_le(dtype, &payload[info.offset..end as usize]);
        if !data.is_finite() {
            return Err(ArchiveError::NonFinite(name));
        }
        entries.insert(name, info);
    }
    Ok(TensorArchive {
        entries,
        payload: payload.to_vec(),
    })
}

/// Writes an archive atomically (temporary file in the same directory, then rename).
pub fn archive_write<I>(path: impl AsRef<Path>, tensors: I) -> Result<(), ArchiveError>
where
    I: IntoIterator<Item = (String, Tensor)>,
{
    let bytes = encode(tensors)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn archive_read(path: impl AsRef<Path>) -> Result<TensorArchive, ArchiveError> {
    decode(&fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ArchiveError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::other("destination has no file name"))?;
    let tmp_name = format!(".{}.{}.tmp", file_name.to_string_lossy(), std::process::id());
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => tmp_name.into(),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
