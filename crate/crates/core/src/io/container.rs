//! The `AFQT` tensor container.
//!
//! Layout: magic `AFQT`, `u32` format version, `u64` header length, a JSON
//! manifest of that many bytes, then the payload. All integers and buffers
//! are little-endian and row-major. Manifest offsets are relative to the
//! start of the payload.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"AFQT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
    U16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::U16(_) => DType::U16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> TensorData {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(bytes.to_vec()),
            DType::U16 => TensorData::U16(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
                    .collect(),
            ),
        }
    }
}

/// A named buffer as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("shape {shape:?} does not hold {} elements", data.len())));
        }
        Ok(StoredTensor { shape, data })
    }

    /// `f32` for single-precision tensors, `f64` otherwise.
    pub fn from_tensor(t: &Tensor) -> Self {
        let data = match t.precision() {
            Precision::Single => TensorData::F32(t.data().iter().map(|&v| v as f32).collect()),
            Precision::Double => TensorData::F64(t.data().to_vec()),
        };
        StoredTensor {
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Integer buffers come back as double-precision values.
    pub fn to_tensor(&self) -> Tensor {
        let (data, p) = match &self.data {
            TensorData::F32(v) => (v.iter().map(|&x| x as f64).collect(), Precision::Single),
            TensorData::F64(v) => (v.clone(), Precision::Double),
            TensorData::U8(v) => (v.iter().map(|&x| x as f64).collect(), Precision::Double),
            TensorData::U16(v) => (v.iter().map(|&x| x as f64).collect(), Precision::Double),
        };
        Tensor::from_parts(self.shape.clone(), data, p)
    }

    pub fn json<T: Serialize>(value: &T) -> Result<Self> {
        let bytes = serde_json::to_vec(value)?;
        Ok(StoredTensor {
            shape: vec![bytes.len()],
            data: TensorData::U8(bytes),
        })
    }

    pub fn parse_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        match &self.data {
            TensorData::U8(b) => Ok(serde_json::from_slice(b)?),
            _ => Err(Error::Header(format!("`{name}` is not a u8 buffer"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

/// Named tensors in file order.
pub type Entries = Vec<(String, StoredTensor)>;

pub fn encode_container(tensors: &[(String, StoredTensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateName(name.clone()));
        }
        let start = payload.len();
        t.data.write_le(&mut payload);
        manifest.push(ManifestEntry {
            name: name.clone(),
            dtype: t.data.dtype(),
            shape: t.shape.clone(),
            byte_offset: start as u64,
            byte_len: (payload.len() - start) as u64,
        });
    }
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Entries> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Truncated(format!("{} bytes, shorter than the magic", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated("preamble is incomplete".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::Truncated(format!("header of {header_len} bytes runs past the end of the file")))?
        as usize;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| Error::Header(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut seen = HashSet::new();
    let mut prev_end = 0u64;
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest {
        if !seen.insert(e.name.clone()) {
            return Err(Error::DuplicateName(e.name));
        }
        let elems = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| Error::Header(format!("`{}`: shape overflows", e.name)))?;
        if (elems as u64).checked_mul(e.dtype.size() as u64) != Some(e.byte_len) {
            return Err(Error::Header(format!(
                "`{}`: {} bytes do not match shape {:?} of {:?}",
                e.name, e.byte_len, e.shape, e.dtype
            )));
        }
        if e.byte_offset < prev_end {
            return Err(Error::OverlappingOffsets(e.name));
        }
        let end = e
            .byte_offset
            .checked_add(e.byte_len)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| {
                Error::Truncated(format!("`{}` needs payload bytes up to {}, have {}", e.name, e.byte_offset + e.byte_len, payload.len()))
            })?;
        prev_end = end;
        let data = TensorData::read_le(e.dtype, &payload[e.byte_offset as usize..end as usize]);
        out.push((e.name, StoredTensor { shape: e.shape, data }));
    }
    Ok(out)
}

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never sees a half-written container.
pub fn save_container(path: impl AsRef<Path>, tensors: &[(String, StoredTensor)]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(tensors)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Entries> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

/// Floating tensors keyed by name; integer buffers are converted.
pub fn tensors_by_name(entries: &Entries) -> std::collections::BTreeMap<String, Tensor> {
    entries.iter().map(|(n, t)| (n.clone(), t.to_tensor())).collect()
}
