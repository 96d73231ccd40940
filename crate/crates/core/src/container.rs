//! LOTE v1 tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [0..8)    magic "LOTEv1\0\0"
//! [8..16)   u64 manifest byte length L
//! [16..16+L) UTF-8 JSON manifest, keys sorted, right-padded with spaces so
//!            the data section starts on a 64-byte boundary
//! [16+L..)  data section; every tensor is stored row-major at its
//!            64-byte-aligned `byte_offset` (relative to the section start)
//! ```
//!
//! Entries can be materialized one at a time; opening a container only reads
//! the header and manifest.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"LOTEv1\0\0";
pub const FORMAT_VERSION: u64 = 1;
pub const ALIGNMENT: u64 = 64;
const HEADER_LEN: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I64 => "i64",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> Option<u64> {
        self.shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub format_version: u64,
    pub entries: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, String>,
}

impl ContainerManifest {
    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn from_le(dtype: DType, bytes: &[u8]) -> Self {
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
            DType::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

/// A shaped, typed array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                name: String::new(),
                detail: format!(
                    "shape {:?} needs {} elements, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(values))
    }

    pub fn i64(shape: Vec<usize>, values: Vec<i64>) -> Result<Self> {
        Self::new(shape, TensorData::I64(values))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Values widened to f64. Integer tensors are converted with `as`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

fn round_up(x: u64, to: u64) -> u64 {
    x.div_ceil(to) * to
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.is_ascii() {
        return Err(Error::InvalidName(name.to_string()));
    }
    Ok(())
}

fn manifest_bytes(manifest: &ContainerManifest) -> Result<Vec<u8>> {
    // Going through `Value` gives lexicographically ordered object keys.
    let value =
        serde_json::to_value(manifest).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    let mut bytes =
        serde_json::to_vec(&value).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    let padded = round_up(HEADER_LEN + bytes.len() as u64, ALIGNMENT) - HEADER_LEN;
    bytes.resize(padded as usize, b' ');
    Ok(bytes)
}

/// Lays out `tensors` and serializes a complete container into memory.
pub fn encode_container(
    metadata: &BTreeMap<String, String>,
    tensors: &[(&str, &Tensor)],
) -> Result<(ContainerManifest, Vec<u8>)> {
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut cursor = 0u64;
    for (name, tensor) in tensors {
        validate_name(name)?;
        if !seen.insert(*name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        let numel: usize = tensor.shape.iter().product();
        if numel != tensor.data.len() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                detail: format!(
                    "shape {:?} needs {} elements, got {}",
                    tensor.shape,
                    numel,
                    tensor.data.len()
                ),
            });
        }
        let byte_offset = round_up(cursor, ALIGNMENT);
        let byte_length = numel as u64 * tensor.dtype().size();
        entries.push(TensorEntry {
            name: name.to_string(),
            dtype: tensor.dtype(),
            shape: tensor.shape.iter().map(|&d| d as u64).collect(),
            byte_offset,
            byte_length,
        });
        cursor = byte_offset + byte_length;
    }
    let manifest = ContainerManifest {
        format_version: FORMAT_VERSION,
        entries,
        metadata: metadata.clone(),
    };
    let header = manifest_bytes(&manifest)?;

    let mut out = Vec::with_capacity(HEADER_LEN as usize + header.len() + cursor as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let data_start = out.len();
    for (entry, (_, tensor)) in manifest.entries.iter().zip(tensors) {
        out.resize(data_start + entry.byte_offset as usize, 0);
        tensor.data.write_le(&mut out);
    }
    Ok((manifest, out))
}

/// Writes a LOTE v1 file. Returns the manifest that was written.
pub fn write_container(
    path: impl AsRef<Path>,
    metadata: &BTreeMap<String, String>,
    tensors: &[(&str, &Tensor)],
) -> Result<ContainerManifest> {
    let path = path.as_ref();
    let (manifest, bytes) = encode_container(metadata, tensors)?;
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// Open read handle. Entries are fetched with positional reads, so a shared
/// reference can be used from several threads at once.
#[derive(Debug)]
pub struct ContainerReader {
    path: PathBuf,
    file: File,
    manifest: ContainerManifest,
    data_start: u64,
}

/// Opens `path` and validates its header and manifest.
pub fn read_container(path: impl AsRef<Path>) -> Result<ContainerReader> {
    ContainerReader::open(path)
}

impl ContainerReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();

        let mut header = [0u8; HEADER_LEN as usize];
        if file_len < 8 {
            return Err(Error::Truncated(format!(
                "{} bytes, header needs 16",
                file_len
            )));
        }
        file.read_exact(&mut header[..8])
            .map_err(|e| Error::io(&path, e))?;
        let magic: [u8; 8] = header[..8].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        if file_len < HEADER_LEN {
            return Err(Error::Truncated(format!(
                "{} bytes, header needs 16",
                file_len
            )));
        }
        file.read_exact(&mut header[8..])
            .map_err(|e| Error::io(&path, e))?;
        let manifest_len = u64::from_le_bytes(header[8..].try_into().unwrap());
        if manifest_len > file_len - HEADER_LEN {
            return Err(Error::Truncated(format!(
                "manifest declares {} bytes, only {} present",
                manifest_len,
                file_len - HEADER_LEN
            )));
        }
        let mut raw = vec![0u8; manifest_len as usize];
        file.read_exact(&mut raw).map_err(|e| Error::io(&path, e))?;
        let manifest = parse_manifest(&raw)?;
        let data_start = HEADER_LEN + manifest_len;
        validate_entries(&manifest, file_len - data_start)?;
        Ok(Self {
            path,
            file,
            manifest,
            data_start,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &ContainerManifest {
        &self.manifest
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.manifest.metadata
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.manifest
            .entry(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.manifest.entry(name).is_some()
    }

    /// Raw little-endian bytes of one entry; touches no other entry's bytes.
    pub fn read_raw(&self, name: &str) -> Result<Vec<u8>> {
        let entry = self.entry(name)?;
        let mut buf = vec![0u8; entry.byte_length as usize];
        read_at(&self.file, &mut buf, self.data_start + entry.byte_offset)
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(buf)
    }

    pub fn read(&self, name: &str) -> Result<Tensor> {
        let entry = self.entry(name)?;
        let bytes = self.read_raw(name)?;
        Ok(Tensor {
            shape: entry.shape.iter().map(|&d| d as usize).collect(),
            data: TensorData::from_le(entry.dtype, &bytes),
        })
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        let n = file.seek_read(buf, offset)?;
        if n == 0 {
            return Err(std::io::ErrorKind::UnexpectedEof.into());
        }
        buf = &mut buf[n..];
        offset += n as u64;
    }
    Ok(())
}

fn parse_manifest(raw: &[u8]) -> Result<ContainerManifest> {
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::UnsupportedVersion(v)),
        None => {
            return Err(Error::MalformedManifest(
                "missing integer field 'format_version'".into(),
            ))
        }
    }
    serde_json::from_value(value).map_err(|e| Error::MalformedManifest(e.to_string()))
}

fn validate_entries(manifest: &ContainerManifest, available: u64) -> Result<()> {
    let mut seen = HashSet::new();
    for entry in &manifest.entries {
        validate_name(&entry.name)?;
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::DuplicateName(entry.name.clone()));
        }
        let expected = entry
            .numel()
            .and_then(|n| n.checked_mul(entry.dtype.size()))
            .ok_or_else(|| Error::MalformedManifest(format!("'{}' size overflows", entry.name)))?;
        if expected != entry.byte_length {
            return Err(Error::MalformedManifest(format!(
                "'{}' declares {} bytes, shape {:?} of {} needs {}",
                entry.name,
                entry.byte_length,
                entry.shape,
                entry.dtype.name(),
                expected
            )));
        }
        if entry.byte_offset % ALIGNMENT != 0 {
            return Err(Error::MalformedManifest(format!(
                "'{}' offset {} is not {}-byte aligned",
                entry.name, entry.byte_offset, ALIGNMENT
            )));
        }
        let end = entry
            .byte_offset
            .checked_add(entry.byte_length)
            .ok_or_else(|| {
                Error::MalformedManifest(format!("'{}' extent overflows", entry.name))
            })?;
        if end > available {
            return Err(Error::EntryOutOfBounds {
                name: entry.name.clone(),
                end,
                available,
            });
        }
    }
    let mut spans: Vec<&TensorEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.byte_length > 0)
        .collect();
    spans.sort_by_key(|e| e.byte_offset);
    for pair in spans.windows(2) {
        if pair[0].byte_offset + pair[0].byte_length > pair[1].byte_offset {
            return Err(Error::OverlappingEntries {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    Ok(())
}
