//! File container shared by checkpoints and datasets.
//!
//! Layout: one line of compact UTF-8 JSON (the manifest), a binary blob of
//! little-endian arrays concatenated in registry order, and a 4-byte
//! little-endian CRC32 of every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(dtype: DType, bytes: &[u8]) -> Self {
        let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        match dtype {
            DType::F32 => ArrayData::F32(words.map(f32::from_le_bytes).collect()),
            DType::I32 => ArrayData::I32(words.map(i32::from_le_bytes).collect()),
        }
    }
}

/// A named array with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::F32(data),
        }
    }

    pub fn i32(name: impl Into<String>, shape: Vec<usize>, data: Vec<i32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::I32(data),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub header: serde_json::Value,
    pub registry: Vec<RegistryEntry>,
    pub blob_length: u64,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub header: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Malformed(format!("missing array `{name}`")))
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F32(v) => Ok((&a.shape, v)),
            ArrayData::I32(_) => Err(Error::Malformed(format!("array `{name}` is not f32"))),
        }
    }

    pub fn i32(&self, name: &str) -> Result<(&[usize], &[i32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::I32(v) => Ok((&a.shape, v)),
            ArrayData::F32(_) => Err(Error::Malformed(format!("array `{name}` is not i32"))),
        }
    }
}

pub fn encode(kind: &str, header: serde_json::Value, arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut registry = Vec::with_capacity(arrays.len());
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::dim("container", &a.shape, &[a.data.len()]));
        }
        let bytes = a.data.to_bytes();
        registry.push(RegistryEntry {
            name: a.name.clone(),
            dtype: a.data.dtype(),
            shape: a.shape.clone(),
            offset: blob.len() as u64,
            length: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        header,
        registry,
        blob_length: blob.len() as u64,
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8], expected_kind: &str) -> Result<Container> {
    let newline = bytes.iter().position(|&b| b == b'\n');
    let manifest: Option<Manifest> = newline.and_then(|n| serde_json::from_slice(&bytes[..n]).ok());

    if let (Some(n), Some(m)) = (newline, &manifest) {
        let declared = n as u64 + 1 + m.blob_length + 4;
        if (bytes.len() as u64) < declared {
            return Err(Error::Truncated {
                expected: declared as usize,
                found: bytes.len(),
            });
        }
    }
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([footer[0], footer[1], footer[2], footer[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            what: "file".into(),
            stored,
            computed,
        });
    }

    let (n, m) = match (newline, manifest) {
        (Some(n), Some(m)) => (n, m),
        _ => return Err(Error::Malformed("unreadable manifest line".into())),
    };
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: m.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if m.kind != expected_kind {
        return Err(Error::Malformed(format!("expected a {expected_kind} file, found {}", m.kind)));
    }
    let blob = &body[n + 1..];
    if blob.len() as u64 != m.blob_length {
        return Err(Error::Malformed(format!(
            "blob is {} bytes, manifest declares {}",
            blob.len(),
            m.blob_length
        )));
    }
    let mut arrays = Vec::with_capacity(m.registry.len());
    let mut cursor = 0u64;
    for e in &m.registry {
        let count: usize = e.shape.iter().product();
        if e.offset != cursor || e.length != 4 * count as u64 || e.offset + e.length > m.blob_length {
            return Err(Error::Malformed(format!("inconsistent registry entry `{}`", e.name)));
        }
        let slice = &blob[e.offset as usize..(e.offset + e.length) as usize];
        let crc = crc32fast::hash(slice);
        if crc != e.crc32 {
            return Err(Error::Checksum {
                what: e.name.clone(),
                stored: e.crc32,
                computed: crc,
            });
        }
        arrays.push(NamedArray {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: ArrayData::from_bytes(e.dtype, slice),
        });
        cursor += e.length;
    }
    if cursor != m.blob_length {
        return Err(Error::Malformed("registry does not cover the blob".into()));
    }
    Ok(Container {
        kind: m.kind,
        header: m.header,
        arrays,
    })
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".into(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, kind: &str, header: serde_json::Value, arrays: &[NamedArray]) -> Result<()> {
    write_atomic(path, &encode(kind, header, arrays)?)
}

pub fn load(path: &Path, expected_kind: &str) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected_kind)
}
