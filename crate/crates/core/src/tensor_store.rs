//! Single-file tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [u64 header_len][header_len bytes of JSON][data region]
//! ```
//!
//! The JSON header maps each tensor name to
//! `{"dtype": "F32"|"F16"|"BF16", "shape": [..], "data_offsets": [start, end]}`
//! with offsets relative to the start of the data region. An optional
//! `"__metadata__"` entry holds string-to-string metadata. This is the same
//! layout as the `.safetensors` files produced by the Hugging Face ecosystem,
//! so fine-tuned checkpoints from there can be opened directly.
//!
//! Checkpoints are memory-mapped; tensors are decoded one at a time on
//! request.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use half::{bf16, f16};
use memmap2::Mmap;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HEADER_PREFIX: usize = 8;
const HEADER_ALIGN: usize = 8;
const ENCODE_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    /// Parses a header dtype tag. Returns `None` for tags this crate does
    /// not fuse (integers, F64, booleans, ...).
    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Location and type of one tensor inside a checkpoint's data region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Offsets relative to the start of the data region.
    pub byte_range: Range<usize>,
}

impl TensorMeta {
    /// Element count; an empty shape is a scalar with one element.
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.byte_range.end - self.byte_range.start
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

enum Storage {
    Mapped(Mmap),
    Owned(Vec<u8>),
}

impl Storage {
    fn bytes(&self) -> &[u8] {
        match self {
            Storage::Mapped(m) => m,
            Storage::Owned(v) => v,
        }
    }
}

/// A parsed checkpoint. Tensor payloads stay in the mapped file until read.
///
/// `Checkpoint` is `Sync`; concurrent per-tensor reads are fine.
pub struct Checkpoint {
    source: Option<PathBuf>,
    storage: Storage,
    data_start: usize,
    tensors: Vec<TensorMeta>,
    index: HashMap<String, usize>,
    metadata: BTreeMap<String, String>,
}

impl fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Checkpoint")
            .field("source", &self.source)
            .field("tensors", &self.tensors.len())
            .finish()
    }
}

/// Opens a checkpoint file and validates its header.
pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::open(path)
}

impl Checkpoint {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if len < HEADER_PREFIX as u64 {
            return Err(Error::MalformedHeader(format!(
                "file is {len} bytes, shorter than the 8-byte length prefix"
            )));
        }
        // SAFETY: the map is read-only; callers must not truncate or rewrite
        // the file while the checkpoint is alive.
        let mmap = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
        let mut ckpt = Self::parse(Storage::Mapped(mmap))?;
        ckpt.source = Some(path.to_path_buf());
        Ok(ckpt)
    }

    /// Parses a checkpoint held in memory.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        Self::parse(Storage::Owned(bytes))
    }

    fn parse(storage: Storage) -> Result<Self> {
        let bytes = storage.bytes();
        if bytes.len() < HEADER_PREFIX {
            return Err(Error::MalformedHeader(format!(
                "{} bytes, shorter than the 8-byte length prefix",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..HEADER_PREFIX].try_into().unwrap());
        let header_end = (HEADER_PREFIX as u64)
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::MalformedHeader(format!(
                    "declared header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })? as usize;
        let raw: RawHeader = serde_json::from_slice(&bytes[HEADER_PREFIX..header_end])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let data_len = bytes.len() - header_end;

        let mut tensors = Vec::with_capacity(raw.entries.len());
        let mut index = HashMap::with_capacity(raw.entries.len());
        let mut metadata = BTreeMap::new();
        for (name, value) in raw.entries {
            if name == "__metadata__" {
                metadata = serde_json::from_value(value)
                    .map_err(|e| Error::MalformedHeader(format!("__metadata__: {e}")))?;
                continue;
            }
            let entry: RawEntry = serde_json::from_value(value)
                .map_err(|e| Error::MalformedHeader(format!("tensor {name:?}: {e}")))?;
            let dtype = Dtype::from_tag(&entry.dtype).ok_or_else(|| Error::UnsupportedDtype {
                name: name.clone(),
                dtype: entry.dtype.clone(),
            })?;
            let [start, end] = entry.data_offsets;
            if start > end {
                return Err(Error::MalformedHeader(format!(
                    "tensor {name:?} has reversed offsets [{start}, {end}]"
                )));
            }
            if end > data_len as u64 {
                return Err(Error::OffsetOutOfBounds {
                    name,
                    end,
                    len: data_len as u64,
                });
            }
            let numel = checked_numel(&entry.shape).ok_or_else(|| {
                Error::MalformedHeader(format!("tensor {name:?} shape overflows"))
            })?;
            let expected = numel.checked_mul(dtype.byte_width());
            if expected != Some((end - start) as usize) {
                return Err(Error::MalformedHeader(format!(
                    "tensor {name:?}: {} bytes for shape {:?} of {dtype}",
                    end - start,
                    entry.shape
                )));
            }
            if index.insert(name.clone(), tensors.len()).is_some() {
                return Err(Error::DuplicateName(name));
            }
            tensors.push(TensorMeta {
                name,
                dtype,
                shape: entry.shape,
                byte_range: start as usize..end as usize,
            });
        }

        tensors.sort_by(|a, b| {
            (a.byte_range.start, a.byte_range.end).cmp(&(b.byte_range.start, b.byte_range.end))
        });
        let mut cursor = 0usize;
        for meta in &tensors {
            if meta.byte_range.start != cursor {
                return Err(Error::MalformedHeader(format!(
                    "tensor {:?} starts at {} but previous data ends at {cursor}; \
                     ranges must tile the data region",
                    meta.name, meta.byte_range.start
                )));
            }
            cursor = meta.byte_range.end;
        }
        if cursor != data_len {
            return Err(Error::MalformedHeader(format!(
                "data region is {data_len} bytes but tensors cover {cursor}"
            )));
        }
        for (i, meta) in tensors.iter().enumerate() {
            index.insert(meta.name.clone(), i);
        }

        Ok(Checkpoint {
            source: None,
            storage,
            data_start: header_end,
            tensors,
            index,
            metadata,
        })
    }

    /// Path the checkpoint was opened from, if any.
    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Tensors in data-region order.
    pub fn tensors(&self) -> &[TensorMeta] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Size of the data region in bytes.
    pub fn data_len(&self) -> usize {
        self.storage.bytes().len() - self.data_start
    }

    /// Raw little-endian payload of a tensor.
    pub fn raw_bytes(&self, name: &str) -> Result<&[u8]> {
        let meta = self
            .meta(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        Ok(self.payload(meta))
    }

    fn payload(&self, meta: &TensorMeta) -> &[u8] {
        let start = self.data_start + meta.byte_range.start;
        &self.storage.bytes()[start..start + meta.byte_len()]
    }

    /// Decodes a tensor to `f32`. Half-precision values widen exactly.
    pub fn read_tensor_f32(&self, name: &str) -> Result<(Vec<f32>, Vec<usize>)> {
        let meta = self
            .meta(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        let mut out = Vec::new();
        decode_into(meta.dtype, self.payload(meta), &mut out);
        Ok((out, meta.shape.clone()))
    }

    /// Like [`read_tensor_f32`](Self::read_tensor_f32) but reuses `out`.
    pub fn read_f32_into(&self, name: &str, out: &mut Vec<f32>) -> Result<()> {
        let meta = self
            .meta(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        decode_into(meta.dtype, self.payload(meta), out);
        Ok(())
    }
}

fn decode_into(dtype: Dtype, bytes: &[u8], out: &mut Vec<f32>) {
    out.clear();
    out.reserve(bytes.len() / dtype.byte_width());
    match dtype {
        Dtype::F32 => out.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        ),
        Dtype::F16 => out.extend(
            bytes
                .chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32()),
        ),
        Dtype::BF16 => out.extend(
            bytes
                .chunks_exact(2)
                .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32()),
        ),
    }
}

/// Appends the little-endian encoding of `values` in `dtype`.
/// Narrowing rounds to nearest, ties to even.
fn encode_into(dtype: Dtype, values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * dtype.byte_width());
    match dtype {
        Dtype::F32 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F16 => {
            for v in values {
                out.extend_from_slice(&f16::from_f32(*v).to_bits().to_le_bytes());
            }
        }
        Dtype::BF16 => {
            for v in values {
                out.extend_from_slice(&bf16::from_f32(*v).to_bits().to_le_bytes());
            }
        }
    }
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Header entries in file order, keeping duplicates so they can be rejected.
struct RawHeader {
    entries: Vec<(String, serde_json::Value)>,
}

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader { entries })
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

/// A tensor to be written: storage dtype, shape and `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, data: Vec<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            dtype,
            shape,
            data,
        }
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self::new(name, Dtype::F32, shape, data)
    }
}

/// Writes a whole tensor map in the given order.
pub fn write_checkpoint(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let layout = tensors
        .iter()
        .map(|t| (t.name.clone(), t.dtype, t.shape.clone()))
        .collect();
    let mut writer = CheckpointWriter::create(path, layout)?;
    for t in tensors {
        writer.write_tensor(&t.name, &t.data)?;
    }
    writer.finish()
}

/// Encodes a tensor map into an in-memory container.
pub fn to_bytes(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let layout: Vec<_> = tensors
        .iter()
        .map(|t| (t.name.clone(), t.dtype, t.shape.clone()))
        .collect();
    let (metas, header) = plan_layout(layout)?;
    let mut out = header;
    for (meta, t) in metas.iter().zip(tensors) {
        check_len(meta, t.data.len())?;
        encode_into(meta.dtype, &t.data, &mut out);
    }
    Ok(out)
}

fn check_len(meta: &TensorMeta, len: usize) -> Result<()> {
    if len != meta.numel() {
        return Err(Error::LengthShapeMismatch {
            name: meta.name.clone(),
            len,
            shape: meta.shape.clone(),
        });
    }
    Ok(())
}

/// Assigns contiguous offsets and renders the padded header with its prefix.
fn plan_layout(layout: Vec<(String, Dtype, Vec<usize>)>) -> Result<(Vec<TensorMeta>, Vec<u8>)> {
    let mut seen = BTreeSet::new();
    let mut metas = Vec::with_capacity(layout.len());
    let mut offset = 0usize;
    for (name, dtype, shape) in layout {
        if name == "__metadata__" {
            return Err(Error::InvalidConfig(
                "tensor name \"__metadata__\" is reserved".into(),
            ));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let len = checked_numel(&shape)
            .and_then(|n| n.checked_mul(dtype.byte_width()))
            .ok_or_else(|| Error::InvalidConfig(format!("shape of {name:?} overflows")))?;
        metas.push(TensorMeta {
            name,
            dtype,
            shape,
            byte_range: offset..offset + len,
        });
        offset += len;
    }

    let mut json = String::from("{");
    for (i, m) in metas.iter().enumerate() {
        if i > 0 {
            json.push(',');
        }
        json.push_str(&serde_json::to_string(&m.name)?);
        json.push_str(&format!(
            r#":{{"dtype":"{}","shape":{},"data_offsets":[{},{}]}}"#,
            m.dtype,
            serde_json::to_string(&m.shape)?,
            m.byte_range.start,
            m.byte_range.end
        ));
    }
    json.push('}');
    while !(HEADER_PREFIX + json.len()).is_multiple_of(HEADER_ALIGN) {
        json.push(' ');
    }

    let mut header = Vec::with_capacity(HEADER_PREFIX + json.len());
    header.extend_from_slice(&(json.len() as u64).to_le_bytes());
    header.extend_from_slice(json.as_bytes());
    Ok((metas, header))
}

/// Streaming writer: the header is written up front, then tensors are
/// appended one at a time in declaration order.
pub struct CheckpointWriter {
    path: PathBuf,
    out: BufWriter<File>,
    metas: Vec<TensorMeta>,
    next: usize,
    scratch: Vec<u8>,
    bytes_written: u64,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        layout: Vec<(String, Dtype, Vec<usize>)>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let (metas, header) = plan_layout(layout)?;
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        out.write_all(&header).map_err(|e| Error::io(&path, e))?;
        Ok(CheckpointWriter {
            path,
            out,
            metas,
            next: 0,
            scratch: Vec::new(),
            bytes_written: header.len() as u64,
        })
    }

    fn expect_next(&self, name: &str) -> Result<&TensorMeta> {
        match self.metas.get(self.next) {
            Some(meta) if meta.name == name => Ok(meta),
            Some(meta) => Err(Error::InvalidConfig(format!(
                "tensor {name:?} written out of order; expected {:?}",
                meta.name
            ))),
            None => Err(Error::UnknownTensor(name.to_string())),
        }
    }

    /// Encodes `data` in the declared dtype of `name`.
    pub fn write_tensor(&mut self, name: &str, data: &[f32]) -> Result<()> {
        let meta = self.expect_next(name)?;
        check_len(meta, data.len())?;
        let dtype = meta.dtype;
        for chunk in data.chunks(ENCODE_CHUNK) {
            self.scratch.clear();
            encode_into(dtype, chunk, &mut self.scratch);
            self.out
                .write_all(&self.scratch)
                .map_err(|e| Error::io(&self.path, e))?;
        }
        self.bytes_written += (data.len() * dtype.byte_width()) as u64;
        self.next += 1;
        Ok(())
    }

    /// Copies an already-encoded payload verbatim.
    pub fn write_raw(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let meta = self.expect_next(name)?;
        if bytes.len() != meta.byte_len() {
            return Err(Error::LengthShapeMismatch {
                name: name.to_string(),
                len: bytes.len() / meta.dtype.byte_width(),
                shape: meta.shape.clone(),
            });
        }
        self.out
            .write_all(bytes)
            .map_err(|e| Error::io(&self.path, e))?;
        self.bytes_written += bytes.len() as u64;
        self.next += 1;
        Ok(())
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(meta) = self.metas.get(self.next) {
            return Err(Error::InvalidConfig(format!(
                "checkpoint closed before tensor {:?} was written",
                meta.name
            )));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        self.out
            .get_ref()
            .sync_data()
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Shape and dtype of a tensor shared by every input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommonTensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CompatibilityProfile {
    /// Present in base and every task with identical shape and dtype, in base order.
    pub common: Vec<CommonTensor>,
    /// Present in some but not all inputs.
    pub partial: Vec<String>,
    /// Present everywhere but with differing shapes.
    pub shape_conflicts: Vec<String>,
    /// Present everywhere with equal shapes but differing dtypes.
    pub dtype_conflicts: Vec<String>,
}

impl CompatibilityProfile {
    pub fn is_clean(&self) -> bool {
        self.partial.is_empty() && self.shape_conflicts.is_empty() && self.dtype_conflicts.is_empty()
    }
}

/// Classifies every tensor name across `base` and `tasks`.
pub fn check_compatibility(base: &Checkpoint, tasks: &[Checkpoint]) -> CompatibilityProfile {
    let mut profile = CompatibilityProfile::default();
    for meta in base.tensors() {
        let mut present = true;
        let mut same_shape = true;
        let mut same_dtype = true;
        for task in tasks {
            match task.meta(&meta.name) {
                None => present = false,
                Some(other) => {
                    same_shape &= other.shape == meta.shape;
                    same_dtype &= other.dtype == meta.dtype;
                }
            }
        }
        if !present {
            profile.partial.push(meta.name.clone());
        } else if !same_shape {
            profile.shape_conflicts.push(meta.name.clone());
        } else if !same_dtype {
            profile.dtype_conflicts.push(meta.name.clone());
        } else {
            profile.common.push(CommonTensor {
                name: meta.name.clone(),
                dtype: meta.dtype,
                shape: meta.shape.clone(),
            });
        }
    }
    let extra: BTreeSet<&str> = tasks
        .iter()
        .flat_map(|t| t.tensors().iter().map(|m| m.name.as_str()))
        .filter(|name| !base.contains(name))
        .collect();
    profile.partial.extend(extra.into_iter().map(String::from));
    profile
}

#[cfg(test)]
mod tests {
    use super::*;

    fn container(header: &str, data: &[u8]) -> Vec<u8> {
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(data);
        bytes
    }

    #[test]
    fn minimal_container_parses() {
        let header = r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
        let ckpt = Checkpoint::from_bytes(container(header, &[0u8; 16])).unwrap();
        assert_eq!(ckpt.len(), 1);
        assert_eq!(ckpt.meta("w").unwrap().shape, vec![2, 2]);
    }

    #[test]
    fn range_past_end_is_out_of_bounds() {
        let header = r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
        let err = Checkpoint::from_bytes(container(header, &[0u8; 8])).unwrap_err();
        assert!(err.to_string().contains("offset out of bounds"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let header = r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let err = Checkpoint::from_bytes(container(header, &[0u8; 8])).unwrap_err();
        assert!(err.to_string().contains("duplicate tensor name"), "{err}");
    }

    #[test]
    fn integer_dtype_rejected() {
        let header = r#"{"ids":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}"#;
        let err = Checkpoint::from_bytes(container(header, &[0u8; 8])).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDtype { .. }), "{err}");
    }

    #[test]
    fn gaps_and_overlaps_rejected() {
        let gap = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[8,12]}}"#;
        assert!(Checkpoint::from_bytes(container(gap, &[0u8; 12])).is_err());
        let overlap = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        assert!(Checkpoint::from_bytes(container(overlap, &[0u8; 8])).is_err());
        let trailing = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        assert!(Checkpoint::from_bytes(container(trailing, &[0u8; 8])).is_err());
    }

    #[test]
    fn size_must_match_shape() {
        let header = r#"{"a":{"dtype":"F16","shape":[3],"data_offsets":[0,4]}}"#;
        assert!(Checkpoint::from_bytes(container(header, &[0u8; 4])).is_err());
    }

    #[test]
    fn truncated_prefix_and_header() {
        assert!(Checkpoint::from_bytes(vec![1, 2, 3]).is_err());
        let mut bytes = 100u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(
            Checkpoint::from_bytes(bytes),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn metadata_entry_is_not_a_tensor() {
        let header = r#"{"__metadata__":{"format":"pt"},"w":{"dtype":"BF16","shape":[],"data_offsets":[0,2]}}"#;
        let ckpt = Checkpoint::from_bytes(container(header, &0x3f80u16.to_le_bytes())).unwrap();
        assert_eq!(ckpt.len(), 1);
        assert_eq!(ckpt.metadata()["format"], "pt");
        let (v, shape) = ckpt.read_tensor_f32("w").unwrap();
        assert_eq!(v, vec![1.0]);
        assert!(shape.is_empty());
    }

    #[test]
    fn bf16_one_widens_exactly() {
        let bytes = to_bytes(&[NamedTensor::new("x", Dtype::BF16, vec![1], vec![1.0])]).unwrap();
        let ckpt = Checkpoint::from_bytes(bytes).unwrap();
        assert_eq!(ckpt.raw_bytes("x").unwrap(), &0x3f80u16.to_le_bytes());
        assert_eq!(ckpt.read_tensor_f32("x").unwrap().0, vec![1.0f32]);
    }

    #[test]
    fn unknown_name() {
        let ckpt = Checkpoint::from_bytes(to_bytes(&[]).unwrap()).unwrap();
        let err = ckpt.read_tensor_f32("missing").unwrap_err();
        assert!(err.to_string().contains("unknown tensor name"));
    }

    #[test]
    fn length_shape_mismatch_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_checkpoint(
            dir.path().join("x.safetensors"),
            &[NamedTensor::f32("w", vec![2, 2], vec![1.0, 2.0, 3.0])],
        )
        .unwrap_err();
        assert!(err.to_string().contains("length/shape mismatch"), "{err}");
    }

    #[test]
    fn empty_map_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.safetensors");
        write_checkpoint(&path, &[]).unwrap();
        let ckpt = open_checkpoint(&path).unwrap();
        assert!(ckpt.is_empty());
        assert_eq!(ckpt.data_len(), 0);
    }

    #[test]
    fn header_is_padded_to_eight_bytes() {
        let bytes = to_bytes(&[NamedTensor::f32("abc", vec![1], vec![0.5])]).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!((8 + header_len) % 8, 0);
    }

    #[test]
    fn narrowing_rounds_to_nearest_even() {
        // 1 + 2^-11 sits halfway between two f16 values; ties go to the even one (1.0).
        let halfway = 1.0f32 + 2f32.powi(-11);
        // 1 + 3*2^-11 is halfway between 1+2^-10 (odd) and 1+2^-9 (even).
        let halfway_up = 1.0f32 + 3.0 * 2f32.powi(-11);
        let bytes = to_bytes(&[NamedTensor::new(
            "h",
            Dtype::F16,
            vec![2],
            vec![halfway, halfway_up],
        )])
        .unwrap();
        let (v, _) = Checkpoint::from_bytes(bytes)
            .unwrap()
            .read_tensor_f32("h")
            .unwrap();
        assert_eq!(v, vec![1.0, 1.0 + 2f32.powi(-9)]);
    }

    #[test]
    fn writer_enforces_order_and_completion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let layout = vec![
            ("a".to_string(), Dtype::F32, vec![1]),
            ("b".to_string(), Dtype::F32, vec![1]),
        ];
        let mut w = CheckpointWriter::create(&path, layout.clone()).unwrap();
        assert!(w.write_tensor("b", &[1.0]).is_err());
        w.write_tensor("a", &[1.0]).unwrap();
        assert!(w.finish().is_err());
    }

    fn two_tensor(a: &[usize], b: Option<&[usize]>, dtype_a: Dtype) -> Checkpoint {
        let mut tensors = vec![NamedTensor::new(
            "a",
            dtype_a,
            a.to_vec(),
            vec![0.0; a.iter().product()],
        )];
        if let Some(b) = b {
            tensors.push(NamedTensor::f32("b", b.to_vec(), vec![0.0; b.iter().product()]));
        }
        Checkpoint::from_bytes(to_bytes(&tensors).unwrap()).unwrap()
    }

    #[test]
    fn compatibility_all_common() {
        let base = two_tensor(&[2], Some(&[3]), Dtype::F32);
        let tasks = vec![
            two_tensor(&[2], Some(&[3]), Dtype::F32),
            two_tensor(&[2], Some(&[3]), Dtype::F32),
        ];
        let p = check_compatibility(&base, &tasks);
        let names: Vec<_> = p.common.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        assert!(p.is_clean());
    }

    #[test]
    fn compatibility_reports_partial_and_conflicts() {
        let base = two_tensor(&[2], Some(&[3]), Dtype::F32);
        let missing_b = vec![
            two_tensor(&[2], Some(&[3]), Dtype::F32),
            two_tensor(&[2], None, Dtype::F32),
        ];
        let p = check_compatibility(&base, &missing_b);
        assert_eq!(p.partial, vec!["b".to_string()]);
        assert_eq!(p.common.len(), 1);

        let reshaped = vec![two_tensor(&[3], Some(&[3]), Dtype::F32)];
        let p = check_compatibility(&base, &reshaped);
        assert_eq!(p.shape_conflicts, vec!["a".to_string()]);
        assert!(p.common.iter().all(|c| c.name != "a"));

        let retyped = vec![two_tensor(&[2], Some(&[3]), Dtype::BF16)];
        let p = check_compatibility(&base, &retyped);
        assert_eq!(p.dtype_conflicts, vec!["a".to_string()]);
    }
}
