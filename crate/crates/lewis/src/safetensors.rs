//! Reader and canonical writer for the safetensors container.
//!
//! Layout: an unsigned 64-bit little-endian header length `H`, then `H` bytes
//! of JSON mapping each tensor name to `{"dtype", "shape", "data_offsets"}`
//! plus an optional `"__metadata__"` string map, then the raw little-endian
//! tensor data. Offsets are relative to the end of the header.
//!
//! The writer emits names in lexicographic order with contiguous data and
//! pads the header with spaces to a multiple of 8 bytes, so one checkpoint
//! always serializes to the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lewis_core::{Checkpoint, DType, Tensor};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::Truncated { len: bytes.len() });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = bytes.len() - 8;
    if header_len > available as u64 {
        return Err(Error::HeaderLength {
            header_len,
            available,
        });
    }
    let header_end = 8 + header_len as usize;
    let header: Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::HeaderParse(e.to_string()))?;
    let data = &bytes[header_end..];

    let mut ckpt = Checkpoint::new();
    let mut entries = Vec::with_capacity(header.len());
    for (name, value) in header {
        if name == METADATA_KEY {
            ckpt.metadata = parse_metadata(value)?;
        } else {
            entries.push(parse_entry(name, &value)?);
        }
    }

    entries.sort_by_key(|e| (e.begin, e.end));
    let mut previous: Option<&Entry> = None;
    for entry in &entries {
        let offsets_err = |reason: String| Error::DataOffsets {
            name: entry.name.clone(),
            begin: entry.begin,
            end: entry.end,
            reason,
        };
        if entry.end < entry.begin {
            return Err(offsets_err("are reversed".into()));
        }
        if entry.end > data.len() as u64 {
            return Err(offsets_err(format!("run past the {} data bytes", data.len())));
        }
        let count: usize = entry.shape.iter().product();
        if entry.end - entry.begin != (count * entry.dtype.size_bytes()) as u64 {
            return Err(offsets_err(format!(
                "do not span {count} {} elements",
                entry.dtype
            )));
        }
        if let Some(prev) = previous {
            if entry.begin < prev.end {
                return Err(offsets_err(format!("overlap tensor `{}`", prev.name)));
            }
        }
        previous = Some(entry);
    }

    for entry in entries {
        let raw = &data[entry.begin as usize..entry.end as usize];
        let size = entry.dtype.size_bytes();
        let values: Vec<f32> = raw.chunks_exact(size).map(|c| entry.dtype.decode(c)).collect();
        let tensor = Tensor::new(entry.dtype, entry.shape, values).map_err(|e| Error::InvalidEntry {
            name: entry.name.clone(),
            reason: e.to_string(),
        })?;
        ckpt.insert(entry.name, tensor);
    }
    Ok(ckpt)
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let invalid = || Error::InvalidEntry {
        name: METADATA_KEY.into(),
        reason: "must be a map of strings".into(),
    };
    let Value::Object(map) = value else {
        return Err(invalid());
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            _ => Err(invalid()),
        })
        .collect()
}

fn parse_entry(name: String, value: &Value) -> Result<Entry> {
    let invalid = |reason: &str| Error::InvalidEntry {
        name: name.clone(),
        reason: reason.into(),
    };
    let obj = value.as_object().ok_or_else(|| invalid("entry is not an object"))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| invalid("missing string field `dtype`"))?;
    let dtype = DType::parse(dtype_str).ok_or_else(|| Error::UnknownDType {
        name: name.clone(),
        dtype: dtype_str.into(),
    })?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid("missing array field `shape`"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<usize>>>()
        .ok_or_else(|| invalid("shape must hold nonnegative integers"))?;
    if shape.is_empty() || shape.contains(&0) {
        return Err(invalid("shape must be nonempty with positive extents"));
    }
    if shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).is_none() {
        return Err(invalid("shape overflows"));
    }
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| invalid("`data_offsets` must be a two-element array"))?;
    let (Some(begin), Some(end)) = (offsets[0].as_u64(), offsets[1].as_u64()) else {
        return Err(invalid("`data_offsets` must hold nonnegative integers"));
    };
    Ok(Entry {
        name,
        dtype,
        shape,
        begin,
        end,
    })
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut header = Map::new();
    if !ckpt.metadata.is_empty() {
        let meta: Map<String, Value> = ckpt
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.into(), Value::Object(meta));
    }
    let mut data = Vec::with_capacity(ckpt.tensors.values().map(|t| t.len() * t.dtype().size_bytes()).sum());
    for (name, tensor) in &ckpt.tensors {
        if tensor.is_empty() {
            return Err(Error::InvalidEntry {
                name: name.clone(),
                reason: "tensor has zero elements".into(),
            });
        }
        let begin = data.len();
        for &v in tensor.data() {
            tensor.dtype().encode(v, &mut data);
        }
        header.insert(
            name.clone(),
            json!({
                "dtype": tensor.dtype().as_str(),
                "shape": tensor.shape(),
                "data_offsets": [begin, data.len()],
            }),
        );
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + data.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&data);
    Ok(out)
}
