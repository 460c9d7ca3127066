//! Versioned checkpoint container: a text manifest followed by raw
//! little-endian payloads.
//!
//! Layout:
//! ```text
//! ckpt 1
//! <entry count>
//! <name> <dtype> <d0>x<d1>x... <offset>     (one line per tensor)
//! data
//! <payload bytes>
//! ```
//! Offsets are relative to the first byte after the `data` line. Names must
//! be whitespace-free; shapes use `x`-separated decimal dims (rank >= 1).

use crate::tensor::{Dtype, Scalar, Tensor};
use crate::{Result, TensorError};
use std::fs;
use std::path::Path;

const MAGIC: &str = "ckpt 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// A loaded checkpoint: manifest plus payload bytes.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    entries: Vec<CheckpointEntry>,
    payload: Vec<u8>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

/// Serialize named tensors. Entries are written in the given order.
pub fn save<T: Scalar, P: AsRef<Path>>(path: P, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let mut payload = Vec::new();
    let mut manifest = format!("{MAGIC}\n{}\n", tensors.len());
    for (name, tensor) in tensors {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(bad(format!("tensor name {name:?} must be non-empty and whitespace-free")));
        }
        if tensor.shape().is_empty() {
            return Err(bad(format!("tensor {name:?} needs rank >= 1")));
        }
        let offset = payload.len();
        for &v in tensor.data().iter() {
            v.encode_le(&mut payload);
        }
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "{name} {} {} {offset}\n",
            T::DTYPE.name(),
            dims.join("x")
        ));
    }
    manifest.push_str("data\n");
    let mut bytes = manifest.into_bytes();
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

impl Checkpoint {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // The manifest is the ASCII region up to the `data` line.
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("manifest truncated (no data line)"))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| bad(format!("non-UTF-8 manifest line at byte {pos}")))?;
            pos += end + 1;
            Ok(line)
        };

        let magic = next_line()?;
        if magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let count: usize = next_line()?
            .trim()
            .parse()
            .map_err(|_| bad("bad entry count"))?;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let line = next_line()?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, dtype, dims, offset] = parts[..] else {
                return Err(bad(format!("entry {i}: {line:?} is not `name dtype dims offset`")));
            };
            let dtype = Dtype::from_name(dtype).map_err(|_| bad(format!("entry {i}: bad dtype {dtype:?}")))?;
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("entry {i}: bad dim {d:?}"))))
                .collect::<Result<_>>()?;
            let offset: usize = offset
                .parse()
                .map_err(|_| bad(format!("entry {i}: bad offset {offset:?}")))?;
            entries.push(CheckpointEntry { name: name.to_string(), dtype, shape, offset });
        }
        let data_line = next_line()?;
        if data_line != "data" {
            return Err(bad(format!("expected data line after entries, got {data_line:?}")));
        }
        let payload = bytes[pos..].to_vec();

        // Validate payload coverage up front so truncation fails loudly.
        for e in &entries {
            let numel: usize = e.shape.iter().product();
            let end = e.offset + numel * e.dtype.size_bytes();
            if end > payload.len() {
                return Err(bad(format!(
                    "tensor {:?} needs payload bytes {}..{end}, file has {}",
                    e.name, e.offset, payload.len()
                )));
            }
        }
        Ok(Checkpoint { entries, payload })
    }

    pub fn entries(&self) -> &[CheckpointEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Read a tensor in its stored dtype. Errors if `T` does not match.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entry(name)
            .ok_or_else(|| bad(format!("no tensor named {name:?}")))?;
        if e.dtype != T::DTYPE {
            return Err(bad(format!(
                "tensor {name:?} stored as {}, requested {}",
                e.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let numel: usize = e.shape.iter().product();
        let width = e.dtype.size_bytes();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = e.offset + i * width;
            data.push(T::decode_le(&self.payload[at..at + width]));
        }
        Tensor::from_vec(e.shape.clone(), data)
    }
}
