//! The `MFVCW` weights file: an ordered list of named 4-D tensors.
//!
//! Layout (little-endian): magic `MFVCW`, version byte, `u32` tensor count;
//! per tensor a `u32` name length, the UTF-8 name, four `u32` extents and the
//! `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ConvLayer, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"MFVCW";
pub const WEIGHTS_VERSION: u8 = 1;

/// Upper bound on a single tensor's element count accepted when reading.
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    entries: Vec<(String, Tensor)>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn push_conv(&mut self, prefix: &str, layer: &ConvLayer) {
        self.push(format!("{prefix}.kernel"), layer.kernel.clone());
        self.push(format!("{prefix}.bias"), layer.bias.clone());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    /// Rebuilds a conv layer stored by [`NamedTensors::push_conv`].
    pub fn conv(&self, prefix: &str, stride: usize, transpose: bool, mask: Option<Vec<f32>>) -> Result<ConvLayer> {
        let kernel = self.get(&format!("{prefix}.kernel"))?.clone();
        let bias = self.get(&format!("{prefix}.bias"))?.clone();
        ConvLayer::new(kernel, bias, stride, transpose, mask)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.push(WEIGHTS_VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(&mut bytes, &mut magic, "magic")?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format("not a weights file (bad magic)".into()));
        }
        let mut version = [0u8; 1];
        read_exact(&mut bytes, &mut version, "version")?;
        if version[0] != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weights version {}", version[0])));
        }
        let count = read_u32(&mut bytes, "tensor count")?;
        let mut entries = Vec::new();
        for i in 0..count {
            let len = read_u32(&mut bytes, "name length")? as usize;
            if len > bytes.len() {
                return Err(Error::Format(format!("tensor {i}: name runs past end of file")));
            }
            let mut name = vec![0u8; len];
            read_exact(&mut bytes, &mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?;
            let mut shape = [0usize; 4];
            for s in &mut shape {
                *s = read_u32(&mut bytes, "extent")? as usize;
            }
            let n: u64 = shape.iter().map(|&s| s as u64).product();
            if n > MAX_ELEMENTS || n * 4 > bytes.len() as u64 {
                return Err(Error::Format(format!(
                    "tensor `{name}`: payload of {n} values does not fit the file"
                )));
            }
            let mut data = Vec::with_capacity(n as usize);
            for chunk in bytes[..n as usize * 4].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")));
            }
            bytes = &bytes[n as usize * 4..];
            entries.push((name, Tensor::new(shape, data)?));
        }
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(src: &mut &[u8], dst: &mut [u8], what: &str) -> Result<()> {
    if src.len() < dst.len() {
        return Err(Error::Format(format!("truncated while reading {what}")));
    }
    dst.copy_from_slice(&src[..dst.len()]);
    *src = &src[dst.len()..];
    Ok(())
}

fn read_u32(src: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(src, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// First 8 bytes of the SHA-256 of the concatenated serializations.
pub fn model_digest(parts: &[&NamedTensors]) -> [u8; 8] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_bytes());
    }
    let full = h.finalize();
    full[..8].try_into().expect("digest prefix")
}

pub fn digest_hex(d: &[u8; 8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}
