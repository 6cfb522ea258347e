//! Binary parameter container.
//!
//! ```text
//! magic "RGCK" | version u32 | metadata (u32 len, UTF-8) | count u32
//! per tensor: kind u8 (0 param, 1 buffer) | name (u32 len, UTF-8)
//!             | ndim u32 | dims u64 x ndim | f64 x prod(dims)
//! ```
//!
//! Integers and floats are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RGCK";
pub const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            params: store
                .named_params()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            buffers: store
                .named_buffers()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Copies stored values into a store built with the same layout.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        store.load_values(
            self.params.iter().map(|(n, t)| (n.as_str(), t)),
            self.buffers.iter().map(|(n, t)| (n.as_str(), t)),
        )
    }

    /// Value of a `key=value` entry in the `;`-separated metadata.
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.split(';').find_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut buf, &self.metadata);
        let count = (self.params.len() + self.buffers.len()) as u32;
        buf.extend_from_slice(&count.to_le_bytes());
        let all = self
            .params
            .iter()
            .map(|p| (KIND_PARAM, p))
            .chain(self.buffers.iter().map(|b| (KIND_BUFFER, b)));
        for (kind, (name, t)) in all {
            buf.push(kind);
            put_str(&mut buf, name);
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| NnError::Io {
            path: "<writer>".into(),
            source: e,
        })
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(NnError::BadMagic(magic));
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(NnError::UnsupportedVersion(version));
        }
        let metadata = read_str(r, "metadata")?;
        let count = read_u32(r, "tensor count")?;
        let mut ck = Checkpoint {
            metadata,
            ..Default::default()
        };
        for _ in 0..count {
            let mut kind = [0u8; 1];
            read_exact(r, &mut kind, "tensor kind")?;
            let name = read_str(r, "tensor name")?;
            let ndim = read_u32(r, "tensor rank")? as usize;
            if ndim > 8 {
                return Err(NnError::Malformed(format!("`{name}` has rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(r, &mut b, "tensor shape")?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= 1 << 32)
                .ok_or_else(|| {
                    NnError::Malformed(format!("`{name}` has absurd shape {shape:?}"))
                })?;
            let mut raw = vec![0u8; n * 8];
            read_exact(r, &mut raw, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)?;
            match kind[0] {
                KIND_PARAM => ck.params.push((name, t)),
                KIND_BUFFER => ck.buffers.push((name, t)),
                k => return Err(NnError::Malformed(format!("tensor kind {k}"))),
            }
        }
        let mut probe = [0u8; 1];
        match r.read(&mut probe) {
            Ok(0) => Ok(ck),
            Ok(_) => Err(NnError::Malformed("trailing bytes".into())),
            Err(e) => Err(NnError::Io {
                path: "<reader>".into(),
                source: e,
            }),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |e| NnError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        self.write(&mut w)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| NnError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::read(&mut BufReader::new(f))
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => NnError::Truncated(what),
        _ => NnError::Io {
            path: "<reader>".into(),
            source: e,
        },
    })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R, what: &'static str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    if len > 1 << 24 {
        return Err(NnError::Malformed(format!("{what} length {len}")));
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b, what)?;
    String::from_utf8(b).map_err(|_| NnError::Malformed(format!("{what} is not UTF-8")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metadata_lookup() {
        let ck = Checkpoint {
            metadata: "arch=raingauge;preset=desk".into(),
            ..Default::default()
        };
        assert_eq!(ck.meta("preset"), Some("desk"));
        assert_eq!(ck.meta("seed"), None);
    }
}
