//! Single-file container for named `f32` arrays plus JSON metadata.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MTRNCKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length L in bytes, u64 little-endian
//! 20      L     UTF-8 JSON header: {"meta": {...}, "arrays": [{"name", "shape", "offset", "len"}, ...]}
//! 20+L    ...   payload: every array as little-endian f32, at its byte offset
//!               relative to the payload start
//! ```
//!
//! Writes go to a temporary sibling file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::tensor::Real;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MTRNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Stores every array of `net` as `{prefix}.{layer}.{array}`.
    pub fn push_network<T: Real>(&mut self, prefix: &str, net: &Network<T>) {
        for (name, shape, data) in net.named_arrays() {
            self.push(
                format!("{prefix}.{name}"),
                shape,
                data.iter().map(|v| v.to_f32().unwrap()).collect(),
            );
        }
    }

    /// Overwrites the arrays of `net` with the stored ones; every array must
    /// be present with a matching length.
    pub fn restore_network<T: Real>(&self, prefix: &str, net: &mut Network<T>, path: &Path) -> Result<()> {
        for (name, dst) in net.named_arrays_mut() {
            let full = format!("{prefix}.{name}");
            let src = self.get(&full).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("missing array `{full}`"),
            })?;
            if src.data.len() != dst.len() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!(
                        "array `{full}` has {} values, network expects {}",
                        src.data.len(),
                        dst.len()
                    ),
                });
            }
            for (d, &s) in dst.iter_mut().zip(&src.data) {
                *d = T::from_f32(s).unwrap();
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries: Vec<ArrayEntry> = self
            .arrays
            .iter()
            .map(|a| {
                let e = ArrayEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    offset,
                    len: a.data.len() as u64,
                };
                offset += 4 * a.data.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: entries,
        })
        .expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| bad(&format!("malformed header: {e}")))?;
        let payload = &bytes[header_end..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            if e.shape.iter().product::<usize>() as u64 != e.len {
                return Err(bad(&format!("array `{}` shape does not match its length", e.name)));
            }
            let start = e.offset as usize;
            let end = start + 4 * e.len as usize;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| bad(&format!("array `{}` runs past end of file", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Container {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Generator, GeneratorSpec};

    #[test]
    fn network_round_trip_through_bytes() {
        let g = Generator::<f32>::new(GeneratorSpec::test_scale(), 3).unwrap();
        let mut c = Container::new(serde_json::json!({"step": 7}));
        c.push_network("generator", g.network());
        let back = Container::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        let mut other = Generator::<f32>::new(GeneratorSpec::test_scale(), 4).unwrap();
        back.restore_network("generator", other.network_mut(), Path::new("x")).unwrap();
        assert_eq!(other, g);
        let w = back.get("generator.encoder.0.weight").unwrap();
        assert_eq!(w.shape, vec![4, 4, 4, 8]);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new(serde_json::json!({}));
        c.push("a", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut bytes = c.to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(Container::from_bytes(&bytes, Path::new("x")).is_err());
        assert!(Container::from_bytes(b"garbage garbage garbage", Path::new("x")).is_err());

        let g = Generator::<f32>::new(GeneratorSpec::test_scale(), 3).unwrap();
        let mut wide = Generator::<f32>::new(GeneratorSpec::with_width(0.25), 3).unwrap();
        let mut c = Container::new(serde_json::json!({}));
        c.push_network("generator", g.network());
        assert!(c.restore_network("generator", wide.network_mut(), Path::new("x")).is_err());
    }
}
