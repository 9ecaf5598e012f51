//! Binary checkpoint format.
//!
//! ```text
//! "MPXCKPT1" | u64 LE manifest length | JSON manifest | raw little-endian data
//! ```
//!
//! The manifest lists every tensor with its name, shape, dtype and byte
//! offset/length into the data section, plus a free-form `meta` object for
//! counters and configuration.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::params::Params;
use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MPXCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub bytes: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    meta: Map<String, Value>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<StoredTensor>,
    index: HashMap<String, usize>,
    pub meta: Map<String, Value>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[StoredTensor] {
        &self.tensors
    }

    pub fn put<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.len() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        let st = StoredTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            bytes,
        };
        match self.index.get(name) {
            Some(&i) => self.tensors[i] = st,
            None => {
                self.index.insert(name.to_string(), self.tensors.len());
                self.tensors.push(st);
            }
        }
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let st = self
            .index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if st.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name} is {}, expected {}",
                st.dtype,
                T::DTYPE
            )));
        }
        let data: Vec<T> = st.bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Tensor::new(st.shape.clone(), data))
    }

    pub fn put_params<T: Scalar>(&mut self, prefix: &str, params: &Params<T>) {
        for e in params.entries() {
            self.put(&format!("{prefix}.{}", e.name), &e.value);
        }
    }

    /// Overwrites every parameter of `params` from `prefix.<name>` entries.
    pub fn load_params<T: Scalar>(&self, prefix: &str, params: &mut Params<T>) -> Result<()> {
        for i in 0..params.len() {
            let name = format!("{prefix}.{}", params.entries()[i].name);
            let t: Tensor<T> = self.get(&name)?;
            if t.shape() != params.get(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, network expects {:?}",
                    t.shape(),
                    params.get(i).shape()
                )));
            }
            params.set(i, t);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: t.dtype.clone(),
                    offset,
                    len: t.bytes.len() as u64,
                };
                offset += t.bytes.len() as u64;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            tensors: entries,
            meta: self.meta.clone(),
        })
        .expect("manifest serialises");
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(path, r.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start]).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let data = &bytes[data_start..];
        let mut ckpt = Checkpoint {
            meta: manifest.meta,
            ..Checkpoint::default()
        };
        for e in manifest.tensors {
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(bad(&format!("tensor {}: unknown dtype {other}", e.name))),
            };
            let (off, len) = (e.offset as usize, e.len as usize);
            if len != numel(&e.shape) * width || off.checked_add(len).is_none_or(|end| end > data.len()) {
                return Err(bad(&format!("tensor {}: inconsistent extent", e.name)));
            }
            ckpt.index.insert(e.name.clone(), ckpt.tensors.len());
            ckpt.tensors.push(StoredTensor {
                name: e.name,
                shape: e.shape,
                dtype: e.dtype,
                bytes: data[off..off + len].to_vec(),
            });
        }
        Ok(ckpt)
    }

    /// Writes via a temporary file and rename, so an interrupted save never
    /// clobbers an existing checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
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

    #[test]
    fn round_trip_is_bitwise() {
        let mut c = Checkpoint::new();
        c.put("a", &Tensor::<f32>::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0]));
        c.put("b", &Tensor::<f64>::new(vec![3], vec![0.1, -7.25, 1e-300]));
        c.meta.insert("step".into(), serde_json::json!(17));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert!(back.get::<f32>("a").unwrap().bit_eq(&c.get::<f32>("a").unwrap()));
        assert_eq!(&std::fs::read(&path).unwrap()[..8], CHECKPOINT_MAGIC);
    }

    #[test]
    fn dtype_mismatch_and_bad_magic_rejected() {
        let mut c = Checkpoint::new();
        c.put("a", &Tensor::<f32>::zeros(&[2]));
        assert!(c.get::<f64>("a").is_err());
        let mut bytes = c.to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes, Path::new("mem")).is_err());
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
