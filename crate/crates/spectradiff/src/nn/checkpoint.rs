//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   5 bytes  "SPDF1"
//! version u32      1
//! kind    u32 length + UTF-8 bytes      ("vqvae", "ddpm", ...)
//! meta    u64 length + UTF-8 JSON bytes (hyperparameter record)
//! count   u64                           number of tensors
//! tensor  u64 name length + name bytes
//!         u64 rank, u64 dims[rank]
//!         f64 data[product(dims)]
//! ```
//!
//! Tensors are written in path-sorted order, so a checkpoint's bytes are a
//! deterministic function of its contents.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::TensorND;

pub const MAGIC: &[u8; 5] = b"SPDF1";
pub const VERSION: u32 = 1;

/// A deserialized checkpoint: kind tag, JSON metadata and named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta_json: String,
    pub tensors: BTreeMap<String, TensorND>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta_json: String) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            meta_json,
            tensors: BTreeMap::new(),
        }
    }

    /// Add every parameter value from a store.
    pub fn insert_params(&mut self, ps: &ParamStore) {
        for (path, p) in ps.iter() {
            self.tensors.insert(path.to_string(), p.value.clone());
        }
    }

    pub fn insert_tensor(&mut self, name: &str, t: TensorND) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorND> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Copy tensors back into a freshly built store with matching paths.
    pub fn load_into(&self, ps: &mut ParamStore) -> Result<()> {
        for (path, p) in ps.iter_mut() {
            let t = self
                .tensors
                .get(path)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {path}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {path} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.kind.len() as u32).to_le_bytes())?;
        w.write_all(self.kind.as_bytes())?;
        w.write_all(&(self.meta_json.len() as u64).to_le_bytes())?;
        w.write_all(self.meta_json.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        Self::read_from(&mut r).map_err(|e| match e {
            ReadError::Io(io) => Error::io(path.display().to_string(), io),
            ReadError::Malformed(msg) => {
                Error::Checkpoint(format!("{}: {msg}", path.display()))
            }
        })
    }

    fn read_from(r: &mut impl Read) -> std::result::Result<Self, ReadError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ReadError::Malformed(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(ReadError::Malformed(format!(
                "unsupported version {version}"
            )));
        }
        let kind_len = read_u32(r)? as usize;
        let kind = read_string(r, kind_len)?;
        let meta_len = read_u64(r)? as usize;
        let meta_json = read_string(r, meta_len)?;
        let count = read_u64(r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u64(r)? as usize;
            let name = read_string(r, name_len)?;
            let rank = read_u64(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0f64; n];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            let t = TensorND::from_vec(&shape, data)
                .map_err(|e| ReadError::Malformed(e.to_string()))?;
            tensors.insert(name, t);
        }
        Ok(Checkpoint {
            kind,
            meta_json,
            tensors,
        })
    }
}

enum ReadError {
    Io(std::io::Error),
    Malformed(String),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        ReadError::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read, len: usize) -> std::result::Result<String, ReadError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| ReadError::Malformed(format!("invalid UTF-8: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = std::env::temp_dir().join("spdf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");

        let mut ck = Checkpoint::new("vqvae", r#"{"d":16}"#.to_string());
        ck.insert_tensor("a.w", TensorND::from_vec(&[2, 2], vec![1.0, -2.5, 0.0, 3.25]).unwrap());
        ck.insert_tensor("b", TensorND::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, "vqvae");
        assert_eq!(back.meta_json, r#"{"d":16}"#);
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensor("a.w").unwrap().data(), &[1.0, -2.5, 0.0, 3.25]);

        // Same contents -> identical bytes.
        let path2 = dir.join("rt2.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("spdf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTSPDF1....").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
