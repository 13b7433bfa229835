//! Model parameter archive: a single binary file mapping named layers to
//! shape-annotated `float32` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"EMFARCH1"
//! seed   u64                      model-build seed (drives the stub text
//!                                 encoder's fallback path for unseen tokens)
//! count  u32
//! entry* name_len u32, name utf-8, ndim u32, dims u32*, data f32*
//! ```
//!
//! Training happens in `f64`; saving rounds to `f32` once, and loading the
//! archive back reproduces those `f32` values exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"EMFARCH1";

/// Named `f32` arrays with shapes, plus the model-build seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub seed: u64,
    entries: IndexMap<String, Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Archive {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(name.into(), Entry { shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Round a `f64` parameter store into archive entries under their names.
    pub fn from_params(seed: u64, store: &ParamStore) -> Self {
        let mut archive = Self::new(seed);
        for (name, tensor) in store.iter() {
            archive.insert(
                name,
                tensor.shape().to_vec(),
                tensor.iter().map(|&v| v as f32).collect(),
            );
        }
        archive
    }

    /// Merge another archive's entries into this one.
    pub fn merge(&mut self, other: &Archive) {
        for (name, entry) in &other.entries {
            self.entries.insert(name.clone(), entry.clone());
        }
    }

    /// Load entries (optionally only those under `prefix`) into a `f64` store.
    pub fn to_params(&self, prefix: Option<&str>) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, entry) in &self.entries {
            if let Some(p) = prefix {
                if !name.starts_with(p) {
                    continue;
                }
            }
            let tensor = ndarray::ArrayD::from_shape_vec(
                IxDyn(&entry.shape),
                entry.data.iter().map(|&v| f64::from(v)).collect(),
            )
            .expect("archive entry shape/data agree");
            store.insert(name.clone(), tensor);
        }
        store
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(entry.shape.len() as u32).to_le_bytes())?;
            for &d in &entry.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &entry.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "'{}' is not a model archive (bad magic)",
                path.display()
            )));
        }
        let seed = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut archive = Self::new(seed);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Format(format!("archive entry name: {e}")))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 4];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf));
            }
            archive.insert(name, shape, data);
        }
        Ok(archive)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
