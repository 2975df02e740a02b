//! Weight file format.
//!
//! ```text
//! magic      8 bytes   "VTGW0001"
//! header_len u64 LE    length of the JSON header in bytes
//! header     UTF-8     {"tensors": [{"path", "dtype", "shape", "offset", "kind"}...], "meta": {...}}
//! data       f64 LE    tensor buffers, `offset` counted from the start of this section
//! ```
//!
//! Tensors are stored row-major; image-like weights use the NHWC/HWIO layouts
//! of the tensor module.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{path_under, EntryKind, ParameterStore};

pub const MAGIC: &[u8; 8] = b"VTGW0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub path: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub kind: EntryKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<TensorRecord>,
    meta: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub path: String,
    pub shape: Vec<usize>,
    pub kind: EntryKind,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<StoredTensor>,
    pub meta: Value,
}

impl WeightFile {
    /// Every entry of `store` whose path starts with one of `prefixes`
    /// (all entries when empty).
    pub fn from_store(store: &ParameterStore, prefixes: &[&str], meta: Value) -> Result<WeightFile> {
        let mut tensors = Vec::new();
        for (path, shape, kind) in store.skeleton() {
            let keep = prefixes.is_empty() || prefixes.iter().any(|p| path_under(&path, p));
            if keep {
                let data = store.values(&path)?.to_vec();
                tensors.push(StoredTensor { path, shape, kind, data });
            }
        }
        Ok(WeightFile { tensors, meta })
    }

    pub fn get(&self, path: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.path == path)
    }

    /// Copies values into existing store entries. Every store entry below
    /// the given prefixes must be present with a matching shape.
    pub fn load_into(&self, store: &mut ParameterStore, prefixes: &[&str]) -> Result<()> {
        let wanted: Vec<String> = store
            .paths()
            .filter(|p| prefixes.is_empty() || prefixes.iter().any(|pre| path_under(p, pre)))
            .map(str::to_string)
            .collect();
        for path in wanted {
            let t = self
                .get(&path)
                .ok_or_else(|| Error::WeightFormat(format!("missing tensor `{path}`")))?;
            let shape = store.shape(&path)?;
            if t.shape != shape {
                return Err(Error::WeightFormat(format!(
                    "`{path}` has shape {:?} in the file but {:?} in the model",
                    t.shape, shape
                )));
            }
            store.set_value(&path, t.data.clone())?;
        }
        Ok(())
    }

    /// Builds a fresh store holding exactly the file's tensors.
    pub fn to_store(&self) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for t in &self.tensors {
            match t.kind {
                EntryKind::Parameter => store.insert_parameter(&t.path, t.data.clone(), &t.shape)?,
                EntryKind::Buffer => store.insert_buffer(&t.path, t.data.clone(), &t.shape)?,
            }
        }
        Ok(store)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut records = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::WeightFormat(format!("`{}` shape/data mismatch", t.path)));
            }
            records.push(TensorRecord {
                path: t.path.clone(),
                dtype: "f64".into(),
                shape: t.shape.clone(),
                offset,
                kind: t.kind,
            });
            offset += 8 * t.data.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            tensors: records,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<WeightFile> {
        let bad = |m: &str| Error::WeightFormat(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::WeightFormat(format!("header: {e}")))?;
        let data = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for r in header.tensors {
            if r.dtype != "f64" {
                return Err(Error::WeightFormat(format!("`{}`: unsupported dtype {}", r.path, r.dtype)));
            }
            let n: usize = r.shape.iter().product();
            let start = r.offset as usize;
            let end = start
                .checked_add(8 * n)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| Error::WeightFormat(format!("`{}`: buffer out of range", r.path)))?;
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(StoredTensor {
                path: r.path,
                shape: r.shape,
                kind: r.kind,
                data: values,
            });
        }
        Ok(WeightFile {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<WeightFile> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        WeightFile::decode(&bytes)
    }
}
