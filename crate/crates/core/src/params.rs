//! Named learnable parameters with matching gradient slots, shared by the
//! backbone, LMFA, GFA and the heads, plus checkpoint serialization.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic   8 bytes  "SVOXCKPT"
//! version u32      1
//! seed    u64      global seed the store was initialized with
//! count   u32      number of tensors
//! table   count *  { name_len u32, name utf-8, rows u64, cols u64 }
//! data    count *  rows*cols f64, in table order (names sorted ascending)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mat::Mat;

const MAGIC: &[u8; 8] = b"SVOXCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Param {
    value: Mat,
    grad: Mat,
}

/// Named parameter tensors with same-shaped gradient slots. Iteration order
/// is name order (BTreeMap), which keeps every consumer deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    pub seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            seed,
        }
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        let grad = Mat::zeros(value.rows(), value.cols());
        let prev = self.entries.insert(name.to_string(), Param { value, grad });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Parameter value; panics on unknown names since those are wiring bugs.
    pub fn get(&self, name: &str) -> &Mat {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn try_get(&self, name: &str) -> Option<&Mat> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Mat {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Mat {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .grad
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Mat) {
        self.grad_mut(name).add_assign(delta);
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// First parameter holding a non-finite gradient entry, if any.
    pub fn find_non_finite_grad(&self) -> Option<&str> {
        for (name, p) in &self.entries {
            if p.grad.data().iter().any(|v| !v.is_finite()) {
                return Some(name);
            }
        }
        None
    }

    pub fn scalar(&self, name: &str, flat: usize) -> f64 {
        self.get(name).data()[flat]
    }

    pub fn set_scalar(&mut self, name: &str, flat: usize, v: f64) {
        self.get_mut(name).data_mut()[flat] = v;
    }

    pub fn grad_scalar(&self, name: &str, flat: usize) -> f64 {
        self.grad(name).data()[flat]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, p) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
            buf.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        }
        for p in self.entries.values() {
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated at byte {} (need {n} more)",
                    *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

        let mut table: Vec<(String, usize, usize)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("bad name: {e}")))?;
            let rows = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            table.push((name, rows, cols));
        }

        let mut store = ParamStore::new(seed);
        for (name, rows, cols) in table {
            let n = rows * cols;
            let raw = take(&mut pos, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, Mat::from_vec(rows, cols, data));
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after tensor data",
                bytes.len() - pos
            )));
        }
        Ok(store)
    }
}
