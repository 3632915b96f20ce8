//! Named parameter storage and the checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "EGCP" | version u32 | count u32 |
//!   per parameter (sorted by key): key_len u32 | key utf-8 | rank u32 | dims u32 * rank | f64 * len
//! ```
//!
//! Optimizer state is never written.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::binio::{Reader, Writer, MAX_COUNT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EGCP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    pub(crate) optim: BTreeMap<String, AdamState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) {
        let key = key.into();
        self.optim.remove(&key);
        self.params.insert(key, value);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.params.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.params.get_mut(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Step counter of the optimizer state for `key`, if any step was taken.
    pub fn optimizer_step(&self, key: &str) -> Option<u64> {
        self.optim.get(key).map(|s| s.step)
    }

    pub fn reset_optimizer(&mut self) {
        self.optim.clear();
    }

    /// Allocates or clears every gradient buffer.
    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate_grad(&mut self, key: &str, delta: &[f64]) -> Result<()> {
        self.params
            .get_mut(key)
            .ok_or_else(|| Error::MissingParameter(key.to_string()))?
            .accumulate_grad(delta)
    }

    /// Keeps only the entries whose key satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
        self.optim.retain(|k, _| keep(k));
    }

    /// Copies every parameter of `other` into `self`, replacing same-key entries.
    pub fn merge_from(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            let mut v = v.clone();
            v.clear_grad();
            self.insert(k.clone(), v);
        }
    }

    /// True when both stores hold the same keys with bit-identical values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        w.len(self.params.len(), "checkpoint")?;
        for (key, t) in &self.params {
            w.len(key.len(), "checkpoint")?;
            w.bytes(key.as_bytes())?;
            w.len(t.rank(), "checkpoint")?;
            for d in t.shape() {
                w.len(*d, "checkpoint")?;
            }
            w.f64s(t.data())?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, "checkpoint");
        r.expect_magic(CHECKPOINT_MAGIC)?;
        r.expect_version(CHECKPOINT_VERSION)?;
        let n = r.len(MAX_COUNT)?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let key = r.string(4096)?;
            let rank = r.len(8)?;
            let shape = (0..rank).map(|_| r.len(MAX_COUNT)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .filter(|n| *n <= MAX_COUNT)
                .ok_or_else(|| Error::format("checkpoint", format!("tensor `{key}` too large")))?;
            let data = r.f64s(len)?;
            if store.contains(&key) {
                return Err(Error::format("checkpoint", format!("duplicate key `{key}`")));
            }
            store.insert(key, Tensor::new(shape, data)?);
        }
        r.expect_eof()?;
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
        Self::read_checkpoint(bytes.as_slice()).map_err(|e| e.at_path(path))
    }
}
