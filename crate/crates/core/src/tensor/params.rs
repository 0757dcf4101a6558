//! Named parameter storage and the checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "VMILCKPT"
//! version    u32       currently 1
//! meta_len   u32       byte length of the metadata string
//! meta       UTF-8     free-form metadata (the model writes JSON here)
//! count      u32       number of tensors
//! per tensor, in name order:
//!   name_len u32, name UTF-8
//!   rank     u32, dims rank × u64
//!   data     product(dims) × f64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{Graph, Result, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VMILCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trainable tensors keyed by name. Iteration order is the name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Graph leaves created for a [`ParamStore`], one per parameter.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable tensor, replacing any previous one of that name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter onto `graph` as a gradient-tracking leaf.
    pub fn bind(&self, graph: &mut Graph) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let leaf = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())
                    .with_requires_grad(t.requires_grad());
                (name.clone(), graph.leaf(leaf))
            })
            .collect();
        Binding { vars }
    }

    /// Like [`ParamStore::bind`] but without gradient tracking, for inference.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let leaf = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
                (name.clone(), graph.constant(leaf))
            })
            .collect();
        Binding { vars }
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.clear_grad();
        }
    }

    /// Adds the gradients computed on `graph` into each parameter's
    /// accumulator.
    pub fn accumulate_grads(&mut self, graph: &Graph, binding: &Binding) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let var = binding.get(name)?;
            let (Some(acc), Some(g)) = (t.grad_mut(), graph.grad(var)) else {
                continue;
            };
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self, metadata: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.num_values() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_str(&mut out, metadata);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint, returning the parameters and the metadata string.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let metadata = r.string()?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.ok_or_else(|| TensorError::Checkpoint("shape overflow".into()))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| {
                TensorError::Checkpoint("shape overflow".into())
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| TensorError::Checkpoint(format!("tensor `{name}`: {e}")))?;
            if store.tensors.contains_key(&name) {
                return Err(TensorError::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            store.insert(name, tensor);
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Checkpoint("trailing bytes".into()));
        }
        Ok((store, metadata))
    }

    pub fn save(&self, path: &Path, metadata: &str) -> Result<()> {
        std::fs::write(path, self.to_bytes(metadata))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("invalid UTF-8".into()))
    }
}
