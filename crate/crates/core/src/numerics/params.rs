//! Named parameter collections, initialization and checkpoint files.
//!
//! A checkpoint is one JSON header line (format version, dtype, names and
//! shapes) followed by the raw little-endian `f64` payload in header order.

use std::fs;
use std::io::Write;
use std::ops::Index;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rng::{standard_normal, Rng};
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named set of tensors owned by one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every tensor of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Normal(0, std) initialized tensor.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let t = Tensor::from_fn(shape, |_| std * standard_normal(rng));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every tensor on the tape; frozen bindings never receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Bound { vars }
    }

    /// Gradients for a binding, zero where nothing flowed.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.tensor(v)).collect()
    }

    /// Polyak averaging: `self = (1 - rate) * self + rate * online`.
    pub fn polyak_from(&mut self, online: &ParamStore, rate: f64) -> Result<()> {
        if online.tensors.len() != self.tensors.len() {
            return Err(Error::dim("polyak", &[self.tensors.len()], &[online.tensors.len()]));
        }
        for (t, o) in self.tensors.iter_mut().zip(&online.tensors) {
            if t.shape() != o.shape() {
                return Err(Error::dim("polyak", t.shape(), o.shape()));
            }
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = (1.0 - rate) * *a + rate * b;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            dtype: "f64le".into(),
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse { line: 1, msg: "missing checkpoint header".into() })?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
        if header.format_version != CHECKPOINT_VERSION || header.dtype != "f64le" {
            return Err(Error::Incompatible(format!(
                "checkpoint version {} dtype {}",
                header.format_version, header.dtype
            )));
        }
        let payload = &bytes[nl + 1..];
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::Corruption(format!(
                "checkpoint payload has {} bytes, header promises {}",
                payload.len(),
                total * 8
            )));
        }
        let mut store = ParamStore::new();
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for e in header.tensors {
            let n = e.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            store.add(e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Replaces all values from `other`, which must have identical names and shapes.
    pub fn assign(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Incompatible("parameter names differ".into()));
        }
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            if t.shape() != o.shape() {
                return Err(Error::dim("assign", t.shape(), o.shape()));
            }
            *t = o.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::stream;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = stream(1, "init");
        let mut s = ParamStore::new();
        s.add_normal("w", &[3, 4], 0.02, &mut rng);
        s.add_zeros("b", &[4]);
        s.add("c", Tensor::scalar(f64::MIN_POSITIVE));
        let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut s = ParamStore::new();
        s.add_ones("g", &[5]);
        let bytes = s.to_bytes();
        assert!(matches!(
            ParamStore::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Corruption(_))
        ));
        assert!(ParamStore::from_bytes(b"{\"format").is_err());
    }

    #[test]
    fn polyak_moves_toward_online() {
        let mut target = ParamStore::new();
        target.add_zeros("w", &[2]);
        let mut online = ParamStore::new();
        online.add_ones("w", &[2]);
        target.polyak_from(&online, 0.25).unwrap();
        assert_eq!(target.tensors()[0].data(), &[0.25, 0.25]);
    }
}
