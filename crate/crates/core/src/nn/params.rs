use std::io::{BufRead, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameter tensors with matching gradient slots, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Registry(format!("duplicate parameter `{name}`")));
        }
        if !value.is_finite() {
            return Err(Error::Registry(format!("non-finite init for `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.params
            .get_index_of(name)
            .ok_or_else(|| Error::Registry(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Registry(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Registry(format!("missing parameter `{name}`")))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Registry(format!(
                "shape change for `{name}`: {:?} -> {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::Registry(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn by_index(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub(crate) fn by_index_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Writes the checkpoint layout: one JSON header line, then every parameter as
    /// little-endian `f64` in header order. `extra` fields are merged into the header.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, extra: &Value) -> Result<()> {
        let params: Vec<ParamHeader> = self
            .params
            .iter()
            .map(|(name, p)| ParamHeader {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        let mut header = serde_json::json!({
            "version": CHECKPOINT_VERSION,
            "params": params,
        });
        if let (Value::Object(h), Value::Object(e)) = (&mut header, extra) {
            for (k, v) in e {
                if k != "version" && k != "params" {
                    h.insert(k.clone(), v.clone());
                }
            }
        }
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for p in self.params.values() {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::write_checkpoint`]; returns the store
    /// and the full header document.
    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<(Self, Value)> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        let header: Value = serde_json::from_slice(&line)?;
        let version = header.get("version").and_then(Value::as_u64);
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Compatibility(format!(
                "unsupported checkpoint version {version:?}"
            )));
        }
        let params: Vec<ParamHeader> = serde_json::from_value(
            header
                .get("params")
                .cloned()
                .ok_or_else(|| Error::Compatibility("header has no params".into()))?,
        )?;
        let mut store = ParamStore::new();
        let mut buf = [0u8; 8];
        for ph in params {
            let n: usize = ph.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(ph.name, Tensor::new(ph.shape, data)?)?;
        }
        Ok((store, header))
    }

    /// Fails unless `other` has the same names and shapes in the same order.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Compatibility(format!(
                "{} parameters vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, pa), (b, pb)) in self.params.iter().zip(other.params.iter()) {
            if a != b || pa.value.shape() != pb.value.shape() {
                return Err(Error::Compatibility(format!(
                    "`{a}` {:?} vs `{b}` {:?}",
                    pa.value.shape(),
                    pb.value.shape()
                )));
            }
        }
        Ok(())
    }
}
