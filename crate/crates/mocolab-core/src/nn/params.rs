//! Named parameter sets.
//!
//! A `ParamSet` maps stable names to tensors. Trainability is carried by the
//! tensor's `requires_grad` flag, so a detached clone of a set (all flags
//! cleared) is what the key encoder holds. BTreeMap keeps iteration order —
//! and therefore serialization, checksums, and optimizer walks —
//! deterministic.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::usage("ParamSet::get", format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::usage("ParamSet::get_mut", format!("no parameter named {name}")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<T>> {
        self.entries
            .remove(name)
            .ok_or_else(|| Error::usage("ParamSet::take", format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, t)| t.needs_grad())
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Clone with every `requires_grad` flag cleared.
    pub fn detached_clone(&self) -> ParamSet<T> {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                let mut t = v.clone();
                t.set_requires_grad(false);
                t.clear_grad();
                (k.clone(), t)
            })
            .collect();
        ParamSet { entries }
    }

    /// Same names, shapes, and trainability flags.
    pub fn structurally_matches(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
    }

    /// Merge all entries of `other` under `prefix.`.
    pub fn absorb(&mut self, prefix: &str, other: ParamSet<T>) {
        for (k, v) in other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v);
        }
    }

    /// FNV-1a over names and value bits; changes iff any value changes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (k, v) in &self.entries {
            for b in k.as_bytes() {
                eat(*b);
            }
            let mut buf = Vec::with_capacity(v.numel() * T::WIDTH);
            for &x in v.data() {
                x.write_le(&mut buf);
            }
            for b in buf {
                eat(b);
            }
        }
        h
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[u8::from(tensor.needs_grad())])?;
            tensor.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let read_err = |e: std::io::Error| Error::Data(format!("param set read failed: {e}"));
        let mut n4 = [0u8; 4];
        r.read_exact(&mut n4).map_err(read_err)?;
        let count = u32::from_le_bytes(n4) as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let mut l2 = [0u8; 2];
            r.read_exact(&mut l2).map_err(read_err)?;
            let mut name = vec![0u8; u16::from_le_bytes(l2) as usize];
            r.read_exact(&mut name).map_err(read_err)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Data("param name is not utf-8".into()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(read_err)?;
            let tensor = Tensor::<T>::read_from(r)?.requires_grad(flag[0] == 1);
            entries.insert(name, tensor);
        }
        Ok(ParamSet { entries })
    }
}

/// Graph leaf cache so each named parameter enters a graph exactly once.
pub type VarCache = BTreeMap<String, Var>;

/// Leaf var for `name`, inserting it into the graph on first use.
pub fn bind_var<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cache: &mut VarCache,
    name: &str,
) -> Result<Var> {
    if let Some(&v) = cache.get(name) {
        return Ok(v);
    }
    let v = g.leaf(params.get(name)?.clone());
    cache.insert(name.to_string(), v);
    Ok(v)
}
