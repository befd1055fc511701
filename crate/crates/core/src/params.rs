//! Named parameter storage and the `VSTT` tensor container.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"VSTT";
pub const TENSOR_VERSION: u8 = 1;

pub type ParamId = usize;

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
}

/// Flat, ordered collection of named trainable tensors with gradient slots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = self.entries.len();
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            grad,
            trainable: true,
        });
        Ok(id)
    }

    /// Adds a tensor with i.i.d. `N(0, std²)` entries.
    pub fn add_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.entries.len()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id].trainable = trainable;
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries.iter_mut().for_each(|e| e.trainable = trainable);
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.entries[id].grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Gradient norm over parameters whose names start with `prefix`.
    pub fn grad_norm_prefix(&self, prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Exact equality of names, shapes and value bits.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = self
            .entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value))
            .collect();
        write_tensors(w, &named)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in read_tensors(r)? {
            store.add(name, t)?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(BufReader::new(f))
    }

    /// Replaces values of `self` with same-named tensors from `other`;
    /// every parameter must be present with a matching shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let id = other
                .id(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", e.name)))?;
            let v = other.value(id);
            if v.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    v.shape(),
                    e.value.shape()
                )));
            }
            e.value = v.clone();
        }
        Ok(())
    }
}

/// Writes named tensors in the `VSTT` layout: magic, version byte, entry
/// count (u64), then per entry a length-prefixed UTF-8 name, rank (u32),
/// extents (u64 each) and raw values (f64), all little-endian.
pub fn write_tensors<W: Write>(w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    write_tensors_with_magic(w, TENSOR_MAGIC, tensors)
}

pub(crate) fn write_tensors_with_magic<W: Write>(w: W, magic: &[u8; 4], tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut out = Writer::new(w);
    out.header(magic, TENSOR_VERSION)?;
    out.u64(tensors.len() as u64)?;
    for (name, t) in tensors {
        out.str(name)?;
        out.u32(t.rank() as u32)?;
        for &d in t.shape() {
            out.u64(d as u64)?;
        }
        out.f64s(t.data())?;
    }
    out.finish()?;
    Ok(())
}

pub fn read_tensors<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    read_tensors_with_magic(r, TENSOR_MAGIC, "tensor container")
}

pub(crate) fn read_tensors_with_magic<R: Read>(
    r: R,
    magic: &[u8; 4],
    what: &'static str,
) -> Result<Vec<(String, Tensor)>> {
    let mut input = Reader::new(r, what);
    input.header(magic, TENSOR_VERSION)?;
    let n = input.count(1 << 24)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = input.str()?;
        let rank = input.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("{what}: tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(input.count(1 << 32)?);
        }
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = match count {
            Some(c) if c <= 1 << 32 => c,
            _ => return Err(Error::Checkpoint(format!("{what}: tensor `{name}` too large"))),
        };
        let data = input.f64s(count)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push((name, t));
    }
    input.expect_eof()?;
    Ok(out)
}
