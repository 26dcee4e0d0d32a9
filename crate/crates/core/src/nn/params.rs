use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One named tensor slot. Non-trainable slots hold buffers such as
/// batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameters and buffers.
///
/// Values are kept exactly representable in `f32` so that the on-disk form
/// (little-endian `f32`) reproduces the in-memory model bit for bit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

pub(crate) fn round_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, trainable: bool) -> usize {
        round_f32(tensor.data_mut());
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    /// Add a trainable tensor drawn from N(0, std²).
    pub fn add_normal(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> usize {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::new(shape, data), true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    /// Number of trainable scalars among `ids`.
    pub fn count(&self, ids: impl IntoIterator<Item = usize>) -> usize {
        ids.into_iter()
            .filter(|&i| self.entries[i].trainable)
            .map(|i| self.entries[i].tensor.len())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count(0..self.entries.len())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    /// Serialize tensor data in declared order as little-endian `f32`.
    pub fn write_f32(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.tensor.len() as u64).to_le_bytes());
            for &v in e.tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }

    /// Overwrite tensor data from [`ParamStore::write_f32`] output. Shapes must
    /// already match (the store is rebuilt from its architecture first).
    pub fn read_f32(&mut self, bytes: &mut &[u8]) -> Result<()> {
        let count = read_u32(bytes)? as usize;
        if count != self.entries.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: file has {count}, architecture has {}",
                self.entries.len()
            )));
        }
        for e in &mut self.entries {
            let n = read_u64(bytes)? as usize;
            if n != e.tensor.len() {
                return Err(Error::Format(format!(
                    "tensor `{}` has {n} elements on disk, expected {}",
                    e.name,
                    e.tensor.len()
                )));
            }
            let raw = take(bytes, 4 * n)?;
            for (dst, chunk) in e.tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
        }
        Ok(())
    }
}

pub(crate) fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!(
            "unexpected end of data: wanted {n} bytes, {} left",
            bytes.len()
        )));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub(crate) fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().unwrap()))
}

pub(crate) fn read_u64(bytes: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, 8)?.try_into().unwrap()))
}

pub(crate) fn read_f64(bytes: &mut &[u8]) -> Result<f64> {
    Ok(f64::from_le_bytes(take(bytes, 8)?.try_into().unwrap()))
}
