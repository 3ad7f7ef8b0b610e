use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{NepError, Result};
use crate::nn::Real;

/// Named tensors packed into one contiguous buffer, so optimizers and
/// gradient buffers can treat the whole model as a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
    data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl<T: Real> ParamStore<T> {
    /// Zero-filled store with tensors in the given order.
    pub fn zeros(specs: &[(String, Vec<usize>)]) -> Result<Self> {
        let mut entries = Vec::with_capacity(specs.len());
        let mut by_name = BTreeMap::new();
        let mut offset = 0;
        for (name, dims) in specs {
            if by_name.insert(name.clone(), entries.len()).is_some() {
                return Err(NepError::Config(format!("duplicate tensor name {name}")));
            }
            let e = ParamEntry { name: name.clone(), dims: dims.clone(), offset };
            offset += e.len();
            entries.push(e);
        }
        Ok(Self { entries, by_name, data: vec![T::zero(); offset] })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entry(name).map(|e| &self.data[e.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.entry(name)?.range();
        Some(&mut self.data[r])
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(name, element count)` per tensor, in storage order.
    pub fn counts(&self) -> Vec<(String, usize)> {
        self.entries.iter().map(|e| (e.name.clone(), e.len())).collect()
    }

    /// Copies every same-named, same-shaped tensor from `other`. Returns the names copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> Vec<String> {
        let mut copied = Vec::new();
        for e in &self.entries {
            if let Some(src) = other.entry(&e.name) {
                if src.dims == e.dims {
                    self.data[e.range()].copy_from_slice(&other.data[src.range()]);
                    copied.push(e.name.clone());
                }
            }
        }
        copied
    }
}
