use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Bounded first-in first-out store of the most recent fused chunk features.
///
/// Generic over the entry type so the same queue serves plain feature maps
/// and graph handles; every entry must share one shape.
#[derive(Debug, Clone)]
pub struct MemoryBank<T> {
    capacity: usize,
    shape: Option<Vec<usize>>,
    entries: VecDeque<T>,
}

impl<T> MemoryBank<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("memory bank depth must be at least 1"));
        }
        Ok(MemoryBank {
            capacity,
            shape: None,
            entries: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends `item` (of the given shape) and evicts the oldest entry once
    /// the bank is over capacity. Returns the evicted entry, if any.
    pub fn push(&mut self, item: T, shape: &[usize]) -> Result<Option<T>> {
        match &self.shape {
            Some(s) if s != shape => {
                return Err(Error::config(format!(
                    "memory bank holds {s:?} entries, cannot push {shape:?}"
                )))
            }
            Some(_) => {}
            None => self.shape = Some(shape.to_vec()),
        }
        self.entries.push_back(item);
        Ok(if self.entries.len() > self.capacity {
            self.entries.pop_front()
        } else {
            None
        })
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &T> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.shape = None;
    }
}

impl MemoryBank<FeatureMap> {
    /// Pushes a feature map, evicting the oldest entry when full.
    pub fn update(&mut self, f_new: FeatureMap) -> Result<Option<FeatureMap>> {
        let shape = f_new.shape().to_vec();
        self.push(f_new, &shape)
    }
}
