//! Bucketed parameter transfer from training to generation replicas.

use std::ops::Range;

use super::model::{Layout, PolicyParams};
use super::PolicyError;

/// Contiguous ranges of at most `bucket_size` elements covering `0..len`.
pub fn bucket_ranges(len: usize, bucket_size: usize) -> Vec<Range<usize>> {
    assert!(bucket_size > 0, "bucket_size must be positive");
    (0..len.div_ceil(bucket_size)).map(|i| i * bucket_size..((i + 1) * bucket_size).min(len)).collect()
}

/// Receiving side of a sync: buckets are written into a staging buffer and
/// installed only when every element has arrived.
#[derive(Clone, Debug)]
pub struct SyncStaging {
    layout: Layout,
    version: u64,
    buffer: Vec<f64>,
    received: Vec<bool>,
}

impl SyncStaging {
    pub fn begin(current: &Layout, incoming: Layout, version: u64) -> Result<Self, PolicyError> {
        if *current != incoming {
            return Err(PolicyError::Sync(format!("layout mismatch: receiver {current:?}, sender {incoming:?}")));
        }
        let n = incoming.param_count();
        Ok(Self { layout: incoming, version, buffer: vec![0.0; n], received: vec![false; n] })
    }

    pub fn write(&mut self, offset: usize, values: &[f64]) -> Result<(), PolicyError> {
        let end = offset
            .checked_add(values.len())
            .filter(|&e| e <= self.buffer.len())
            .ok_or_else(|| PolicyError::Sync(format!("bucket {offset}+{} out of range {}", values.len(), self.buffer.len())))?;
        self.buffer[offset..end].copy_from_slice(values);
        self.received[offset..end].iter_mut().for_each(|r| *r = true);
        Ok(())
    }

    pub fn commit(self) -> Result<PolicyParams, PolicyError> {
        if let Some(missing) = self.received.iter().position(|r| !r) {
            return Err(PolicyError::Sync(format!("incomplete sync: element {missing} never received")));
        }
        Ok(PolicyParams { layout: self.layout, values: self.buffer, version: self.version })
    }
}
