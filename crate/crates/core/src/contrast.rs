//! Momentum encoder, negative queue and InfoNCE loss.

use crate::autodiff::Tensor;
use crate::encoder::ParamSet;
use crate::error::{CastError, Result};

/// Fixed-capacity FIFO of key embeddings used as negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    storage: Vec<f32>,
    cursor: usize,
    fill: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(CastError::InvalidArgument(format!(
                "queue needs positive capacity and dimension, got {capacity}x{dim}"
            )));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            storage: vec![0.0; capacity * dim],
            cursor: 0,
            fill: 0,
        })
    }

    /// Rebuilds a queue from its serialized parts.
    pub fn from_parts(capacity: usize, dim: usize, storage: Vec<f32>, cursor: usize, fill: usize) -> Result<Self> {
        if storage.len() != capacity * dim || cursor >= capacity.max(1) || fill > capacity {
            return Err(CastError::InvalidArgument(format!(
                "inconsistent queue state: {} values for {capacity}x{dim}, cursor {cursor}, fill {fill}",
                storage.len()
            )));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            storage,
            cursor,
            fill,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn storage(&self) -> &[f32] {
        &self.storage
    }

    /// Writes each key at the cursor, overwriting the oldest entry once full.
    pub fn enqueue(&mut self, keys: &[Tensor]) -> Result<()> {
        if let Some(bad) = keys.iter().find(|k| k.numel() != self.dim) {
            return Err(CastError::shape(
                "enqueue",
                format!("key of {} values offered to a queue of dimension {}", bad.numel(), self.dim),
            ));
        }
        for k in keys {
            let start = self.cursor * self.dim;
            self.storage[start..start + self.dim].copy_from_slice(k.data());
            self.cursor = (self.cursor + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored keys from oldest to newest.
    pub fn contents(&self) -> Vec<&[f32]> {
        let start = if self.fill < self.capacity { 0 } else { self.cursor };
        (0..self.fill)
            .map(|i| {
                let slot = (start + i) % self.capacity;
                &self.storage[slot * self.dim..(slot + 1) * self.dim]
            })
            .collect()
    }

    /// Filled entries as a `[len, dim]` matrix in storage order.
    pub fn as_matrix(&self) -> Tensor {
        // while warming up the filled slots are exactly the first `fill`
        Tensor::new(&[self.fill, self.dim], self.storage[..self.fill * self.dim].to_vec())
            .expect("queue layout")
    }
}

/// `key ← m · key + (1 − m) · query`, elementwise.
pub fn momentum_update(key: &mut ParamSet, query: &ParamSet, m: f32) -> Result<()> {
    if !key.same_layout(query) {
        return Err(CastError::shape("momentum_update", "query and key parameter sets differ in layout"));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(CastError::InvalidArgument(format!("momentum {m} outside [0, 1]")));
    }
    let query_tensors = query.tensors().to_vec();
    for (k, q) in key.tensors_mut().iter_mut().zip(&query_tensors) {
        let data = k
            .data()
            .iter()
            .zip(q.data())
            .map(|(&kv, &qv)| m * kv + (1.0 - m) * qv)
            .collect();
        *k = Tensor::new(k.shape(), data)?;
    }
    Ok(())
}

/// Trainable query parameters and their momentum copy.
#[derive(Clone, Debug)]
pub struct MomentumPair {
    pub query: ParamSet,
    pub key: ParamSet,
    pub m: f32,
}

impl MomentumPair {
    /// The key network starts as an exact copy of the query network.
    pub fn new(query: ParamSet, m: f32) -> Self {
        MomentumPair {
            key: query.clone(),
            query,
            m,
        }
    }

    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&mut self.key, &self.query, self.m)
    }
}

/// InfoNCE over one positive and the queue's negatives:
/// `−log( exp(q·k₊/τ) / Σᵢ exp(q·kᵢ/τ) )`.
///
/// `k_pos` and the queue are treated as constants; only `q` receives
/// gradient.
pub fn info_nce(q: &Tensor, k_pos: &Tensor, queue: &NegativeQueue, tau: f32) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(CastError::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if queue.is_empty() {
        return Err(CastError::InvalidArgument("negative queue is empty".into()));
    }
    if q.numel() != queue.dim() || k_pos.numel() != queue.dim() {
        return Err(CastError::shape(
            "info_nce",
            format!("q {:?} / k {:?} vs queue dimension {}", q.shape(), k_pos.shape(), queue.dim()),
        ));
    }
    let d = queue.dim();
    let q = q.reshape(&[d])?;
    let inv_tau = 1.0 / tau;
    let pos = q.dot(&k_pos.detach().reshape(&[d])?)?.scale(inv_tau);
    let neg = queue.as_matrix().matmul(&q.reshape(&[d, 1])?)?.scale(inv_tau);

    let shift = neg.data().iter().copied().fold(pos.item()?, f32::max);
    let denom = pos.add_scalar(-shift).exp().add(&neg.add_scalar(-shift).exp().sum())?;
    // ln(denom) + (shift − pos): the bracket is exactly 0 when the positive is the max
    denom.ln().sub(&pos.add_scalar(-shift))
}
