use std::sync::Arc;

use numcore::{RngStream, Tensor};

use super::history::History;
use crate::error::{check_dim, invalid, Result};

/// One environment step as seen by the learner. `history` is the window the
/// actor saw before choosing `action`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub local: Vec<f64>,
    pub privileged: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_local: Vec<f64>,
    pub next_privileged: Vec<f64>,
    pub history: Arc<[f64]>,
    pub history_full: bool,
    /// True terminal state (no bootstrap). Time-limit ends are not terminal.
    pub terminal: bool,
}

/// Fixed-capacity FIFO ring.
#[derive(Clone, Debug)]
pub struct Ring<T> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
}

impl<T> Ring<T> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: Vec::new(), next: 0 }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    /// Items from oldest to newest.
    pub fn iter_ordered(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(self.items[..split].iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub local: usize,
    pub privileged: usize,
    pub action: usize,
    pub k: usize,
}

impl Dims {
    pub fn history_len(&self) -> usize {
        self.k * (self.local + self.action)
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub local: Tensor,
    pub privileged: Tensor,
    pub action: Tensor,
    pub reward: Tensor,
    pub next_local: Tensor,
    pub next_privileged: Tensor,
    pub history: Tensor,
    pub next_history: Tensor,
    pub not_done: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct IbBatch {
    pub history: Tensor,
    pub privileged: Tensor,
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Tensor {
    let data: Vec<f64> = rows.flatten().collect();
    let n = if width == 0 { 0 } else { data.len() / width };
    Tensor::new(vec![n, width], data).expect("rows have the declared width")
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    dims: Dims,
    ring: Ring<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dims: Dims) -> Self {
        Self { dims, ring: Ring::new(capacity) }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        self.ring.get(i)
    }

    pub fn iter_ordered(&self) -> impl Iterator<Item = &Transition> {
        self.ring.iter_ordered()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        let d = self.dims;
        check_dim("transition local state", d.local, t.local.len())?;
        check_dim("transition next local state", d.local, t.next_local.len())?;
        check_dim("transition privileged state", d.privileged, t.privileged.len())?;
        check_dim("transition next privileged state", d.privileged, t.next_privileged.len())?;
        check_dim("transition action", d.action, t.action.len())?;
        check_dim("transition history", d.history_len(), t.history.len())?;
        self.ring.push(t);
        Ok(())
    }

    pub fn sample_indices(&self, n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
        if self.is_empty() || n == 0 {
            return Err(invalid("replay sample", "empty buffer or batch"));
        }
        Ok((0..n).map(|_| rng.index(self.len())).collect())
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let d = self.dims;
        let items: Vec<&Transition> = idx.iter().map(|&i| self.ring.get(i)).collect();
        Batch {
            local: stack(items.iter().map(|t| t.local.clone()), d.local),
            privileged: stack(items.iter().map(|t| t.privileged.clone()), d.privileged),
            action: stack(items.iter().map(|t| t.action.clone()), d.action),
            reward: stack(items.iter().map(|t| vec![t.reward]), 1),
            next_local: stack(items.iter().map(|t| t.next_local.clone()), d.local),
            next_privileged: stack(items.iter().map(|t| t.next_privileged.clone()), d.privileged),
            history: stack(items.iter().map(|t| t.history.to_vec()), d.history_len()),
            next_history: stack(
                items.iter().map(|t| History::shifted(&t.history, d.local, &t.action, &t.next_local)),
                d.history_len(),
            ),
            not_done: stack(items.iter().map(|t| vec![if t.terminal { 0.0 } else { 1.0 }]), 1),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Batch> {
        let idx = self.sample_indices(n, rng)?;
        Ok(self.batch(&idx))
    }
}

/// (history, privilege) pairs from full-length histories only.
#[derive(Clone, Debug)]
pub struct IbBuffer {
    dims: Dims,
    ring: Ring<(Arc<[f64]>, Vec<f64>)>,
}

impl IbBuffer {
    pub fn new(capacity: usize, dims: Dims) -> Self {
        Self { dims, ring: Ring::new(capacity) }
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn get(&self, i: usize) -> &(Arc<[f64]>, Vec<f64>) {
        self.ring.get(i)
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<IbBatch> {
        if self.is_empty() || n == 0 {
            return Err(invalid("IB sample", "empty buffer or batch"));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.index(self.len())).collect();
        let d = self.dims;
        Ok(IbBatch {
            history: stack(idx.iter().map(|&i| self.ring.get(i).0.to_vec()), d.history_len()),
            privileged: stack(idx.iter().map(|&i| self.ring.get(i).1.clone()), d.privileged),
        })
    }
}

/// Stores a transition; the IB buffer only sees full-length histories.
pub fn push_step(replay: &mut ReplayBuffer, ib: &mut IbBuffer, t: Transition) -> Result<()> {
    let pair = t.history_full.then(|| (Arc::clone(&t.history), t.privileged.clone()));
    replay.push(t)?;
    if let Some(p) = pair {
        ib.ring.push(p);
    }
    Ok(())
}
