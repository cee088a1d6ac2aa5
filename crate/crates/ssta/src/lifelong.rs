//! Bounded replay buffers for online continual training.
//!
//! Two storage strategies over a store of at most `D` samples:
//! sliding window (strict FIFO over the most recent samples) and
//! interesting data (keep a sample only when its gradient norm exceeds
//! the running mean of every gradient norm seen so far, stored or not).

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("gradient norm must be nonnegative, got {0}")]
pub struct NegativeNorm(pub f64);

#[derive(Debug, Error)]
pub enum DrawError {
    #[error("cannot draw a batch from an empty replay buffer")]
    Empty,
}

/// What to drop when an interesting-data buffer overflows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvictionPolicy {
    /// Drop the stored entry with the smallest recorded norm (default for
    /// interesting data: keeps the most informative samples).
    SmallestNorm,
    /// Drop the oldest entry.
    Fifo,
}

#[derive(Clone, Debug)]
pub struct Entry<S> {
    /// Monotonic arrival counter.
    pub id: u64,
    pub sample: S,
    /// Recorded gradient norm; `None` for sliding-window entries.
    pub norm: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer<S> {
    capacity: usize,
    eviction: EvictionPolicy,
    entries: VecDeque<Entry<S>>,
    next_id: u64,
    norm_sum: f64,
    norm_count: u64,
}

impl<S> ReplayBuffer<S> {
    pub fn new(capacity: usize, eviction: EvictionPolicy) -> Self {
        ReplayBuffer {
            capacity,
            eviction,
            entries: VecDeque::new(),
            next_id: 0,
            norm_sum: 0.0,
            norm_count: 0,
        }
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

    pub fn entries(&self) -> impl Iterator<Item = &Entry<S>> {
        self.entries.iter()
    }

    /// Mean of every norm ever offered (not only stored ones); 0 before
    /// the first offer.
    pub fn running_mean(&self) -> f64 {
        if self.norm_count == 0 {
            0.0
        } else {
            self.norm_sum / self.norm_count as f64
        }
    }

    pub fn norms_seen(&self) -> u64 {
        self.norm_count
    }

    /// Sliding-window offer: append, evicting the oldest beyond capacity.
    pub fn sw_offer(&mut self, sample: S) {
        self.entries.push_back(Entry { id: self.next_id, sample, norm: None });
        self.next_id += 1;
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    /// Interesting-data offer: store iff the norm strictly exceeds the
    /// running mean over all previously seen norms (defined as 0 for an
    /// empty history). The mean updates with every offer either way.
    /// Returns whether the sample was stored.
    pub fn id_offer(&mut self, sample: S, grad_norm: f64) -> Result<bool, NegativeNorm> {
        if grad_norm < 0.0 || !grad_norm.is_finite() {
            return Err(NegativeNorm(grad_norm));
        }
        let pre_mean = self.running_mean();
        let interesting = grad_norm > pre_mean;
        self.norm_sum += grad_norm;
        self.norm_count += 1;
        if !interesting || self.capacity == 0 {
            return Ok(false);
        }
        self.entries.push_back(Entry { id: self.next_id, sample, norm: Some(grad_norm) });
        self.next_id += 1;
        while self.entries.len() > self.capacity {
            match self.eviction {
                EvictionPolicy::Fifo => {
                    self.entries.pop_front();
                }
                EvictionPolicy::SmallestNorm => {
                    let victim = self
                        .entries
                        .iter()
                        .enumerate()
                        .min_by(|(_, a), (_, b)| {
                            let an = a.norm.unwrap_or(f64::NEG_INFINITY);
                            let bn = b.norm.unwrap_or(f64::NEG_INFINITY);
                            an.partial_cmp(&bn).unwrap().then(a.id.cmp(&b.id))
                        })
                        .map(|(i, _)| i)
                        .expect("buffer is non-empty here");
                    self.entries.remove(victim);
                }
            }
        }
        Ok(true)
    }

    /// A training mini-batch of exactly `batch` samples: the newest entry
    /// always included, the rest drawn uniformly without replacement
    /// (with replacement once `batch` exceeds the stored count), in a
    /// seeded shuffled order.
    pub fn draw_batch<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<&S>, DrawError> {
        if self.entries.is_empty() {
            return Err(DrawError::Empty);
        }
        if batch == 0 {
            return Ok(Vec::new());
        }
        let n = self.entries.len();
        let newest = n - 1;
        let mut picks: Vec<usize> = vec![newest];
        if batch <= n {
            let mut others: Vec<usize> = (0..newest).collect();
            others.shuffle(rng);
            picks.extend(others.into_iter().take(batch - 1));
        } else {
            for _ in 0..batch - 1 {
                picks.push(rng.gen_range(0..n));
            }
        }
        picks.shuffle(rng);
        Ok(picks.into_iter().map(|i| &self.entries[i].sample).collect())
    }
}
