use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::corpus::SessionPair;
use crate::error::{Error, Result};

/// Endless stream of batches (as indices into the pair list). Every batch
/// holds pairs from pairwise-distinct sessions so the other pairs are valid
/// in-batch negatives. Each epoch is a fresh shuffle in which a pair is used
/// at most once; pairs that cannot fill a whole batch are dropped.
pub struct BatchSampler {
    session_of: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
    queue: Vec<usize>,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(pairs: &[SessionPair], batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut keys: HashMap<&str, usize> = HashMap::new();
        let session_of: Vec<usize> = pairs
            .iter()
            .map(|p| {
                let next = keys.len();
                *keys.entry(p.session_id.as_str()).or_insert(next)
            })
            .collect();
        if keys.len() < batch_size {
            return Err(Error::NotEnoughSessions {
                needed: batch_size,
                available: keys.len(),
            });
        }
        Ok(BatchSampler {
            session_of,
            batch_size,
            rng,
            queue: Vec::new(),
            epoch: 0,
        })
    }

    /// Number of epochs started so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn take_batch(&mut self) -> Option<Vec<usize>> {
        let mut used = std::collections::HashSet::with_capacity(self.batch_size);
        let mut picked = Vec::with_capacity(self.batch_size);
        for (slot, &pair) in self.queue.iter().enumerate() {
            if used.insert(self.session_of[pair]) {
                picked.push(slot);
                if picked.len() == self.batch_size {
                    break;
                }
            }
        }
        if picked.len() < self.batch_size {
            return None;
        }
        let batch = picked.iter().map(|&slot| self.queue[slot]).collect();
        for &slot in picked.iter().rev() {
            self.queue.remove(slot);
        }
        Some(batch)
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if let Some(batch) = self.take_batch() {
            return Some(batch);
        }
        self.queue = (0..self.session_of.len()).collect();
        self.queue.shuffle(&mut self.rng);
        self.epoch += 1;
        self.take_batch()
    }
}

pub fn make_batches(pairs: &[SessionPair], batch_size: usize, rng: ChaCha8Rng) -> Result<BatchSampler> {
    BatchSampler::new(pairs, batch_size, rng)
}
