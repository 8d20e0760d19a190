//! Length-bucketed batching under a size budget.

use rand::seq::SliceRandom;

use crate::rng::{self, BATCHING_STREAM};

/// Batches for one pass over samples of the given `lengths`.
///
/// Samples are shuffled, stably sorted by length so that similar lengths sit
/// together, packed greedily until adding the next one would exceed
/// `budget`, and the batches are shuffled again. A sample longer than the
/// budget gets a batch of its own.
pub fn plan_epoch(lengths: &[usize], budget: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut r = rng::stream(seed, BATCHING_STREAM, epoch);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut r);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = 0;
    for i in order {
        if !cur.is_empty() && used + lengths[i] > budget {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += lengths[i];
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(&mut r);
    batches
}

/// Endless batch sequence: epoch plans concatenated.
#[derive(Clone, Debug)]
pub struct BatchStream {
    lengths: Vec<usize>,
    budget: usize,
    seed: u64,
    epoch: u64,
    position: usize,
    plan: Vec<Vec<usize>>,
}

impl BatchStream {
    pub fn new(lengths: Vec<usize>, budget: usize, seed: u64) -> Self {
        Self::at(lengths, budget, seed, 0, 0)
    }

    /// Resumes at batch `position` of `epoch`.
    pub fn at(lengths: Vec<usize>, budget: usize, seed: u64, epoch: u64, position: usize) -> Self {
        let plan = plan_epoch(&lengths, budget, seed, epoch);
        Self {
            lengths,
            budget,
            seed,
            epoch,
            position,
            plan,
        }
    }

    /// `(epoch, position)` of the next batch.
    pub fn cursor(&self) -> (u64, usize) {
        (self.epoch, self.position)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.position >= self.plan.len() {
            self.epoch += 1;
            self.position = 0;
            self.plan = plan_epoch(&self.lengths, self.budget, self.seed, self.epoch);
        }
        self.position += 1;
        self.plan[self.position - 1].clone()
    }
}
