use std::collections::VecDeque;

use crate::autodiff::RngStream;
use crate::error::{MagnetError, Result};

/// Fixed-capacity FIFO store with uniform sampling without replacement.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
    pushed: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
            pushed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of items ever pushed.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    /// Appends, evicting the oldest item when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
        self.pushed += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `n` distinct stored items, uniformly at random.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Vec<&T>> {
        if n > self.items.len() {
            return Err(MagnetError::Input(format!(
                "cannot sample {n} items from a buffer holding {}",
                self.items.len()
            )));
        }
        // partial Fisher-Yates over the index range
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        for i in 0..n {
            let j = i + rng.below(idx.len() - i);
            idx.swap(i, j);
        }
        Ok(idx[..n].iter().map(|i| &self.items[*i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(i);
        }
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(b.pushed(), 5);
    }

    #[test]
    fn sample_is_distinct_and_bounded() {
        let mut b = ReplayBuffer::new(10);
        for i in 0..10 {
            b.push(i);
        }
        let mut rng = RngStream::new(0, "r");
        let mut s: Vec<i32> = b.sample(10, &mut rng).unwrap().into_iter().copied().collect();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert!(b.sample(11, &mut rng).is_err());
    }
}
