use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;

use super::Pos;

/// Channel layout of the predator-prey occupancy tensor.
pub mod pp_channels {
    /// Predators occupy channels `0..6`, one per predator index.
    pub const PREDATOR_BASE: usize = 0;
    pub const MAX_PREDATORS: usize = 6;
    pub const PREY: usize = 6;
    pub const WALL: usize = 7;
    /// Channels `8..M` are reserved and always zero.
    pub const FIRST_RESERVED: usize = 8;
    pub const DEFAULT_CHANNELS: usize = 20;
}

/// Channel layout of the bomber occupancy tensor.
pub mod bomber_channels {
    /// Agents occupy channels `0..4`, one per agent index.
    pub const AGENT_BASE: usize = 0;
    pub const RIGID: usize = 4;
    pub const WOOD: usize = 5;
    pub const BOMB: usize = 6;
    pub const FLAME: usize = 7;
    pub const EXTRA_BOMB: usize = 8;
    pub const BLAST_POWER: usize = 9;
    /// Channels `10..M` are reserved and always zero.
    pub const FIRST_RESERVED: usize = 10;
    pub const DEFAULT_CHANNELS: usize = 30;
}

/// `D x D x M` binary occupancy grid: `cell(i, j, k) == 1` iff object kind
/// `k` is present at row `i`, column `j`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateTensor {
    d: usize,
    m: usize,
    cells: Vec<u8>,
}

impl StateTensor {
    pub fn new(d: usize, m: usize) -> Self {
        Self {
            d,
            m,
            cells: vec![0; d * d * m],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.d, self.m)
    }

    pub fn size(&self) -> usize {
        self.d
    }

    pub fn channels(&self) -> usize {
        self.m
    }

    fn idx(&self, (i, j): Pos, k: usize) -> usize {
        debug_assert!(i < self.d && j < self.d && k < self.m);
        (i * self.d + j) * self.m + k
    }

    pub fn get(&self, pos: Pos, k: usize) -> u8 {
        self.cells[self.idx(pos, k)]
    }

    pub fn set(&mut self, pos: Pos, k: usize) {
        let i = self.idx(pos, k);
        self.cells[i] = 1;
    }

    pub fn clear(&mut self, pos: Pos, k: usize) {
        let i = self.idx(pos, k);
        self.cells[i] = 0;
    }

    pub fn clear_channel(&mut self, k: usize) {
        for c in 0..self.d * self.d {
            self.cells[c * self.m + k] = 0;
        }
    }

    pub fn count_channel(&self, k: usize) -> usize {
        (0..self.d * self.d).filter(|c| self.cells[c * self.m + k] == 1).count()
    }

    pub fn ones(&self) -> usize {
        self.cells.iter().filter(|v| **v == 1).count()
    }

    /// Flat indices of the set cells, for compact storage.
    pub fn to_sparse(&self) -> SparseState {
        SparseState {
            d: self.d,
            m: self.m,
            ones: self
                .cells
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0)
                .map(|(i, _)| i as u32)
                .collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.d, self.d, self.m],
            self.cells.iter().map(|v| *v as f64).collect(),
        )
        .expect("state tensor shape")
    }

    /// Mean normalised `(row, col)` of the occupied cells of channel `k`,
    /// or `None` when the channel is empty.
    pub fn centroid(&self, k: usize) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut r, mut c) = (0.0, 0.0);
        for i in 0..self.d {
            for j in 0..self.d {
                if self.get((i, j), k) == 1 {
                    n += 1;
                    r += i as f64;
                    c += j as f64;
                }
            }
        }
        let scale = (self.d.max(2) - 1) as f64;
        (n > 0).then(|| (r / n as f64 / scale, c / n as f64 / scale))
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.d as u64).to_le_bytes());
        h.update((self.m as u64).to_le_bytes());
        h.update(&self.cells);
        hex::encode(&h.finalize()[..8])
    }
}

/// Sparse encoding of a [`StateTensor`]: only the set cells are stored.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SparseState {
    d: usize,
    m: usize,
    ones: Vec<u32>,
}

impl SparseState {
    pub fn to_dense(&self) -> StateTensor {
        let mut cells = vec![0; self.d * self.d * self.m];
        for i in &self.ones {
            cells[*i as usize] = 1;
        }
        StateTensor {
            d: self.d,
            m: self.m,
            cells,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.d, self.m)
    }
}
