//! Fixed-capacity FIFO of negative keys.
//!
//! Positions are age-indexed: position 0 is the oldest stored key. Slice
//! windows refer to these positions, so their meaning does not depend on
//! where the ring buffer currently wraps.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensorgraph::Matrix;

const UNIT_TOL: f64 = 1e-9;

/// Half-open age range `[start, end)`, or everything outside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SliceWindow {
    pub start: usize,
    pub end: usize,
    pub complement: bool,
}

impl SliceWindow {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end, complement: false }
    }

    pub fn without(start: usize, end: usize) -> Self {
        Self { start, end, complement: true }
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos) != self.complement
    }

    fn validate(&self, capacity: usize) -> Result<()> {
        if self.start >= self.end || self.end > capacity {
            return Err(Error::contract(
                "negatives",
                format!("window [{}, {}) invalid for capacity {capacity}", self.start, self.end),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for SliceWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.complement {
            write!(f, "!")?;
        }
        write!(f, "{}-{}", self.start, self.end)
    }
}

impl FromStr for SliceWindow {
    type Err = Error;

    /// Parses `start-end` or `!start-end` (complement).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("slice window {s:?}: expected START-END or !START-END"));
        let (complement, body) = match s.strip_prefix('!') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (a, b) = body.split_once('-').ok_or_else(bad)?;
        let start = a.trim().parse().map_err(|_| bad())?;
        let end = b.trim().parse().map_err(|_| bad())?;
        if start >= end {
            return Err(bad());
        }
        Ok(Self { start, end, complement })
    }
}

impl TryFrom<String> for SliceWindow {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SliceWindow> for String {
    fn from(w: SliceWindow) -> Self {
        w.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    storage: Vec<f64>,
    /// Slot of the oldest entry.
    head: usize,
    filled: usize,
    init_count: usize,
}

impl NegativeQueue {
    /// Creates a queue holding `init_count` random unit vectors.
    pub fn new(capacity: usize, init_count: usize, dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("queue.capacity", "must be positive"));
        }
        if init_count > capacity {
            return Err(Error::config("queue.init_count", format!("{init_count} exceeds capacity {capacity}")));
        }
        if dim == 0 {
            return Err(Error::config("queue.dim", "must be positive"));
        }
        let mut q = Self { capacity, dim, storage: vec![0.0; capacity * dim], head: 0, filled: 0, init_count };
        let mut rng = seed::rng(seed);
        for slot in 0..init_count {
            let row = &mut q.storage[slot * dim..(slot + 1) * dim];
            loop {
                row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                    break;
                }
            }
        }
        q.filled = init_count;
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn init_count(&self) -> usize {
        self.init_count
    }

    fn slot(&self, pos: usize) -> usize {
        (self.head + pos) % self.capacity
    }

    /// Stored key at age position `pos` (0 = oldest).
    pub fn get(&self, pos: usize) -> Option<&[f64]> {
        (pos < self.filled).then(|| {
            let s = self.slot(pos);
            &self.storage[s * self.dim..(s + 1) * self.dim]
        })
    }

    /// Appends unit-norm keys newest-side, evicting the oldest entries.
    pub fn push_batch(&mut self, keys: &Matrix) -> Result<()> {
        if keys.cols() != self.dim {
            return Err(Error::contract("push_batch", format!("keys have dim {}, queue {}", keys.cols(), self.dim)));
        }
        if keys.rows() > self.capacity {
            return Err(Error::contract(
                "push_batch",
                format!("batch of {} exceeds capacity {}", keys.rows(), self.capacity),
            ));
        }
        for (i, row) in keys.row_iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::contract("push_batch", format!("key {i} has norm {norm}")));
            }
        }
        for row in keys.row_iter() {
            let slot = if self.filled < self.capacity {
                self.filled += 1;
                self.slot(self.filled - 1)
            } else {
                let s = self.head;
                self.head = (self.head + 1) % self.capacity;
                s
            };
            self.storage[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(row);
        }
        Ok(())
    }

    /// Stored keys oldest to newest, restricted to `window` when given.
    pub fn negatives(&self, window: Option<&SliceWindow>) -> Result<Matrix> {
        if let Some(w) = window {
            w.validate(self.capacity)?;
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for pos in 0..self.filled {
            if window.is_none_or(|w| w.contains(pos)) {
                data.extend_from_slice(self.get(pos).expect("pos < filled"));
                rows += 1;
            }
        }
        Ok(Matrix::new(rows, self.dim, data).expect("rows * dim values"))
    }
}
