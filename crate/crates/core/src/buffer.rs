//! Bounded FIFO replay buffer with per-entry sampling counters.
//!
//! Batches are drawn without replacement; at every draw an entry's weight
//! is `1 / (1 + count)`, so rarely used tuples are favoured. Counters are
//! bumped once per batch membership, after the batch is chosen.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::corpus::{PreferenceTuple, TokenSeq};
use crate::error::{Result, SapoError};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub tuple: PreferenceTuple,
    pub count: u64,
    pub insert_index: u64,
}

impl BufferEntry {
    pub fn weight(&self) -> f64 {
        1.0 / (1.0 + self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BufferStats {
    pub size: usize,
    pub mean_count: Option<f64>,
    pub max_count: Option<u64>,
    pub oldest_insert_index: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: VecDeque<BufferEntry>,
    capacity: usize,
    next_index: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(SapoError::Config("buffer capacity must be >= 1".into()));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
            next_index: 0,
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

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    /// Appends with count 0, evicting the oldest entry when over capacity.
    pub fn push(&mut self, tuple: PreferenceTuple) {
        self.entries.push_back(BufferEntry {
            tuple,
            count: 0,
            insert_index: self.next_index,
        });
        self.next_index += 1;
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    /// Draws `min(n, len)` distinct entries and increments their counters.
    ///
    /// Returned tuples are in FIFO order regardless of draw order.
    pub fn sample_batch(&mut self, n: usize, seed: u64) -> Result<Vec<PreferenceTuple>> {
        let picked = self.sample_positions(n, seed)?;
        Ok(picked
            .into_iter()
            .map(|pos| {
                let e = &mut self.entries[pos];
                e.count += 1;
                e.tuple.clone()
            })
            .collect())
    }

    /// Positions chosen by [`ReplayBuffer::sample_batch`], ascending, without touching counters.
    pub fn sample_positions(&self, n: usize, seed: u64) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(SapoError::BufferEmpty);
        }
        let k = n.min(self.entries.len());
        let mut rng = rng::stream(seed);
        let mut remaining: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.weight()))
            .collect();
        let mut picked = Vec::with_capacity(k);
        for _ in 0..k {
            let total: f64 = remaining.iter().map(|(_, w)| w).sum();
            let u = rng.gen::<f64>() * total;
            let mut cum = 0.0;
            let mut chosen = remaining.len() - 1;
            for (slot, &(_, w)) in remaining.iter().enumerate() {
                cum += w;
                if u < cum {
                    chosen = slot;
                    break;
                }
            }
            picked.push(remaining.remove(chosen).0);
        }
        picked.sort_unstable();
        Ok(picked)
    }

    pub fn stats(&self) -> BufferStats {
        if self.entries.is_empty() {
            return BufferStats {
                size: 0,
                mean_count: None,
                max_count: None,
                oldest_insert_index: None,
            };
        }
        let total: u64 = self.entries.iter().map(|e| e.count).sum();
        BufferStats {
            size: self.entries.len(),
            mean_count: Some(total as f64 / self.entries.len() as f64),
            max_count: self.entries.iter().map(|e| e.count).max(),
            oldest_insert_index: self.entries.front().map(|e| e.insert_index),
        }
    }

    /// Debug snapshot: one JSON object per entry in FIFO order.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            id: String,
            prompt: &'a TokenSeq,
            chosen: &'a TokenSeq,
            rejected: &'a TokenSeq,
            count: u64,
        }
        let file = File::create(path).map_err(|e| SapoError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let row = Row {
                id: e.insert_index.to_string(),
                prompt: &e.tuple.prompt,
                chosen: &e.tuple.chosen,
                rejected: &e.tuple.rejected,
                count: e.count,
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n").map_err(|e| SapoError::io(path, e))?;
        }
        w.flush().map_err(|e| SapoError::io(path, e))
    }
}
