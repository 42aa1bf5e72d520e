//! Fixed-capacity FIFO of L2-normalized teacher embeddings.

use ndarray::ArrayView2;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

/// Capacity used with the ViT presets.
pub const PRESET_CAPACITY: usize = 65_536;
/// Capacity used with the toy preset.
pub const TOY_CAPACITY: usize = 1_024;

const MAGIC: &[u8; 8] = b"SAQUEUE\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct QueueState {
    capacity: usize,
    dim: usize,
    /// Row-major `capacity x dim`; rows at physical indices `>= fill` (before
    /// the first wrap) are zero.
    buffer: Vec<f32>,
    cursor: usize,
    fill: usize,
}

/// Result of [`QueueState::top_k`]: per query row, physical indices and
/// similarities in descending similarity order.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub indices: Vec<Vec<usize>>,
    pub sims: Vec<Vec<f64>>,
}

impl QueueState {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "queue needs positive capacity and dim, got K={capacity}, D={dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            buffer: vec![0.0; capacity * dim],
            cursor: 0,
            fill: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn row(&self, physical: usize) -> &[f32] {
        &self.buffer[physical * self.dim..(physical + 1) * self.dim]
    }

    /// Physical indices from oldest to newest.
    pub fn fifo_order(&self) -> Vec<usize> {
        let start = (self.cursor + self.capacity - self.fill) % self.capacity;
        (0..self.fill)
            .map(|i| (start + i) % self.capacity)
            .collect()
    }

    /// Appends rows in order, normalizing each and evicting the oldest entries
    /// once full.
    pub fn push_batch(&mut self, z: ArrayView2<f64>) -> Result<()> {
        if z.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: z.ncols(),
            });
        }
        if z.nrows() > self.capacity {
            return Err(Error::Config(format!(
                "batch of {} rows exceeds queue capacity {}",
                z.nrows(),
                self.capacity
            )));
        }
        let mut norms = Vec::with_capacity(z.nrows());
        for (i, row) in z.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm > crate::losses::DEGENERATE_NORM) {
                return Err(Error::DegenerateEmbedding { row: i, norm });
            }
            norms.push(norm);
        }
        for (row, norm) in z.rows().into_iter().zip(norms) {
            let dst = &mut self.buffer[self.cursor * self.dim..(self.cursor + 1) * self.dim];
            for (d, &v) in dst.iter_mut().zip(row.iter()) {
                *d = (v / norm) as f32;
            }
            self.cursor = (self.cursor + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// For each row of `z_ref` (normalized internally), the `min(k, fill)`
    /// stored entries with the largest dot product. Ties go to the lower
    /// physical index.
    pub fn top_k(&self, z_ref: ArrayView2<f64>, k: usize) -> Result<TopK> {
        if self.fill == 0 {
            return Err(Error::QueueEmpty);
        }
        if z_ref.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: z_ref.ncols(),
            });
        }
        let k_eff = k.min(self.fill);
        let stored = self.stored_indices();
        let mut indices = Vec::with_capacity(z_ref.nrows());
        let mut sims = Vec::with_capacity(z_ref.nrows());
        for (i, row) in z_ref.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm > crate::losses::DEGENERATE_NORM) {
                return Err(Error::DegenerateEmbedding { row: i, norm });
            }
            let mut scored: Vec<(f64, usize)> = stored
                .iter()
                .map(|&j| {
                    let dot: f64 = self
                        .row(j)
                        .iter()
                        .zip(row.iter())
                        .map(|(&q, &r)| q as f64 * r)
                        .sum();
                    (dot / norm, j)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.truncate(k_eff);
            indices.push(scored.iter().map(|s| s.1).collect());
            sims.push(scored.iter().map(|s| s.0).collect());
        }
        Ok(TopK { indices, sims })
    }

    /// Physical indices currently holding data, ascending.
    fn stored_indices(&self) -> Vec<usize> {
        if self.fill == self.capacity {
            (0..self.capacity).collect()
        } else {
            // Before the first wrap the occupied prefix is contiguous.
            (0..self.fill).collect()
        }
    }

    /// Versioned binary blob; layout documented in `docs/formats.md`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.capacity as u64);
        w.u64(self.dim as u64);
        w.u64(self.cursor as u64);
        w.u64(self.fill as u64);
        w.f32_slice(&self.buffer);
        w.finish_with_digest()
    }

    /// Restores a blob written by [`QueueState::to_bytes`]. When `expected_dim`
    /// is given, a blob of any other width is rejected.
    pub fn from_bytes(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self> {
        let mut r = Reader::with_digest(bytes, "queue")?;
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "queue blob version {version}, expected {VERSION}"
            )));
        }
        let capacity = r.u64()? as usize;
        let dim = r.u64()? as usize;
        if let Some(expected) = expected_dim {
            if dim != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    found: dim,
                });
            }
        }
        let cursor = r.u64()? as usize;
        let fill = r.u64()? as usize;
        if capacity == 0 || dim == 0 || cursor >= capacity || fill > capacity {
            return Err(Error::Checkpoint(format!(
                "queue header inconsistent: K={capacity} D={dim} cursor={cursor} fill={fill}"
            )));
        }
        let buffer = r.f32_vec(capacity * dim)?;
        r.finish()?;
        Ok(Self {
            capacity,
            dim,
            buffer,
            cursor,
            fill,
        })
    }
}
