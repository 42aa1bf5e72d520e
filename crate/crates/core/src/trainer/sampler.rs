//! Round-robin modality sampling over three paired datasets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::ModalityId;

/// Cycles NIR, SWIR, LWIR one batch at a time. A modality whose batches are
/// used up is skipped for the rest of the epoch; the last batch of each
/// modality may be partial.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRobinSampler {
    seed: u64,
    batch_size: usize,
    sizes: [usize; 3],
    epoch: u64,
    /// Samples already drawn this epoch, per modality.
    drawn: [usize; 3],
    /// Position in the NIR, SWIR, LWIR cycle of the next draw.
    cursor: usize,
    orders: [Vec<usize>; 3],
}

pub(crate) fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const MAGIC: &[u8; 8] = b"SASAMPL\0";
const VERSION: u32 = 1;

impl RoundRobinSampler {
    /// `sizes` are sample counts for NIR, SWIR and LWIR.
    pub fn new(sizes: [usize; 3], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if sizes.iter().all(|&n| n == 0) {
            return Err(Error::Config(
                "round-robin sampler needs at least one non-empty dataset".into(),
            ));
        }
        let mut s = Self {
            seed,
            batch_size,
            sizes,
            epoch: 0,
            drawn: [0; 3],
            cursor: 0,
            orders: Default::default(),
        };
        s.start_epoch(0);
        Ok(s)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn sizes(&self) -> [usize; 3] {
        self.sizes
    }

    /// Batches per modality in one epoch.
    pub fn batches_per_modality(&self) -> [usize; 3] {
        self.sizes.map(|n| n.div_ceil(self.batch_size))
    }

    /// Total batches in one epoch, summed over modalities.
    pub fn epoch_len(&self) -> usize {
        self.batches_per_modality().iter().sum()
    }

    /// True once every modality has been fully drawn this epoch.
    pub fn epoch_done(&self) -> bool {
        self.drawn == self.sizes
    }

    /// Resets to the beginning of `epoch` with that epoch's shuffle.
    pub fn start_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
        self.drawn = [0; 3];
        self.cursor = 0;
        for (i, n) in self.sizes.iter().enumerate() {
            let mut order: Vec<usize> = (0..*n).collect();
            let key = mix(mix(mix(self.seed) ^ epoch) ^ (i as u64 + 1));
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
            self.orders[i] = order;
        }
    }

    /// Next modality and the dataset indices of its batch, or `None` once
    /// every modality is exhausted for this epoch.
    pub fn next_batch(&mut self) -> Option<(ModalityId, Vec<usize>)> {
        for _ in 0..3 {
            let i = self.cursor;
            self.cursor = (self.cursor + 1) % 3;
            let start = self.drawn[i];
            if start < self.sizes[i] {
                let end = (start + self.batch_size).min(self.sizes[i]);
                self.drawn[i] = end;
                return Some((
                    ModalityId::MULTISPECTRAL[i],
                    self.orders[i][start..end].to_vec(),
                ));
            }
        }
        None
    }

    pub fn write(&self, w: &mut Writer) {
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.seed);
        w.u64(self.batch_size as u64);
        for n in self.sizes {
            w.u64(n as u64);
        }
        w.u64(self.epoch);
        for d in self.drawn {
            w.u64(d as u64);
        }
        w.u64(self.cursor as u64);
    }

    pub fn read(r: &mut Reader) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "sampler segment version {version}, expected {VERSION}"
            )));
        }
        let seed = r.u64()?;
        let batch_size = r.u64()? as usize;
        let sizes = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
        let epoch = r.u64()?;
        let drawn = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
        let cursor = r.u64()? as usize;
        if cursor > 2 || drawn.iter().zip(sizes).any(|(&d, n)| d > n) {
            return Err(Error::Checkpoint(
                "sampler segment holds an impossible position".into(),
            ));
        }
        let mut s =
            Self::new(sizes, batch_size, seed).map_err(|e| Error::Checkpoint(e.to_string()))?;
        s.start_epoch(epoch);
        s.drawn = drawn;
        s.cursor = cursor;
        Ok(s)
    }
}
