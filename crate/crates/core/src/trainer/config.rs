use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{FreezeSpec, Variant};
use crate::queue::{PRESET_CAPACITY, TOY_CAPACITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    I,
    II,
    III,
}

impl StageId {
    pub const ALL: [StageId; 3] = [StageId::I, StageId::II, StageId::III];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::I => "I",
            StageId::II => "II",
            StageId::III => "III",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn previous(self) -> Option<StageId> {
        match self {
            StageId::I => None,
            StageId::II => Some(StageId::I),
            StageId::III => Some(StageId::II),
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(StageId::I),
            "II" | "2" => Ok(StageId::II),
            "III" | "3" => Ok(StageId::III),
            _ => Err(Error::Config(format!(
                "unknown stage {s:?} (expected I, II or III)"
            ))),
        }
    }
}

/// Everything that parameterizes one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: StageId,
    pub weights: LossWeights,
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub freeze: FreezeSpec,
    /// Epochs at the start of the stage during which the neighbourhood weight
    /// is applied as zero while the queue fills.
    pub la_warmup_epochs: usize,
    pub warmup_fraction: f64,
    pub queue_capacity: usize,
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
}

/// Stage I warmup length as a fraction of its steps.
pub const STAGE_ONE_WARMUP: f64 = 0.05;

/// Per-variant schedule values for one stage: epochs, learning rate, batch size.
fn schedule(variant: Variant, stage: StageId) -> (usize, f64, usize) {
    use StageId::*;
    use Variant::*;
    match (variant, stage) {
        (VitS, I) | (VitS, II) | (VitB, I) | (VitB, II) => {
            (if stage == I { 100 } else { 10 }, 1e-4, 128)
        }
        (VitS, III) => (75, 5e-5, 128),
        (VitB, III) => (75, 4e-5, 128),
        (VitL, I) => (100, 8e-5, 64),
        (VitL, II) => (10, 8e-5, 64),
        (VitL, III) => (75, 3e-5, 64),
        (VitG, I) => (50, 5e-5, 24),
        (VitG, II) => (10, 5e-5, 24),
        (VitG, III) => (30, 2e-5, 16),
        (Toy, I) => (8, TOY_LR[0], TOY_BATCH),
        (Toy, II) => (2, TOY_LR[1], TOY_BATCH),
        (Toy, III) => (6, TOY_LR[2], TOY_BATCH),
    }
}

/// Toy-scale learning rates per stage and batch size.
pub const TOY_LR: [f64; 3] = [1.5e-4, 1.5e-4, 2e-3];
pub const TOY_BATCH: usize = 16;

/// Backbone blocks unfrozen in Stage III.
pub fn unfrozen_blocks(variant: Variant) -> usize {
    match variant {
        Variant::VitS | Variant::VitB => 6,
        Variant::VitL => 12,
        Variant::VitG => 10,
        Variant::Toy => 2,
    }
}

impl StageConfig {
    pub fn preset(variant: Variant, stage: StageId) -> Self {
        let (epochs, base_lr, batch_size) = schedule(variant, stage);
        let (weights, freeze, la_warmup_epochs, warmup_fraction) = match stage {
            StageId::I => (
                LossWeights::stage_one(),
                FreezeSpec::stage_one(),
                0,
                STAGE_ONE_WARMUP,
            ),
            StageId::II => (
                LossWeights::stage_two(),
                FreezeSpec::stage_one().with_rgb_stem(true),
                1,
                0.0,
            ),
            StageId::III => (
                LossWeights::stage_three(),
                FreezeSpec::stage_one()
                    .with_rgb_stem(true)
                    .with_unfrozen_blocks(unfrozen_blocks(variant)),
                0,
                0.0,
            ),
        };
        let queue_capacity = match variant {
            Variant::Toy => TOY_CAPACITY,
            _ => PRESET_CAPACITY,
        };
        Self {
            stage,
            weights,
            epochs,
            base_lr,
            batch_size,
            freeze,
            la_warmup_epochs,
            warmup_fraction,
            queue_capacity,
            resume_from: None,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("stage {}: {msg}", self.stage)));
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.queue_capacity == 0 {
            return fail("epochs, batch size and queue capacity must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!(
                "base learning rate {} must be positive",
                self.base_lr
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            ));
        }
        if self.freeze.unfrozen_blocks > depth {
            return fail(format!(
                "cannot unfreeze {} of {depth} blocks",
                self.freeze.unfrozen_blocks
            ));
        }
        match self.stage {
            StageId::I | StageId::II if self.freeze.unfrozen_blocks > 0 => {
                fail("the backbone stays frozen before Stage III".into())
            }
            StageId::I if self.weights.lambda_a.is_some() => {
                fail("the neighbourhood loss is not used in Stage I".into())
            }
            StageId::I if self.freeze.rgb_stem => {
                fail("the RGB stem stays frozen in Stage I".into())
            }
            StageId::II | StageId::III if self.warmup_fraction != 0.0 => {
                fail("Stages II and III resume without warmup".into())
            }
            _ => Ok(()),
        }
    }

    /// Whether the neighbourhood term is scheduled for this stage at all.
    pub fn uses_queue(&self) -> bool {
        self.weights.lambda_a.is_some()
    }

    /// Neighbourhood weight actually applied during `epoch`.
    pub fn effective_lambda_a(&self, epoch: usize) -> Option<f64> {
        self.weights.lambda_a.map(|w| {
            if epoch < self.la_warmup_epochs {
                0.0
            } else {
                w
            }
        })
    }
}
