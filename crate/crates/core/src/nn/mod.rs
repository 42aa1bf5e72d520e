//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Token activations are stored as `(rows, features)` matrices where a batch
//! of `B` sequences of length `T` is stacked into `B * T` rows. Everything
//! row-local (linear maps, norms, GELU) therefore runs as one large matmul.

mod attention;
mod block;
mod conv;
mod linear;
mod norm;

pub use attention::{Attention, AttentionCache};
pub use block::{Block, BlockCache};
pub(crate) use conv::{chw_to_pixels, pixels_to_chw};
pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use norm::{
    instance_norm, instance_norm_backward, InstanceNormCache, LayerNorm, LayerNormCache,
};

use ndarray::Array2;

/// A learnable tensor with its gradient accumulator.
///
/// All parameters are stored as matrices; vectors use a single row.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Array2<f32>,
    pub grad: Array2<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Array2<f32>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Visits every parameter of a module with a stable local name.
pub trait Parameters {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |_, p| p.trainable = trainable);
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.numel());
        n
    }
}
