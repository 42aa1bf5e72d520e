use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::nn::{Linear, Param, Parameters};
use crate::ops;

/// Standard deviation of the Gaussian adapter weight init.
pub const ADAPTER_INIT_STD: f32 = 0.01;

/// Bottleneck residual MLP: `W_up GELU(W_down h + b_down) + b_up`.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

#[derive(Clone, Debug)]
pub struct AdapterCache {
    input: Array2<f32>,
    pre: Array2<f32>,
    act: Array2<f32>,
}

impl Adapter {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, bottleneck: usize) -> Self {
        Self {
            down: Linear::from_weight(ops::normal(rng, bottleneck, dim, ADAPTER_INIT_STD)),
            up: Linear::from_weight(ops::normal(rng, dim, bottleneck, ADAPTER_INIT_STD)),
        }
    }

    /// Weight count excluding biases.
    pub fn weight_count(&self) -> usize {
        self.down.weight.numel() + self.up.weight.numel()
    }

    /// Returns the residual delta; the caller adds it to `h`.
    pub fn forward(&self, h: ArrayView2<f32>) -> (Array2<f32>, AdapterCache) {
        let pre = self.down.forward(h);
        let act = pre.mapv(ops::gelu);
        let delta = self.up.forward(act.view());
        let cache = AdapterCache {
            input: h.to_owned(),
            pre,
            act,
        };
        (delta, cache)
    }

    /// Gradient of the delta w.r.t. its input.
    pub fn backward(&mut self, cache: &AdapterCache, ddelta: ArrayView2<f32>) -> Array2<f32> {
        let dact = self.up.backward(cache.act.view(), ddelta);
        let dpre = ops::gelu_backward(&cache.pre, &dact);
        self.down.backward(cache.input.view(), dpre.view())
    }
}

impl Parameters for Adapter {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        self.down.visit(&mut |n, p| f(&format!("down.{n}"), p));
        self.up.visit(&mut |n, p| f(&format!("up.{n}"), p));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.down.visit_mut(&mut |n, p| f(&format!("down.{n}"), p));
        self.up.visit_mut(&mut |n, p| f(&format!("up.{n}"), p));
    }
}
