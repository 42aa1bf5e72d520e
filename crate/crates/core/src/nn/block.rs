use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::{Attention, AttentionCache, LayerNorm, LayerNormCache, Linear, Param, Parameters};
use crate::ops;

/// Pre-norm transformer block: `x + Attn(LN(x))` then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Array2<f32>,
    hidden_pre: Array2<f32>,
    hidden: Array2<f32>,
}

impl Block {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, num_heads: usize, mlp_hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(rng, dim, num_heads),
            norm2: LayerNorm::new(dim),
            fc1: Linear::xavier(rng, dim, mlp_hidden),
            fc2: Linear::xavier(rng, mlp_hidden, dim),
        }
    }

    pub fn forward(
        &self,
        x: ArrayView2<f32>,
        batch: usize,
        seq: usize,
    ) -> (Array2<f32>, BlockCache) {
        let (n1, ln1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(n1.view(), batch, seq);
        let x1 = &x + &a;
        let (n2, ln2) = self.norm2.forward(x1.view());
        let hidden_pre = self.fc1.forward(n2.view());
        let hidden = ops::gelu_array(&hidden_pre);
        let m = self.fc2.forward(hidden.view());
        let out = x1 + m;
        let cache = BlockCache {
            ln1,
            attn,
            ln2,
            ln2_out: n2,
            hidden_pre,
            hidden,
        };
        (out, cache)
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: ArrayView2<f32>) -> Array2<f32> {
        let dhidden = self.fc2.backward(cache.hidden.view(), dy);
        let dpre = ops::gelu_backward(&cache.hidden_pre, &dhidden);
        let dn2 = self.fc1.backward(cache.ln2_out.view(), dpre.view());
        let mut dx1 = self.norm2.backward(&cache.ln2, dn2.view());
        dx1 += &dy;
        let dn1 = self.attn.backward(&cache.attn, dx1.view());
        let mut dx = self.norm1.backward(&cache.ln1, dn1.view());
        dx += &dx1;
        dx
    }
}

impl Parameters for Block {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        self.norm1.visit(&mut |n, p| f(&format!("norm1.{n}"), p));
        self.attn.visit(&mut |n, p| f(&format!("attn.{n}"), p));
        self.norm2.visit(&mut |n, p| f(&format!("norm2.{n}"), p));
        self.fc1.visit(&mut |n, p| f(&format!("fc1.{n}"), p));
        self.fc2.visit(&mut |n, p| f(&format!("fc2.{n}"), p));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1
            .visit_mut(&mut |n, p| f(&format!("norm1.{n}"), p));
        self.attn.visit_mut(&mut |n, p| f(&format!("attn.{n}"), p));
        self.norm2
            .visit_mut(&mut |n, p| f(&format!("norm2.{n}"), p));
        self.fc1.visit_mut(&mut |n, p| f(&format!("fc1.{n}"), p));
        self.fc2.visit_mut(&mut |n, p| f(&format!("fc2.{n}"), p));
    }
}
