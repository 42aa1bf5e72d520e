use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use super::{Linear, Param, Parameters};
use crate::ops::softmax_rows;

/// Multi-head self-attention over `batch` stacked sequences of `seq` tokens.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub num_heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    input: Array2<f32>,
    qkv: Array2<f32>,
    /// One `(seq, seq)` probability matrix per (sample, head), sample-major.
    probs: Vec<Array2<f32>>,
    mixed: Array2<f32>,
    batch: usize,
    seq: usize,
}

impl Attention {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, num_heads: usize) -> Self {
        Self {
            qkv: Linear::xavier(rng, dim, 3 * dim),
            proj: Linear::xavier(rng, dim, dim),
            num_heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.proj.d_in() / self.num_heads
    }

    pub fn forward(
        &self,
        x: ArrayView2<f32>,
        batch: usize,
        seq: usize,
    ) -> (Array2<f32>, AttentionCache) {
        let dim = self.proj.d_in();
        let dh = self.head_dim();
        let scale = (dh as f32).powf(-0.5);
        let qkv = self.qkv.forward(x);
        let mut mixed = Array2::zeros((batch * seq, dim));
        let mut probs = Vec::with_capacity(batch * self.num_heads);
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.num_heads {
                let c = h * dh;
                let q = qkv.slice(s![rows.clone(), c..c + dh]);
                let k = qkv.slice(s![rows.clone(), dim + c..dim + c + dh]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + c..2 * dim + c + dh]);
                let mut scores = q.dot(&k.t());
                scores.mapv_inplace(|z| z * scale);
                softmax_rows(scores.view_mut());
                let out = scores.dot(&v);
                mixed.slice_mut(s![rows.clone(), c..c + dh]).assign(&out);
                probs.push(scores);
            }
        }
        let y = self.proj.forward(mixed.view());
        let cache = AttentionCache {
            input: x.to_owned(),
            qkv,
            probs,
            mixed,
            batch,
            seq,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: ArrayView2<f32>) -> Array2<f32> {
        let dim = self.proj.d_in();
        let dh = self.head_dim();
        let scale = (dh as f32).powf(-0.5);
        let dmixed = self.proj.backward(cache.mixed.view(), dy);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        let seq = cache.seq;
        for b in 0..cache.batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.num_heads {
                let c = h * dh;
                let p = &cache.probs[b * self.num_heads + h];
                let q = cache.qkv.slice(s![rows.clone(), c..c + dh]);
                let k = cache.qkv.slice(s![rows.clone(), dim + c..dim + c + dh]);
                let v = cache
                    .qkv
                    .slice(s![rows.clone(), 2 * dim + c..2 * dim + c + dh]);
                let dout = dmixed.slice(s![rows.clone(), c..c + dh]);

                let dv = p.t().dot(&dout);
                let mut ds = dout.dot(&v.t());
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let inner = drow.dot(&prow);
                    drow.zip_mut_with(&prow, |d, &pv| *d = pv * (*d - inner));
                }
                ds.mapv_inplace(|z| z * scale);
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), c..c + dh]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), dim + c..dim + c + dh])
                    .assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * dim + c..2 * dim + c + dh])
                    .assign(&dv);
            }
        }
        self.qkv.backward(cache.input.view(), dqkv.view())
    }
}

impl Parameters for Attention {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        self.qkv.visit(&mut |n, p| f(&format!("qkv.{n}"), p));
        self.proj.visit(&mut |n, p| f(&format!("proj.{n}"), p));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.qkv.visit_mut(&mut |n, p| f(&format!("qkv.{n}"), p));
        self.proj.visit_mut(&mut |n, p| f(&format!("proj.{n}"), p));
    }
}
