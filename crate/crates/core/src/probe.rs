//! Concatenation fusion of RGB and band tokens, and a linear probe trained on
//! fused CLS features with the backbone frozen.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PairedSet, NUM_CLASSES};
use crate::diagnostics::embed_cls;
use crate::error::{Error, Result};
use crate::model::{EmbeddingBundle, ModalityId, Model};
use crate::nn::{LayerNorm, Linear, Param, Parameters};
use crate::ops;
use crate::optim::{lr_at, AdamW, AdamWConfig};

/// `GELU(LN(W [rgb | ms] + b))` per token, mapping `2D` back to `D`.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub proj: Linear,
    pub norm: LayerNorm,
    /// Skip the norm and activation; the output is the raw projection.
    pub passthrough: bool,
}

impl ConcatFusion {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            proj: Linear::xavier(&mut rng, 2 * dim, dim),
            norm: LayerNorm::new(dim),
            passthrough: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.d_out()
    }

    /// Fuses matching token rows of `rgb` and `ms`, both `(T, D)`.
    pub fn forward<'a>(
        &self,
        rgb: ArrayView2<'a, f32>,
        ms: ArrayView2<'a, f32>,
    ) -> Result<Array2<f32>> {
        let d = self.dim();
        if rgb.dim() != ms.dim() {
            return Err(Error::Shape(format!(
                "fusion inputs {:?} and {:?} differ",
                rgb.dim(),
                ms.dim()
            )));
        }
        if rgb.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: rgb.ncols(),
            });
        }
        let joined = concatenate(Axis(1), &[rgb, ms]).expect("equal row counts");
        let y = self.proj.forward(joined.view());
        if self.passthrough {
            return Ok(y);
        }
        let (n, _) = self.norm.forward(y.view());
        Ok(ops::gelu_array(&n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub pair: String,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub results: Vec<ProbeResult>,
    /// Uniform-guess accuracy over the label set.
    pub chance: f64,
    pub model_checksum: String,
}

/// Fused CLS features and labels for band `m`.
fn features(
    model: &Model,
    fusion: &ConcatFusion,
    set: &PairedSet,
    m: ModalityId,
) -> Result<(Array2<f32>, Vec<usize>)> {
    let pairs = set.get(m);
    let rgb_views: Vec<_> = pairs.iter().map(|p| p.rgb.view()).collect();
    let ms_views: Vec<_> = pairs.iter().map(|p| p.ms.view()).collect();
    let rgb = embed_cls(model, &rgb_views, ModalityId::RGB)?.mapv(|v| v as f32);
    let ms = embed_cls(model, &ms_views, m)?.mapv(|v| v as f32);
    let fused = fusion.forward(rgb.view(), ms.view())?;
    let mut labels = Vec::with_capacity(pairs.len());
    for p in pairs {
        let l = p.label as usize;
        if l >= NUM_CLASSES {
            return Err(Error::Config(format!(
                "scene {} has label {l}, outside 0..{NUM_CLASSES}",
                p.scene_id
            )));
        }
        labels.push(l);
    }
    Ok((fused, labels))
}

/// Softmax cross-entropy gradient of `logits` w.r.t. themselves, averaged.
fn ce_grad(logits: &Array2<f32>, labels: &[usize]) -> Array2<f32> {
    let mut p = logits.clone();
    ops::softmax_rows(p.view_mut());
    let scale = 1.0 / labels.len() as f32;
    for (mut row, &l) in p.rows_mut().into_iter().zip(labels) {
        row[l] -= 1.0;
        row.mapv_inplace(|v| v * scale);
    }
    p
}

fn accuracy(head: &Linear, x: &Array2<f32>, labels: &[usize]) -> f64 {
    let logits = head.forward(x.view());
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                );
            best.0 == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Trains a linear classifier on fused RGB+band CLS features for each band
/// in `bands`, leaving `model` untouched.
pub fn run_probe(
    model: &Model,
    train: &PairedSet,
    eval: &PairedSet,
    bands: &[ModalityId],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(
            "probe needs positive epochs, batch size and learning rate".into(),
        ));
    }
    let d = model.config.embed_dim;
    let fusion = ConcatFusion::new(d, cfg.seed ^ 0xF05E);
    let mut results = Vec::new();
    for &m in bands {
        if m.is_rgb() {
            return Err(Error::Routing("probe bands must be multispectral".into()));
        }
        let (x, y) = features(model, &fusion, train, m)?;
        let (xe, ye) = features(model, &fusion, eval, m)?;
        if y.is_empty() || ye.is_empty() {
            return Err(Error::Config(format!("no labelled {m} pairs to probe")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((m.index() as u64) << 8));
        let mut head = Linear {
            weight: Param::new(ops::normal(&mut rng, NUM_CLASSES, d, 0.01)),
            bias: Param::zeros(1, NUM_CLASSES),
        };
        let mut opt = AdamW::new(AdamWConfig::default());
        let per_epoch = y.len().div_ceil(cfg.batch_size);
        let total = (per_epoch * cfg.epochs) as u64;
        let mut order: Vec<usize> = (0..y.len()).collect();
        let mut step = 0u64;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let xb = x.select(Axis(0), chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                let g = ce_grad(&head.forward(xb.view()), &yb);
                head.visit_mut(&mut |_, p| p.zero_grad());
                head.accumulate_grads(xb.view(), g.view());
                opt.step(&mut head, lr_at(step, total, cfg.lr, 0.0));
                step += 1;
            }
        }
        results.push(ProbeResult {
            pair: format!("rgb-{}", m.name()),
            train_pairs: y.len(),
            eval_pairs: ye.len(),
            train_accuracy: accuracy(&head, &x, &y),
            eval_accuracy: accuracy(&head, &xe, &ye),
        });
    }
    Ok(ProbeReport {
        results,
        chance: 1.0 / NUM_CLASSES as f64,
        model_checksum: model.checksum(),
    })
}

/// Fused tokens for whole bundles, CLS first.
pub fn fuse_tokens(
    fusion: &ConcatFusion,
    rgb: &EmbeddingBundle,
    ms: &EmbeddingBundle,
) -> Result<Array2<f32>> {
    fusion.forward(rgb.tokens().view(), ms.tokens().view())
}
