//! Shared ViT backbone with modality stems, per-block adapters and a
//! modality embedding table.
//!
//! The student routes every image through `stem(m) -> patch embed -> +pos
//! -> +E[m] -> [block, adapter(l, m)]* -> final norm`. The teacher is a
//! frozen copy of the backbone at initialization and sees RGB only.

mod adapter;
mod config;
mod freeze;
mod stem;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapter::{Adapter, AdapterCache, ADAPTER_INIT_STD};
pub use config::{ModalityId, ModelVariantConfig, ParamAccounting, Variant, NUM_MODALITIES};
pub use freeze::{FreezeSpec, GroupReport, TrainableReport};
pub use stem::{RgbStem, RgbStemCache, SpatialStem, SpatialStemCache, INSTANCE_NORM_EPS};

use crate::error::{Error, Result};
use crate::nn::{Block, BlockCache, LayerNorm, LayerNormCache, Linear, Param, Parameters};
use crate::ops;

pub type Image = Array3<f32>;

/// Fixed per-channel normalization applied to RGB pixels in `[0, 1]` before
/// they reach the stem or the teacher's patch embedding.
pub const RGB_MEAN: f32 = 0.5;
pub const RGB_STD: f32 = 0.25;

pub fn normalize_rgb(x: ArrayView3<f32>) -> Image {
    x.mapv(|v| (v - RGB_MEAN) / RGB_STD)
}

/// CLS embedding plus patch tokens from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    pub cls: Array1<f32>,
    pub patches: Array2<f32>,
    pub modality: ModalityId,
}

impl EmbeddingBundle {
    /// CLS followed by patch tokens, `(N + 1, D)`.
    pub fn tokens(&self) -> Array2<f32> {
        let mut t = Array2::zeros((self.patches.nrows() + 1, self.cls.len()));
        t.row_mut(0).assign(&self.cls);
        t.slice_mut(s![1.., ..]).assign(&self.patches);
        t
    }
}

/// Parameter group used for freezing, reporting and checksums.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    PatchEmbed,
    ClsToken,
    PosEmbed,
    Block(usize),
    FinalNorm,
    RgbStem,
    MsStem(ModalityId),
    Adapter { block: usize, modality: ModalityId },
    ModalityTable,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::PatchEmbed => f.write_str("patch_embed"),
            ParamGroup::ClsToken => f.write_str("cls_token"),
            ParamGroup::PosEmbed => f.write_str("pos_embed"),
            ParamGroup::Block(i) => write!(f, "block.{i}"),
            ParamGroup::FinalNorm => f.write_str("final_norm"),
            ParamGroup::RgbStem => f.write_str("stem.rgb"),
            ParamGroup::MsStem(m) => write!(f, "stem.{m}"),
            ParamGroup::Adapter { block, modality } => write!(f, "adapter.{block}.{modality}"),
            ParamGroup::ModalityTable => f.write_str("modality_table"),
        }
    }
}

/// Transformer trunk shared by student and teacher.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_embed: Linear,
    pub cls_token: Param,
    pub pos_embed: Param,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    patch_size: usize,
    grid: usize,
}

impl Backbone {
    fn new(cfg: &ModelVariantConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let patch_embed = Linear::xavier(rng, cfg.patch_dim(), d);
        let cls_token = Param::new(ops::normal(rng, 1, d, 0.02));
        let pos_embed = Param::new(ops::normal(rng, cfg.seq_len(), d, 0.02));
        let blocks = (0..cfg.depth)
            .map(|_| Block::new(rng, d, cfg.num_heads, cfg.mlp_hidden()))
            .collect();
        Self {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::new(d),
            patch_size: cfg.patch_size,
            grid: cfg.grid(),
        }
    }

    fn seq_len(&self) -> usize {
        self.grid * self.grid + 1
    }

    /// `(3, H, W)` -> `(N, 3 p^2)` patch rows in raster order.
    fn patchify(&self, x: ArrayView3<f32>, out: &mut ndarray::ArrayViewMut2<f32>) {
        let p = self.patch_size;
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let mut row = out.row_mut(gy * self.grid + gx);
                let mut k = 0;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            row[k] = x[[c, gy * p + dy, gx * p + dx]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }

    fn unpatchify(&self, rows: ArrayView2<f32>) -> Image {
        let p = self.patch_size;
        let side = self.grid * p;
        let mut x = Array3::zeros((3, side, side));
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let row = rows.row(gy * self.grid + gx);
                let mut k = 0;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            x[[c, gy * p + dy, gx * p + dx]] = row[k];
                            k += 1;
                        }
                    }
                }
            }
        }
        x
    }

    fn check_image(&self, x: ArrayView3<f32>) -> Result<()> {
        let side = self.grid * self.patch_size;
        let (_, h, w) = x.dim();
        if h != side || w != side {
            return Err(Error::Shape(format!(
                "expected {side}x{side} image, got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn patch_rows(&self, images: &[Image]) -> Array2<f32> {
        let n = self.grid * self.grid;
        let mut patches = Array2::zeros((images.len() * n, self.patch_embed.d_in()));
        for (b, img) in images.iter().enumerate() {
            self.patchify(
                img.view(),
                &mut patches.slice_mut(s![b * n..(b + 1) * n, ..]),
            );
        }
        patches
    }

    /// Prepends CLS, adds positional embeddings and an optional per-token
    /// offset (the modality embedding).
    fn assemble(
        &self,
        embedded: &Array2<f32>,
        batch: usize,
        offset: Option<ArrayView2<f32>>,
    ) -> Array2<f32> {
        let t = self.seq_len();
        let n = t - 1;
        let d = embedded.ncols();
        let mut tokens = Array2::zeros((batch * t, d));
        for b in 0..batch {
            let mut seq = tokens.slice_mut(s![b * t..(b + 1) * t, ..]);
            seq.row_mut(0).assign(&self.cls_token.value.row(0));
            seq.slice_mut(s![1.., ..])
                .assign(&embedded.slice(s![b * n..(b + 1) * n, ..]));
            seq += &self.pos_embed.value;
            if let Some(e) = offset {
                seq += &e;
            }
        }
        tokens
    }
}

impl Parameters for Backbone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        self.patch_embed
            .visit(&mut |n, p| f(&format!("patch_embed.{n}"), p));
        f("cls_token", &self.cls_token);
        f("pos_embed", &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |n, p| f(&format!("blocks.{i}.{n}"), p));
        }
        self.norm.visit(&mut |n, p| f(&format!("norm.{n}"), p));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.patch_embed
            .visit_mut(&mut |n, p| f(&format!("patch_embed.{n}"), p));
        f("cls_token", &mut self.cls_token);
        f("pos_embed", &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |n, p| f(&format!("blocks.{i}.{n}"), p));
        }
        self.norm.visit_mut(&mut |n, p| f(&format!("norm.{n}"), p));
    }
}

fn backbone_group(name: &str) -> ParamGroup {
    if name.starts_with("patch_embed") {
        ParamGroup::PatchEmbed
    } else if name == "cls_token" {
        ParamGroup::ClsToken
    } else if name == "pos_embed" {
        ParamGroup::PosEmbed
    } else if let Some(rest) = name.strip_prefix("blocks.") {
        let idx = rest
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .expect("block index");
        ParamGroup::Block(idx)
    } else {
        ParamGroup::FinalNorm
    }
}

enum StemCaches {
    Rgb(Vec<RgbStemCache>),
    Spatial(Vec<SpatialStemCache>),
}

/// Activations retained by [`Model::forward_group`] for the backward pass.
pub struct ForwardCache {
    modality: ModalityId,
    batch: usize,
    stems: StemCaches,
    patches: Array2<f32>,
    layers: Vec<(BlockCache, AdapterCache)>,
    final_norm: LayerNormCache,
}

impl ForwardCache {
    pub fn modality(&self) -> ModalityId {
        self.modality
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Gradients the final norm's scale and shift would receive from `dy`,
    /// without touching any accumulator.
    pub fn final_norm_grads(&self, dy: ArrayView2<f32>) -> (Array1<f32>, Array1<f32>) {
        let dgamma = (&dy * self.final_norm.xhat()).sum_axis(Axis(0));
        (dgamma, dy.sum_axis(Axis(0)))
    }
}

/// The student: shared backbone plus all modality-specific parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelVariantConfig,
    pub backbone: Backbone,
    pub rgb_stem: RgbStem,
    /// Indexed by `modality.index() - 1`.
    pub ms_stems: Vec<SpatialStem>,
    /// `adapters[block][modality]`.
    pub adapters: Vec<Vec<Adapter>>,
    /// `(4, D)`, one row per modality.
    pub modality_table: Param,
}

impl Model {
    /// Deterministically builds all parameters from `seed`.
    pub fn build(cfg: &ModelVariantConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(cfg, &mut rng);
        let ms_stems = ModalityId::MULTISPECTRAL
            .iter()
            .map(|_| SpatialStem::new(&mut rng))
            .collect();
        let adapters = (0..cfg.depth)
            .map(|_| {
                (0..cfg.num_modalities)
                    .map(|_| Adapter::new(&mut rng, cfg.embed_dim, cfg.adapter_bottleneck))
                    .collect()
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            backbone,
            rgb_stem: RgbStem::identity(),
            ms_stems,
            adapters,
            // Zero rows keep the RGB pathway identical to the teacher at init.
            modality_table: Param::zeros(cfg.num_modalities, cfg.embed_dim),
        })
    }

    /// A frozen teacher built from the current backbone.
    pub fn teacher(&self) -> Teacher {
        let mut backbone = self.backbone.clone();
        backbone.set_trainable(false);
        backbone.visit_mut(&mut |_, p| p.zero_grad());
        Teacher {
            config: self.config.clone(),
            backbone,
        }
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters.iter().map(Vec::len).sum()
    }

    pub fn adapter(&self, block: usize, m: ModalityId) -> Result<&Adapter> {
        self.adapters
            .get(block)
            .and_then(|row| row.get(m.index()))
            .ok_or_else(|| Error::Lookup(format!("no adapter for block {block}, modality {m}")))
    }

    pub fn adapter_mut(&mut self, block: usize, m: ModalityId) -> Result<&mut Adapter> {
        self.adapters
            .get_mut(block)
            .and_then(|row| row.get_mut(m.index()))
            .ok_or_else(|| Error::Lookup(format!("no adapter for block {block}, modality {m}")))
    }

    pub fn spatial_stem(&self, m: ModalityId) -> Result<&SpatialStem> {
        if m.is_rgb() {
            return Err(Error::Routing("RGB input has no spatial stem".into()));
        }
        Ok(&self.ms_stems[m.index() - 1])
    }

    pub fn rgb_stem_forward(&self, x: ArrayView3<f32>) -> Result<Image> {
        Ok(self.rgb_stem.forward(x)?.0)
    }

    pub fn spatial_stem_forward(&self, x: ArrayView3<f32>, m: ModalityId) -> Result<Image> {
        Ok(self.spatial_stem(m)?.forward(x)?.0)
    }

    /// Residual delta of adapter `(block, m)` applied to block outputs `h`.
    pub fn adapter_forward(
        &self,
        h: ArrayView2<f32>,
        block: usize,
        m: ModalityId,
    ) -> Result<Array2<f32>> {
        let adapter = self.adapter(block, m)?;
        if h.ncols() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "adapter input width {} != {}",
                h.ncols(),
                self.config.embed_dim
            )));
        }
        Ok(adapter.forward(h).0)
    }

    fn check_channels(&self, x: ArrayView3<f32>, m: ModalityId) -> Result<()> {
        let c = x.dim().0;
        if c != m.channels() {
            return Err(Error::Shape(format!(
                "{m} input must have {} channel(s), got {c}",
                m.channels()
            )));
        }
        self.backbone.check_image(x)
    }

    /// Forward pass for images that all share modality `m`.
    ///
    /// Returns the final-norm token matrix `(B * (N + 1), D)` and the cache
    /// needed by [`Model::backward_group`].
    pub fn forward_group(
        &self,
        images: &[ArrayView3<f32>],
        m: ModalityId,
    ) -> Result<(Array2<f32>, ForwardCache)> {
        let batch = images.len();
        for x in images {
            self.check_channels(*x, m)?;
        }
        let mut stem_out = Vec::with_capacity(batch);
        let stems = if m.is_rgb() {
            let mut caches = Vec::with_capacity(batch);
            for x in images {
                let (y, c) = self.rgb_stem.forward(normalize_rgb(*x).view())?;
                stem_out.push(y);
                caches.push(c);
            }
            StemCaches::Rgb(caches)
        } else {
            let stem = self.spatial_stem(m)?;
            let mut caches = Vec::with_capacity(batch);
            for x in images {
                let (y, c) = stem.forward(*x)?;
                stem_out.push(y);
                caches.push(c);
            }
            StemCaches::Spatial(caches)
        };

        let patches = self.backbone.patch_rows(&stem_out);
        let embedded = self.backbone.patch_embed.forward(patches.view());
        let offset = self
            .modality_table
            .value
            .slice(s![m.index()..m.index() + 1, ..]);
        let mut h = self.backbone.assemble(&embedded, batch, Some(offset));

        let seq = self.config.seq_len();
        let mut layers = Vec::with_capacity(self.config.depth);
        for (l, block) in self.backbone.blocks.iter().enumerate() {
            let (out, bc) = block.forward(h.view(), batch, seq);
            let (delta, ac) = self.adapters[l][m.index()].forward(out.view());
            h = out + delta;
            layers.push((bc, ac));
        }
        let (y, final_norm) = self.backbone.norm.forward(h.view());
        let cache = ForwardCache {
            modality: m,
            batch,
            stems,
            patches,
            layers,
            final_norm,
        };
        Ok((y, cache))
    }

    /// Accumulates gradients of all trainable parameters given `dL/dy` for the
    /// output of [`Model::forward_group`].
    pub fn backward_group(&mut self, cache: &ForwardCache, dy: ArrayView2<f32>) {
        let m = cache.modality;
        let batch = cache.batch;
        let seq = self.config.seq_len();
        let n = seq - 1;

        let mut dh = self.backbone.norm.backward(&cache.final_norm, dy);
        for l in (0..self.config.depth).rev() {
            let (bc, ac) = &cache.layers[l];
            let through_adapter = self.adapters[l][m.index()].backward(ac, dh.view());
            dh += &through_adapter;
            dh = self.backbone.blocks[l].backward(bc, dh.view());
        }

        if self.modality_table.trainable {
            let total = dh.sum_axis(Axis(0));
            self.modality_table
                .grad
                .row_mut(m.index())
                .scaled_add(1.0, &total);
        }
        let bb = &mut self.backbone;
        if bb.cls_token.trainable || bb.pos_embed.trainable {
            for b in 0..batch {
                let seq_grad = dh.slice(s![b * seq..(b + 1) * seq, ..]);
                if bb.pos_embed.trainable {
                    bb.pos_embed.grad += &seq_grad;
                }
                if bb.cls_token.trainable {
                    bb.cls_token
                        .grad
                        .row_mut(0)
                        .scaled_add(1.0, &seq_grad.row(0));
                }
            }
        }

        let mut dembed = Array2::zeros((batch * n, self.config.embed_dim));
        for b in 0..batch {
            dembed
                .slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&dh.slice(s![b * seq + 1..(b + 1) * seq, ..]));
        }

        let stem_trainable = match m.is_rgb() {
            true => self.rgb_stem.proj.weight.trainable || self.rgb_stem.proj.bias.trainable,
            false => {
                let mut any = false;
                self.ms_stems[m.index() - 1].visit(&mut |_, p| any |= p.trainable);
                any
            }
        };
        if !stem_trainable {
            self.backbone
                .patch_embed
                .accumulate_grads(cache.patches.view(), dembed.view());
            return;
        }
        let dpatches = self
            .backbone
            .patch_embed
            .backward(cache.patches.view(), dembed.view());
        match &cache.stems {
            StemCaches::Rgb(caches) => {
                for (b, c) in caches.iter().enumerate() {
                    let dimg = self
                        .backbone
                        .unpatchify(dpatches.slice(s![b * n..(b + 1) * n, ..]));
                    self.rgb_stem.backward(c, dimg.view());
                }
            }
            StemCaches::Spatial(caches) => {
                for (b, c) in caches.iter().enumerate() {
                    let dimg = self
                        .backbone
                        .unpatchify(dpatches.slice(s![b * n..(b + 1) * n, ..]));
                    self.ms_stems[m.index() - 1].backward(c, dimg.view());
                }
            }
        }
    }

    /// Splits a forward token matrix into per-sample bundles.
    pub fn split_bundles(&self, tokens: &Array2<f32>, m: ModalityId) -> Vec<EmbeddingBundle> {
        split_bundles(tokens, self.config.seq_len(), m)
    }

    pub fn student_forward(&self, x: ArrayView3<f32>, m: ModalityId) -> Result<EmbeddingBundle> {
        let (y, _) = self.forward_group(&[x], m)?;
        Ok(self.split_bundles(&y, m).remove(0))
    }

    /// Forward for a mixed-modality batch: samples are grouped by modality,
    /// each group is routed through its own stem and adapters, and outputs are
    /// returned in input order.
    pub fn student_forward_batch(
        &self,
        images: &[ArrayView3<f32>],
        modalities: &[ModalityId],
    ) -> Result<Vec<EmbeddingBundle>> {
        if images.len() != modalities.len() {
            return Err(Error::Shape(format!(
                "{} images but {} modality ids",
                images.len(),
                modalities.len()
            )));
        }
        let mut out: Vec<Option<EmbeddingBundle>> = vec![None; images.len()];
        for m in ModalityId::ALL {
            let idx: Vec<usize> = (0..images.len()).filter(|&i| modalities[i] == m).collect();
            if idx.is_empty() {
                continue;
            }
            let group: Vec<_> = idx.iter().map(|&i| images[i]).collect();
            let (y, _) = self.forward_group(&group, m)?;
            for (bundle, &i) in self.split_bundles(&y, m).into_iter().zip(&idx) {
                out[i] = Some(bundle);
            }
        }
        Ok(out
            .into_iter()
            .map(|b| b.expect("every sample routed"))
            .collect())
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, _, p| p.zero_grad());
    }

    /// Visits every parameter with its qualified name and group.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, ParamGroup, &'a Param)) {
        self.backbone
            .visit(&mut |n, p| f(&format!("backbone.{n}"), backbone_group(n), p));
        self.rgb_stem
            .visit(&mut |n, p| f(&format!("stems.rgb.{n}"), ParamGroup::RgbStem, p));
        for (stem, m) in self.ms_stems.iter().zip(ModalityId::MULTISPECTRAL) {
            stem.visit(&mut |n, p| f(&format!("stems.{m}.{n}"), ParamGroup::MsStem(m), p));
        }
        for (l, row) in self.adapters.iter().enumerate() {
            for (a, m) in row.iter().zip(ModalityId::ALL) {
                let g = ParamGroup::Adapter {
                    block: l,
                    modality: m,
                };
                a.visit(&mut |n, p| f(&format!("adapters.{l}.{m}.{n}"), g, p));
            }
        }
        f(
            "modality_table",
            ParamGroup::ModalityTable,
            &self.modality_table,
        );
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Param)) {
        self.backbone
            .visit_mut(&mut |n, p| f(&format!("backbone.{n}"), backbone_group(n), p));
        self.rgb_stem
            .visit_mut(&mut |n, p| f(&format!("stems.rgb.{n}"), ParamGroup::RgbStem, p));
        for (stem, m) in self.ms_stems.iter_mut().zip(ModalityId::MULTISPECTRAL) {
            stem.visit_mut(&mut |n, p| f(&format!("stems.{m}.{n}"), ParamGroup::MsStem(m), p));
        }
        for (l, row) in self.adapters.iter_mut().enumerate() {
            for (a, m) in row.iter_mut().zip(ModalityId::ALL) {
                let g = ParamGroup::Adapter {
                    block: l,
                    modality: m,
                };
                a.visit_mut(&mut |n, p| f(&format!("adapters.{l}.{m}.{n}"), g, p));
            }
        }
        f(
            "modality_table",
            ParamGroup::ModalityTable,
            &mut self.modality_table,
        );
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, p| n += p.numel());
        n
    }

    /// SHA-256 of each parameter group's values, keyed by group label.
    pub fn group_checksums(&self) -> BTreeMap<String, String> {
        let mut groups: BTreeMap<String, Vec<ArrayView2<f32>>> = BTreeMap::new();
        self.visit_params(&mut |_, g, p| {
            groups
                .entry(g.to_string())
                .or_default()
                .push(p.value.view())
        });
        groups
            .into_iter()
            .map(|(k, v)| (k, ops::checksum(v)))
            .collect()
    }

    /// Checksum over every parameter.
    pub fn checksum(&self) -> String {
        let mut views = Vec::new();
        self.visit_params(&mut |_, _, p| views.push(p.value.view()));
        ops::checksum(views)
    }

    /// Squared L2 norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut s = 0.0f64;
        self.visit_params(&mut |_, _, p| {
            if p.trainable {
                s += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
            }
        });
        s.sqrt()
    }
}

fn split_bundles(tokens: &Array2<f32>, seq: usize, m: ModalityId) -> Vec<EmbeddingBundle> {
    let batch = tokens.nrows() / seq;
    (0..batch)
        .map(|b| EmbeddingBundle {
            cls: tokens.row(b * seq).to_owned(),
            patches: tokens.slice(s![b * seq + 1..(b + 1) * seq, ..]).to_owned(),
            modality: m,
        })
        .collect()
}

/// Frozen RGB-only backbone providing distillation targets.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub config: ModelVariantConfig,
    pub backbone: Backbone,
}

impl Teacher {
    pub fn forward(&self, images: &[ArrayView3<f32>]) -> Result<Vec<EmbeddingBundle>> {
        let normalized = images
            .iter()
            .map(|x| {
                let c = x.dim().0;
                if c != 3 {
                    return Err(Error::Shape(format!(
                        "teacher expects 3-channel RGB, got {c}"
                    )));
                }
                self.backbone.check_image(*x)?;
                Ok(normalize_rgb(*x))
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = normalized.len();
        let patches = self.backbone.patch_rows(&normalized);
        let embedded = self.backbone.patch_embed.forward(patches.view());
        let mut h = self.backbone.assemble(&embedded, batch, None);
        let seq = self.config.seq_len();
        for block in &self.backbone.blocks {
            h = block.forward(h.view(), batch, seq).0;
        }
        let (y, _) = self.backbone.norm.forward(h.view());
        Ok(split_bundles(&y, seq, ModalityId::RGB))
    }

    pub fn teacher_forward(&self, x: ArrayView3<f32>) -> Result<EmbeddingBundle> {
        Ok(self.forward(&[x])?.remove(0))
    }

    pub fn checksum(&self) -> String {
        let mut views = Vec::new();
        self.backbone.visit(&mut |_, p| views.push(p.value.view()));
        ops::checksum(views)
    }
}

/// Name, group and shape of one parameter.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub group: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

impl Model {
    pub fn param_summaries(&self) -> Vec<ParamSummary> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, g, p| {
            out.push(ParamSummary {
                name: n.to_string(),
                group: g.to_string(),
                rows: p.value.nrows(),
                cols: p.value.ncols(),
                trainable: p.trainable,
            })
        });
        out
    }
}

impl Parameters for Model {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        self.visit_params(&mut |n, _, p| f(n, p));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.visit_params_mut(&mut |n, _, p| f(n, p));
    }
}
