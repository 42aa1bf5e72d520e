use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, Container};
use super::config::{StageConfig, StageId};
use super::sampler::{mix, RoundRobinSampler};
use crate::codec::{Reader, Writer};
use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, distill_loss, neighborhood_kl, patch_loss, total_loss, ActiveTerms,
    LossReport, LossTerm, LossWeights, TermValues,
};
use crate::model::{Image, ModalityId, Model, ModelVariantConfig, Teacher};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::queue::QueueState;

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub teacher: Teacher,
    pub optimizer: AdamW,
    pub queue: QueueState,
    pub sampler: Option<RoundRobinSampler>,
    pub rng: ChaCha8Rng,
    pub seed: u64,
    pub stage: StageId,
    /// Epoch within the current stage.
    pub epoch: u64,
    /// Optimizer steps within the current stage.
    pub stage_step: u64,
    /// Optimizer steps across all stages.
    pub global_step: u64,
    /// Teacher CLS per scene; derived data, never checkpointed.
    pub teacher_cls: TeacherCache,
}

/// Memoized frozen-teacher CLS embeddings keyed by scene id.
///
/// Each entry keeps the RGB image it was computed from and is only reused for
/// that same allocation. Entries are computed one image at a time so the
/// values do not depend on which batch first asked for them.
#[derive(Clone, Debug, Default)]
pub struct TeacherCache {
    entries: HashMap<u64, (Arc<Image>, Array1<f64>)>,
}

impl TeacherCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Teacher CLS rows for `batch`, in order.
    pub fn lookup(&mut self, teacher: &Teacher, batch: &[&PairedSample]) -> Result<Array2<f64>> {
        let d = teacher.config.embed_dim;
        let mut out = Array2::zeros((batch.len(), d));
        for (i, p) in batch.iter().enumerate() {
            let hit =
                matches!(self.entries.get(&p.scene_id), Some((img, _)) if Arc::ptr_eq(img, &p.rgb));
            if !hit {
                let bundle = teacher.teacher_forward(p.rgb.view())?;
                let cls = bundle.cls.mapv(|v| v as f64);
                self.entries.insert(p.scene_id, (Arc::clone(&p.rgb), cls));
            }
            out.row_mut(i).assign(&self.entries[&p.scene_id].1);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Full,
    ModelOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: ModelVariantConfig,
    pub stage: StageId,
    pub epoch: u64,
    pub stage_step: u64,
    pub global_step: u64,
    pub seed: u64,
}

/// Per-step result of [`train_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub report: LossReport,
    pub lr: f64,
    /// Neighbourhood weight applied this step, when the stage schedules it.
    pub lambda_a: Option<f64>,
    /// Norm of the gradient the neighbourhood term alone sends into the
    /// (always trainable) final norm parameters.
    pub la_grad_norm: Option<f64>,
}

impl TrainState {
    pub fn new(cfg: &ModelVariantConfig, seed: u64, queue_capacity: usize) -> Result<Self> {
        let model = Model::build(cfg, seed)?;
        let teacher = model.teacher();
        Ok(Self {
            queue: QueueState::new(queue_capacity, cfg.embed_dim)?,
            teacher,
            model,
            optimizer: AdamW::new(AdamWConfig::default()),
            sampler: None,
            rng: ChaCha8Rng::seed_from_u64(mix(seed ^ 0x7EA1)),
            seed,
            stage: StageId::I,
            epoch: 0,
            stage_step: 0,
            global_step: 0,
            teacher_cls: TeacherCache::default(),
        })
    }

    pub fn meta(&self, kind: CheckpointKind) -> CheckpointMeta {
        CheckpointMeta {
            kind,
            model: self.model.config.clone(),
            stage: self.stage,
            epoch: self.epoch,
            stage_step: self.stage_step,
            global_step: self.global_step,
            seed: self.seed,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.insert(
            "meta",
            serde_json::to_vec(&self.meta(CheckpointKind::Full)).expect("meta serializes"),
        );
        c.insert("model", checkpoint::encode_model(&self.model));
        c.insert("teacher", checkpoint::encode_teacher(&self.teacher));
        let mut w = Writer::new();
        self.optimizer.write(&mut w);
        c.insert("optimizer", w.into_inner());
        c.insert("queue", self.queue.to_bytes());
        if let Some(s) = &self.sampler {
            let mut w = Writer::new();
            s.write(&mut w);
            c.insert("sampler", w.into_inner());
        }
        c.insert("rng", checkpoint::encode_rng(&self.rng));
        c
    }

    /// Model, teacher and counters only; enough for evaluation.
    pub fn to_model_only(&self) -> Container {
        let mut c = Container::default();
        c.insert(
            "meta",
            serde_json::to_vec(&self.meta(CheckpointKind::ModelOnly)).expect("meta serializes"),
        );
        c.insert("model", checkpoint::encode_model(&self.model));
        c.insert("teacher", checkpoint::encode_teacher(&self.teacher));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = read_meta(c)?;
        if meta.kind != CheckpointKind::Full {
            return Err(Error::Checkpoint(
                "checkpoint holds model weights only; training needs a full checkpoint (optimizer, queue, sampler, rng)"
                    .into(),
            ));
        }
        let model = checkpoint::decode_model(c.get("model")?)?;
        if model.config != meta.model {
            return Err(Error::Checkpoint(
                "model segment disagrees with checkpoint metadata".into(),
            ));
        }
        let teacher = checkpoint::decode_teacher(c.get("teacher")?)?;
        let mut r = Reader::new(c.get("optimizer")?, "optimizer segment");
        let optimizer = AdamW::read(&mut r)?;
        r.finish()?;
        let queue = QueueState::from_bytes(c.get("queue")?, Some(model.config.embed_dim))?;
        let sampler = if c.has("sampler") {
            let mut r = Reader::new(c.get("sampler")?, "sampler segment");
            let s = RoundRobinSampler::read(&mut r)?;
            r.finish()?;
            Some(s)
        } else {
            None
        };
        Ok(Self {
            model,
            teacher,
            optimizer,
            queue,
            sampler,
            rng: checkpoint::decode_rng(c.get("rng")?)?,
            seed: meta.seed,
            stage: meta.stage,
            epoch: meta.epoch,
            stage_step: meta.stage_step,
            global_step: meta.global_step,
            teacher_cls: TeacherCache::default(),
        })
    }
}

pub fn read_meta(c: &Container) -> Result<CheckpointMeta> {
    serde_json::from_slice(c.get("meta")?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
}

/// Model and teacher restored from any checkpoint kind, for evaluation.
#[derive(Clone, Debug)]
pub struct EvalModel {
    pub model: Model,
    pub teacher: Teacher,
    pub meta: CheckpointMeta,
}

pub fn load_for_eval(c: &Container) -> Result<EvalModel> {
    let meta = read_meta(c)?;
    Ok(EvalModel {
        model: checkpoint::decode_model(c.get("model")?)?,
        teacher: checkpoint::decode_teacher(c.get("teacher")?)?,
        meta,
    })
}

fn cls_rows(tokens: &Array2<f32>, batch: usize, seq: usize) -> Array2<f64> {
    Array2::from_shape_fn((batch, tokens.ncols()), |(b, j)| {
        tokens[[b * seq, j]] as f64
    })
}

fn patch_rows(tokens: &Array2<f32>, batch: usize, seq: usize) -> Array3<f64> {
    Array3::from_shape_fn((batch, seq - 1, tokens.ncols()), |(b, i, j)| {
        tokens[[b * seq + 1 + i, j]] as f64
    })
}

/// Per-term values and embedding gradients for one batch.
pub(crate) struct BatchLosses {
    pub values: TermValues,
    pub active: ActiveTerms,
    pub d_ms_cls: Array2<f64>,
    pub d_rgb_cls: Array2<f64>,
    pub d_ms_patch: Array3<f64>,
    pub d_rgb_patch: Array3<f64>,
    /// Weighted neighbourhood-term gradient on the band CLS rows.
    pub d_la: Option<Array2<f64>>,
}

/// Evaluates the terms enabled in `weights` and their weighted gradients.
/// Terms whose weight is `Some(0.0)` are evaluated but send no gradient.
pub(crate) fn batch_losses(
    weights: &LossWeights,
    z_t: &Array2<f64>,
    ms_tokens: &Array2<f32>,
    rgb_tokens: Option<&Array2<f32>>,
    queue: Option<&QueueState>,
    batch: usize,
    seq: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLosses> {
    let z_ms = cls_rows(ms_tokens, batch, seq);
    let d = z_ms.ncols();
    let mut out = BatchLosses {
        values: TermValues::default(),
        active: ActiveTerms::none(),
        d_ms_cls: Array2::zeros((batch, d)),
        d_rgb_cls: Array2::zeros((batch, d)),
        d_ms_patch: Array3::zeros((batch, seq - 1, d)),
        d_rgb_patch: Array3::zeros((batch, seq - 1, d)),
        d_la: None,
    };
    if let Some(w) = weights.lambda_d {
        let o = distill_loss(z_ms.view(), z_t.view())?;
        out.values.set(LossTerm::Distill, o.value);
        out.active = out.active.with(LossTerm::Distill, true);
        out.d_ms_cls.scaled_add(w, &o.grad_student);
    }
    if weights.lambda_c.is_some() || weights.lambda_p.is_some() {
        let rgb_tokens = rgb_tokens.ok_or_else(|| Error::Training("RGB forward missing".into()))?;
        if let Some(w) = weights.lambda_c {
            let z_rgb = cls_rows(rgb_tokens, batch, seq);
            let o = contrastive_loss(z_rgb.view(), z_ms.view(), weights.tau)?;
            out.values.set(LossTerm::Contrast, o.value);
            out.active = out.active.with(LossTerm::Contrast, true);
            out.d_ms_cls.scaled_add(w, &o.grad_ms);
            out.d_rgb_cls.scaled_add(w, &o.grad_rgb);
        }
        if let Some(w) = weights.lambda_p {
            let p_rgb = patch_rows(rgb_tokens, batch, seq);
            let p_ms = patch_rows(ms_tokens, batch, seq);
            let o = patch_loss(p_rgb.view(), p_ms.view(), weights.patch_sample_ratio, rng)?;
            out.values.set(LossTerm::Patch, o.value);
            out.active = out.active.with(LossTerm::Patch, true);
            out.d_ms_patch.scaled_add(w, &o.grad_ms);
            out.d_rgb_patch.scaled_add(w, &o.grad_rgb);
        }
    }
    if let (Some(w), Some(q)) = (weights.lambda_a, queue) {
        let o = neighborhood_kl(z_t.view(), z_ms.view(), q, weights.top_k, weights.tau)?;
        out.values.set(LossTerm::Neighborhood, o.value);
        out.active = out.active.with(LossTerm::Neighborhood, true);
        let g = o.grad_ms * w;
        out.d_ms_cls += &g;
        out.d_la = Some(g);
    }
    Ok(out)
}

fn token_grad(cls: &Array2<f64>, patches: &Array3<f64>, seq: usize) -> Array2<f32> {
    let (batch, n, d) = patches.dim();
    let mut dy = Array2::zeros((batch * seq, d));
    for b in 0..batch {
        dy.row_mut(b * seq).assign(&cls.row(b).mapv(|v| v as f32));
        dy.slice_mut(s![b * seq + 1..b * seq + 1 + n, ..])
            .assign(&patches.index_axis(ndarray::Axis(0), b).mapv(|v| v as f32));
    }
    dy
}

/// One optimizer step on a batch of pairs sharing band `m`:
/// teacher CLS on RGB, student on the band and on RGB, the stage's losses,
/// AdamW at `lr_at(stage_step)`, then the teacher batch enters the queue
/// when the stage uses the neighbourhood term.
pub fn train_step(
    state: &mut TrainState,
    cfg: &StageConfig,
    total_steps: u64,
    m: ModalityId,
    batch: &[&PairedSample],
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    if batch.iter().any(|p| p.modality != m) || m.is_rgb() {
        return Err(Error::Routing(format!(
            "batch for {m} mixes bands or is RGB"
        )));
    }
    let b = batch.len();
    let seq = state.model.config.seq_len();
    let rgb_views: Vec<ArrayView3<f32>> = batch.iter().map(|p| p.rgb.view()).collect();
    let ms_views: Vec<ArrayView3<f32>> = batch.iter().map(|p| p.ms.view()).collect();

    let z_t = state.teacher_cls.lookup(&state.teacher, batch)?;
    let (ms_tokens, ms_cache) = state.model.forward_group(&ms_views, m)?;
    let needs_rgb = cfg.weights.lambda_c.is_some() || cfg.weights.lambda_p.is_some();
    let rgb = if needs_rgb {
        Some(state.model.forward_group(&rgb_views, ModalityId::RGB)?)
    } else {
        None
    };

    let epoch = state.epoch as usize;
    let mut weights = cfg.weights.clone();
    weights.lambda_a = cfg.effective_lambda_a(epoch);
    let queue = match weights.lambda_a {
        Some(w) if state.queue.is_empty() => {
            if w > 0.0 {
                return Err(Error::Training(format!(
                    "neighbourhood loss active (weight {w}) at stage {} epoch {epoch} but the teacher queue is empty",
                    cfg.stage
                )));
            }
            None
        }
        Some(_) => Some(&state.queue),
        None => None,
    };
    if queue.is_none() {
        weights.lambda_a = None;
    }
    let losses = batch_losses(
        &weights,
        &z_t,
        &ms_tokens,
        rgb.as_ref().map(|(t, _)| t),
        queue,
        b,
        seq,
        &mut state.rng,
    )?;
    let report = total_loss(&losses.values, &weights, losses.active)?;

    let la_grad_norm = losses.d_la.as_ref().map(|g| {
        let zeros = Array3::zeros((b, seq - 1, g.ncols()));
        let dy = token_grad(g, &zeros, seq);
        let (dg, db) = ms_cache.final_norm_grads(dy.view());
        dg.iter()
            .chain(db.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    });

    state.model.zero_grad();
    let dy_ms = token_grad(&losses.d_ms_cls, &losses.d_ms_patch, seq);
    state.model.backward_group(&ms_cache, dy_ms.view());
    if let Some((_, rgb_cache)) = &rgb {
        let dy_rgb = token_grad(&losses.d_rgb_cls, &losses.d_rgb_patch, seq);
        state.model.backward_group(rgb_cache, dy_rgb.view());
    }
    let lr = lr_at(
        state.stage_step,
        total_steps,
        cfg.base_lr,
        cfg.warmup_fraction,
    );
    state.optimizer.step(&mut state.model, lr);

    if cfg.uses_queue() {
        state.queue.push_batch(z_t.view())?;
    }
    state.stage_step += 1;
    state.global_step += 1;
    Ok(StepOutput {
        report,
        lr,
        lambda_a: cfg.effective_lambda_a(epoch),
        la_grad_norm,
    })
}
