use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Container;
use super::config::{StageConfig, StageId};
use super::sampler::{mix, RoundRobinSampler};
use super::state::{batch_losses, train_step, TrainState};
use crate::data::PairedSet;
use crate::diagnostics::{
    mean_paired_cosine, retrieval, teacher_cls, AlignmentReport, ModalityAlignment, EVAL_CHUNK,
};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossTerm, LossWeights, TermValues};
use crate::model::{ModalityId, Model, Teacher};
use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: StageId,
    pub epoch: u64,
    pub step: u64,
    pub stage_step: u64,
    pub modality: ModalityId,
    pub batch: usize,
    pub lr: f64,
    pub losses: TermValues,
    pub total: f64,
    pub lambda_a: Option<f64>,
    pub la_grad_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: StageId,
    pub epoch: u64,
    pub step: u64,
    pub val_loss: f64,
    pub mean_top1: f64,
    pub top1: BTreeMap<String, f64>,
    pub mean_cosine: BTreeMap<String, f64>,
    pub best: bool,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Validation summary used for best-checkpoint selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub report: AlignmentReport,
    /// Stage I weighted loss (distill, contrast, patch) averaged per sample.
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: u64,
    pub mean_top1: f64,
    pub val_loss: f64,
}

impl BestRecord {
    /// Higher mean top-1, then lower validation loss.
    pub fn beats(&self, other: &BestRecord) -> bool {
        self.mean_top1 > other.mean_top1
            || (self.mean_top1 == other.mean_top1 && self.val_loss < other.val_loss)
    }
}

/// Teacher CLS embeddings of the validation pairs, fixed for a run.
#[derive(Clone, Debug)]
pub struct ValidationTargets {
    teacher: HashMap<u64, ndarray::Array1<f64>>,
}

impl ValidationTargets {
    pub fn new(teacher: &Teacher, val: &PairedSet) -> Result<Self> {
        let mut scenes: Vec<(u64, ArrayView3<f32>)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for m in ModalityId::MULTISPECTRAL {
            for p in val.get(m) {
                if seen.insert(p.scene_id) {
                    scenes.push((p.scene_id, p.rgb.view()));
                }
            }
        }
        let views: Vec<_> = scenes.iter().map(|(_, v)| *v).collect();
        let emb = teacher_cls(teacher, &views)?;
        Ok(Self {
            teacher: scenes
                .iter()
                .map(|(id, _)| *id)
                .zip(emb.rows().into_iter().map(|r| r.to_owned()))
                .collect(),
        })
    }
}

/// Alignment report plus the Stage I weighted loss on `val`.
///
/// Pairs are processed in manifest order in chunks of [`EVAL_CHUNK`]; patch
/// subsets come from a fixed generator so repeated calls agree.
pub fn validate(
    model: &Model,
    targets: &ValidationTargets,
    val: &PairedSet,
    stage: Option<&str>,
) -> Result<Validation> {
    let seq = model.config.seq_len();
    let d = model.config.embed_dim;
    let weights = LossWeights::stage_one();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut rgb_tokens: HashMap<u64, Array2<f32>> = HashMap::new();
    let mut modalities = Vec::new();
    let (mut loss_sum, mut count) = (0.0, 0usize);
    for m in ModalityId::MULTISPECTRAL {
        let pairs = val.get(m);
        if pairs.is_empty() {
            continue;
        }
        let mut rgb_cls = Array2::zeros((pairs.len(), d));
        let mut ms_cls = Array2::zeros((pairs.len(), d));
        for (c, chunk) in pairs.chunks(EVAL_CHUNK).enumerate() {
            let missing: Vec<_> = chunk
                .iter()
                .filter(|p| !rgb_tokens.contains_key(&p.scene_id))
                .collect();
            if !missing.is_empty() {
                let views: Vec<_> = missing.iter().map(|p| p.rgb.view()).collect();
                let (tok, _) = model.forward_group(&views, ModalityId::RGB)?;
                for (i, p) in missing.iter().enumerate() {
                    rgb_tokens.insert(
                        p.scene_id,
                        tok.slice(s![i * seq..(i + 1) * seq, ..]).to_owned(),
                    );
                }
            }
            let b = chunk.len();
            let mut rgb = Array2::zeros((b * seq, d));
            for (i, p) in chunk.iter().enumerate() {
                rgb.slice_mut(s![i * seq..(i + 1) * seq, ..])
                    .assign(&rgb_tokens[&p.scene_id]);
            }
            let views: Vec<_> = chunk.iter().map(|p| p.ms.view()).collect();
            let (ms, _) = model.forward_group(&views, m)?;
            let mut z_t = Array2::zeros((b, d));
            for (i, p) in chunk.iter().enumerate() {
                let t = targets.teacher.get(&p.scene_id).ok_or_else(|| {
                    Error::Training(format!("no teacher target for scene {}", p.scene_id))
                })?;
                z_t.row_mut(i).assign(t);
                rgb_cls
                    .row_mut(c * EVAL_CHUNK + i)
                    .assign(&rgb.row(i * seq).mapv(|v| v as f64));
                ms_cls
                    .row_mut(c * EVAL_CHUNK + i)
                    .assign(&ms.row(i * seq).mapv(|v| v as f64));
            }
            let l = batch_losses(&weights, &z_t, &ms, Some(&rgb), None, b, seq, &mut rng)?;
            let total = total_loss(&l.values, &weights, weights.enabled())?.total;
            loss_sum += total * b as f64;
            count += b;
        }
        let r = retrieval(ms_cls.view(), rgb_cls.view())?;
        modalities.push(ModalityAlignment {
            modality: m,
            pairs: pairs.len(),
            mean_cosine: mean_paired_cosine(rgb_cls.view(), ms_cls.view())?,
            top1: r.top1,
            top5: r.top5,
        });
    }
    if modalities.is_empty() {
        return Err(Error::Config("validation split has no pairs".into()));
    }
    let mean_top1 = modalities.iter().map(|a| a.top1).sum::<f64>() / modalities.len() as f64;
    Ok(Validation {
        report: AlignmentReport {
            stage: stage.map(str::to_string),
            modalities,
            mean_top1,
        },
        loss: loss_sum / count as f64,
    })
}

/// Result of a finished stage.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub best: BestRecord,
    /// Full training state at the best epoch; the next stage resumes from it.
    pub best_checkpoint: Container,
    pub last: TrainState,
}

/// Drives one stage step by step so it can be checkpointed and resumed at
/// any step boundary.
pub struct StageRunner<'a> {
    pub state: TrainState,
    pub cfg: StageConfig,
    train: &'a PairedSet,
    val: &'a PairedSet,
    targets: ValidationTargets,
    total_steps: u64,
    best: Option<(BestRecord, Container)>,
    done: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunnerMeta {
    cfg: StageConfig,
    total_steps: u64,
    best: Option<BestRecord>,
    done: bool,
}

impl<'a> StageRunner<'a> {
    /// Begins `cfg.stage` from `state`: applies the freeze spec, starts a
    /// fresh optimizer and sampler, and keeps model, queue and generator.
    pub fn start(
        mut state: TrainState,
        cfg: StageConfig,
        train: &'a PairedSet,
        val: &'a PairedSet,
    ) -> Result<Self> {
        cfg.validate(state.model.config.depth)?;
        if train.is_empty() {
            return Err(Error::Config("training split has no pairs".into()));
        }
        if state.queue.capacity() != cfg.queue_capacity {
            if !state.queue.is_empty() {
                return Err(Error::Config(format!(
                    "stage {} wants queue capacity {} but the resumed queue holds {} of {}",
                    cfg.stage,
                    cfg.queue_capacity,
                    state.queue.fill(),
                    state.queue.capacity()
                )));
            }
            state.queue =
                crate::queue::QueueState::new(cfg.queue_capacity, state.model.config.embed_dim)?;
        }
        state.model.set_trainable(&cfg.freeze)?;
        state.optimizer = AdamW::new(AdamWConfig::default());
        state.stage = cfg.stage;
        state.epoch = 0;
        state.stage_step = 0;
        let sampler = RoundRobinSampler::new(
            train.sizes(),
            cfg.batch_size,
            mix(state.seed ^ (cfg.stage.index() as u64 + 1)),
        )?;
        let total_steps = (sampler.epoch_len() * cfg.epochs) as u64;
        state.sampler = Some(sampler);
        let targets = ValidationTargets::new(&state.teacher, val)?;
        Ok(Self {
            state,
            cfg,
            train,
            val,
            targets,
            total_steps,
            best: None,
            done: false,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn best(&self) -> Option<&BestRecord> {
        self.best.as_ref().map(|(b, _)| b)
    }

    /// Runs one optimizer step (plus end-of-epoch validation when the epoch
    /// completes). Returns `None` once the stage is finished.
    pub fn step(&mut self) -> Result<Option<Vec<MetricRecord>>> {
        if self.done {
            return Ok(None);
        }
        let sampler = self
            .state
            .sampler
            .as_mut()
            .ok_or_else(|| Error::Training("sampler missing".into()))?;
        let (m, idx) = sampler
            .next_batch()
            .ok_or_else(|| Error::Training("sampler exhausted mid-epoch".into()))?;
        let pairs = self.train.get(m);
        let batch: Vec<_> = idx.iter().map(|&i| &pairs[i]).collect();
        let epoch = self.state.epoch;
        let out = train_step(&mut self.state, &self.cfg, self.total_steps, m, &batch)?;
        let mut records = vec![MetricRecord::Step(StepRecord {
            stage: self.cfg.stage,
            epoch,
            step: self.state.global_step,
            stage_step: self.state.stage_step,
            modality: m,
            batch: batch.len(),
            lr: out.lr,
            losses: out.report.terms,
            total: out.report.total,
            lambda_a: out.lambda_a,
            la_grad_norm: out.la_grad_norm,
        })];

        if self.state.sampler.as_ref().is_some_and(|s| s.epoch_done()) {
            records.push(self.end_epoch()?);
        }
        Ok(Some(records))
    }

    fn end_epoch(&mut self) -> Result<MetricRecord> {
        let epoch = self.state.epoch;
        let v = validate(
            &self.state.model,
            &self.targets,
            self.val,
            Some(self.cfg.stage.as_str()),
        )?;
        let record = BestRecord {
            epoch,
            mean_top1: v.report.mean_top1,
            val_loss: v.loss,
        };
        let is_best = self.best.as_ref().is_none_or(|(b, _)| record.beats(b));
        self.state.epoch += 1;
        if self.state.epoch as usize >= self.cfg.epochs {
            self.done = true;
        } else if let Some(s) = self.state.sampler.as_mut() {
            s.start_epoch(self.state.epoch);
        }
        if is_best {
            self.best = Some((record, self.state.to_container()));
        }
        let by_band = |f: fn(&ModalityAlignment) -> f64| {
            v.report
                .modalities
                .iter()
                .map(|a| (a.modality.name().to_string(), f(a)))
                .collect()
        };
        Ok(MetricRecord::Eval(EvalRecord {
            stage: self.cfg.stage,
            epoch,
            step: self.state.global_step,
            val_loss: v.loss,
            mean_top1: v.report.mean_top1,
            top1: by_band(|a| a.top1),
            mean_cosine: by_band(|a| a.mean_cosine),
            best: is_best,
        }))
    }

    /// Runs to completion, passing every record to `sink`.
    pub fn run(
        mut self,
        sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
    ) -> Result<StageOutcome> {
        while let Some(records) = self.step()? {
            for r in &records {
                sink(r)?;
            }
        }
        self.finish()
    }

    pub fn finish(self) -> Result<StageOutcome> {
        if !self.done {
            return Err(Error::Training(format!(
                "stage {} has not finished",
                self.cfg.stage
            )));
        }
        let (best, best_checkpoint) = self.best.expect("a finished stage validated at least once");
        Ok(StageOutcome {
            best,
            best_checkpoint,
            last: self.state,
        })
    }

    /// Full runner state: training state plus stage progress and the best
    /// checkpoint so far.
    pub fn checkpoint(&self) -> Container {
        let mut c = self.state.to_container();
        let meta = RunnerMeta {
            cfg: self.cfg.clone(),
            total_steps: self.total_steps,
            best: self.best.as_ref().map(|(b, _)| *b),
            done: self.done,
        };
        c.insert(
            "runner",
            serde_json::to_vec(&meta).expect("runner meta serializes"),
        );
        if let Some((_, best)) = &self.best {
            c.insert("best", best.to_bytes());
        }
        c
    }

    pub fn resume(
        c: &Container,
        cfg: StageConfig,
        train: &'a PairedSet,
        val: &'a PairedSet,
    ) -> Result<Self> {
        let meta: RunnerMeta = serde_json::from_slice(c.get("runner")?)
            .map_err(|e| Error::Checkpoint(format!("runner metadata: {e}")))?;
        let same = StageConfig {
            resume_from: None,
            ..meta.cfg.clone()
        } == StageConfig {
            resume_from: None,
            ..cfg.clone()
        };
        if !same {
            return Err(Error::Checkpoint(format!(
                "checkpoint was taken with a different stage {} configuration",
                meta.cfg.stage
            )));
        }
        let mut state = TrainState::from_container(c)?;
        if state.stage != cfg.stage || state.sampler.is_none() {
            return Err(Error::Checkpoint(format!(
                "checkpoint is not a stage {} runner checkpoint",
                cfg.stage
            )));
        }
        if state.sampler.as_ref().map(|s| s.sizes()) != Some(train.sizes()) {
            return Err(Error::Checkpoint(
                "training data differs from the checkpointed run".into(),
            ));
        }
        state.model.set_trainable(&cfg.freeze)?;
        let best = match meta.best {
            Some(b) => Some((b, Container::from_bytes(c.get("best")?)?)),
            None => None,
        };
        let targets = ValidationTargets::new(&state.teacher, val)?;
        Ok(Self {
            state,
            cfg,
            train,
            val,
            targets,
            total_steps: meta.total_steps,
            best,
            done: meta.done,
        })
    }
}

/// Resumes the next stage from a previous stage's best checkpoint.
pub fn state_for_stage(previous_best: &Container) -> Result<TrainState> {
    TrainState::from_container(previous_best)
}

/// Terms reported on a step record, in canonical order.
pub fn reported_terms(r: &StepRecord) -> Vec<LossTerm> {
    LossTerm::ALL
        .into_iter()
        .filter(|t| r.losses.get(*t).is_some())
        .collect()
}
