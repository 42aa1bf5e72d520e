//! Cross-modal alignment metrics and embedding export.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairedSet;
use crate::error::{Error, Result};
use crate::losses::normalize_rows;
use crate::model::{ModalityId, Model, Teacher};

/// Samples per forward call when embedding a whole split.
pub const EVAL_CHUNK: usize = 32;
/// Smallest split on which retrieval is reported.
pub const MIN_RETRIEVAL_SCENES: usize = 10;

/// CLS embeddings `(B, D)` of `images` routed as modality `m`.
pub fn embed_cls(model: &Model, images: &[ArrayView3<f32>], m: ModalityId) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((images.len(), model.config.embed_dim));
    let seq = model.config.seq_len();
    for (c, chunk) in images.chunks(EVAL_CHUNK).enumerate() {
        let (tokens, _) = model.forward_group(chunk, m)?;
        for b in 0..chunk.len() {
            out.row_mut(c * EVAL_CHUNK + b)
                .assign(&tokens.row(b * seq).mapv(|v| v as f64));
        }
    }
    Ok(out)
}

pub fn teacher_cls(teacher: &Teacher, images: &[ArrayView3<f32>]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((images.len(), teacher.config.embed_dim));
    for (c, chunk) in images.chunks(EVAL_CHUNK).enumerate() {
        for (b, bundle) in teacher.forward(chunk)?.into_iter().enumerate() {
            out.row_mut(c * EVAL_CHUNK + b)
                .assign(&bundle.cls.mapv(|v| v as f64));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub top1: f64,
    pub top5: f64,
    /// Rank of the true partner for each query (0 = first).
    pub ranks: Vec<usize>,
}

/// For each query row `i`, ranks every gallery row by cosine similarity and
/// finds where gallery row `i` lands. Equal similarities order by lower index.
pub fn retrieval(queries: ArrayView2<f64>, gallery: ArrayView2<f64>) -> Result<Retrieval> {
    let n = queries.nrows();
    if gallery.dim() != queries.dim() {
        return Err(Error::Shape(format!(
            "{:?} queries vs {:?} gallery",
            queries.dim(),
            gallery.dim()
        )));
    }
    if n < MIN_RETRIEVAL_SCENES {
        return Err(Error::Config(format!(
            "retrieval needs at least {MIN_RETRIEVAL_SCENES} scenes, split has {n}"
        )));
    }
    let (q, _) = normalize_rows(queries)?;
    let (g, _) = normalize_rows(gallery)?;
    let sims = q.dot(&g.t());
    let ranks: Vec<usize> = (0..n)
        .map(|i| {
            let own = sims[[i, i]];
            (0..n)
                .filter(|&j| sims[[i, j]] > own || (sims[[i, j]] == own && j < i))
                .count()
        })
        .collect();
    let frac = |k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(Retrieval {
        top1: frac(1),
        top5: frac(5),
        ranks,
    })
}

/// Mean cosine similarity between matching rows.
pub fn mean_paired_cosine(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let (a, _) = normalize_rows(a)?;
    let (b, _) = normalize_rows(b)?;
    let n = a.nrows() as f64;
    Ok(a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.dot(&y))
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityAlignment {
    pub modality: ModalityId,
    pub pairs: usize,
    pub mean_cosine: f64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub stage: Option<String>,
    pub modalities: Vec<ModalityAlignment>,
    /// Top-1 retrieval averaged over the reported modalities.
    pub mean_top1: f64,
}

impl AlignmentReport {
    pub fn get(&self, m: ModalityId) -> Option<&ModalityAlignment> {
        self.modalities.iter().find(|a| a.modality == m)
    }
}

/// Student embeddings of every pair: per band, `(rgb, ms)` CLS matrices.
pub fn split_embeddings(
    model: &Model,
    set: &PairedSet,
) -> Result<Vec<(ModalityId, Array2<f64>, Array2<f64>)>> {
    let mut rgb_cache: HashMap<u64, ndarray::Array1<f64>> = HashMap::new();
    let mut out = Vec::new();
    for m in ModalityId::MULTISPECTRAL {
        let pairs = set.get(m);
        if pairs.is_empty() {
            continue;
        }
        let missing: Vec<_> = pairs
            .iter()
            .filter(|p| !rgb_cache.contains_key(&p.scene_id))
            .collect();
        let views: Vec<_> = missing.iter().map(|p| p.rgb.view()).collect();
        let emb = embed_cls(model, &views, ModalityId::RGB)?;
        for (p, row) in missing.iter().zip(emb.rows()) {
            rgb_cache.insert(p.scene_id, row.to_owned());
        }
        let mut rgb = Array2::zeros((pairs.len(), model.config.embed_dim));
        for (i, p) in pairs.iter().enumerate() {
            rgb.row_mut(i).assign(&rgb_cache[&p.scene_id]);
        }
        let views: Vec<_> = pairs.iter().map(|p| p.ms.view()).collect();
        let ms = embed_cls(model, &views, m)?;
        out.push((m, rgb, ms));
    }
    Ok(out)
}

/// Paired cosine and MS-to-RGB retrieval for every band present in `set`.
pub fn evaluate_alignment(
    model: &Model,
    set: &PairedSet,
    stage: Option<&str>,
) -> Result<AlignmentReport> {
    let mut modalities = Vec::new();
    for (m, rgb, ms) in split_embeddings(model, set)? {
        let r = retrieval(ms.view(), rgb.view())?;
        modalities.push(ModalityAlignment {
            modality: m,
            pairs: ms.nrows(),
            mean_cosine: mean_paired_cosine(rgb.view(), ms.view())?,
            top1: r.top1,
            top5: r.top5,
        });
    }
    if modalities.is_empty() {
        return Err(Error::Config("split has no pairs to evaluate".into()));
    }
    let mean_top1 = modalities.iter().map(|a| a.top1).sum::<f64>() / modalities.len() as f64;
    Ok(AlignmentReport {
        stage: stage.map(str::to_string),
        modalities,
        mean_top1,
    })
}

/// Default number of pairs per band in an embedding export.
pub const DEFAULT_EXPORT_COUNT: usize = 100;

/// CSV with header `scene_id,pair,modality,e0,..`. For each band, `count`
/// pairs are drawn without replacement by `seed`; each contributes an RGB row
/// and a band row sharing the pair label (`rgb-nir`, ...).
pub fn export_embeddings(
    model: &Model,
    set: &PairedSet,
    count: usize,
    seed: u64,
) -> Result<String> {
    let d = model.config.embed_dim;
    let mut out = String::from("scene_id,pair,modality");
    for i in 0..d {
        let _ = write!(out, ",e{i}");
    }
    out.push('\n');
    for m in ModalityId::MULTISPECTRAL {
        let pairs = set.get(m);
        if pairs.is_empty() {
            continue;
        }
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ m.index() as u64));
        idx.truncate(count.min(pairs.len()));
        idx.sort_unstable();
        let rgb_views: Vec<_> = idx.iter().map(|&i| pairs[i].rgb.view()).collect();
        let ms_views: Vec<_> = idx.iter().map(|&i| pairs[i].ms.view()).collect();
        let rgb = embed_cls(model, &rgb_views, ModalityId::RGB)?;
        let ms = embed_cls(model, &ms_views, m)?;
        for (k, &i) in idx.iter().enumerate() {
            for (band, emb) in [(ModalityId::RGB, &rgb), (m, &ms)] {
                let _ = write!(
                    out,
                    "{},rgb-{},{}",
                    pairs[i].scene_id,
                    m.name(),
                    band.name()
                );
                for v in emb.row(k) {
                    let _ = write!(out, ",{}", *v as f32);
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}
