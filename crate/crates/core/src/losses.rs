//! The four alignment objectives and their weighted combination.
//!
//! Every loss works in `f64` and returns its analytic gradient with respect
//! to the student-side inputs. Teacher embeddings and queue rows are
//! constants.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queue::QueueState;

/// Rows with a norm at or below this are rejected rather than clamped.
pub const DEGENERATE_NORM: f64 = 1e-12;
pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_TOP_K: usize = 128;

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

fn check_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    if a.first() == Some(&0) {
        return Err(Error::Shape(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Unit-normalized rows and the original norms.
pub fn normalize_rows(x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut xhat = x.to_owned();
    let mut norms = Array1::zeros(x.nrows());
    for (i, (mut row, n)) in xhat
        .rows_mut()
        .into_iter()
        .zip(norms.iter_mut())
        .enumerate()
    {
        let norm = row.dot(&row).sqrt();
        if !(norm > DEGENERATE_NORM) {
            return Err(Error::DegenerateEmbedding { row: i, norm });
        }
        *n = norm;
        row /= norm;
    }
    Ok((xhat, norms))
}

/// Back-propagates through `x -> x / |x|`.
pub(crate) fn normalize_backward(
    xhat: &Array2<f64>,
    norms: &Array1<f64>,
    dxhat: &Array2<f64>,
) -> Array2<f64> {
    let mut dx = dxhat.clone();
    Zip::from(dx.rows_mut())
        .and(xhat.rows())
        .and(norms)
        .for_each(|mut g, u, &n| {
            let radial = g.dot(&u);
            g.scaled_add(-radial, &u);
            g /= n;
        });
    dx
}

#[derive(Clone, Debug)]
pub struct DistillOutput {
    pub value: f64,
    pub grad_student: Array2<f64>,
}

/// `1 - mean_i cos(z_ms_i, z_teacher_i)`, in `[0, 2]`.
pub fn distill_loss(z_ms: ArrayView2<f64>, z_teacher: ArrayView2<f64>) -> Result<DistillOutput> {
    check_same_shape(z_ms.shape(), z_teacher.shape(), "distill")?;
    let b = z_ms.nrows() as f64;
    let (s, s_norm) = normalize_rows(z_ms)?;
    let (t, _) = normalize_rows(z_teacher)?;
    let cos = (&s * &t).sum_axis(Axis(1));
    let value = 1.0 - cos.sum() / b;
    let dshat = t.mapv(|v| -v / b);
    let grad_student = normalize_backward(&s, &s_norm, &dshat);
    Ok(DistillOutput {
        value,
        grad_student,
    })
}

#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub value: f64,
    pub grad_rgb: Array2<f64>,
    pub grad_ms: Array2<f64>,
}

/// Per row `i`: `softmax(s_i) - e_i` and `-log softmax(s_i)_i`. When the
/// diagonal is the row maximum both come from the off-diagonal mass, so a
/// near-zero loss keeps full relative precision.
fn softmax_minus_eye(s: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut d = s.clone();
    let mut nll = Vec::with_capacity(s.nrows());
    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
        let own = row[i];
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if own == max {
            row.mapv_inplace(|v| (v - own).exp());
            row[i] = 0.0;
            let rest = row.sum();
            row.mapv_inplace(|v| v / (1.0 + rest));
            row[i] = -rest / (1.0 + rest);
            nll.push(rest.ln_1p());
        } else {
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| (v - lse).exp());
            row[i] -= 1.0;
            nll.push(lse - own);
        }
    }
    (d, nll)
}

fn log_softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Symmetric InfoNCE with in-batch negatives; the positive pair is part of
/// each denominator.
pub fn contrastive_loss(
    z_rgb: ArrayView2<f64>,
    z_ms: ArrayView2<f64>,
    tau: f64,
) -> Result<ContrastiveOutput> {
    check_tau(tau)?;
    check_same_shape(z_rgb.shape(), z_ms.shape(), "contrastive")?;
    let b = z_rgb.nrows();
    let bf = b as f64;
    let (r, r_norm) = normalize_rows(z_rgb)?;
    let (m, m_norm) = normalize_rows(z_ms)?;
    let sim = r.dot(&m.t()) / tau;

    // rgb -> ms: rows of `sim`; ms -> rgb: rows of `sim^T`.
    let (d_rm, nll_rm) = softmax_minus_eye(&sim);
    let (d_mr, nll_mr) = softmax_minus_eye(&sim.t().to_owned());
    let value = 0.5 * (nll_rm.iter().sum::<f64>() + nll_mr.iter().sum::<f64>()) / bf;
    let (d_rm, d_mr) = (d_rm / bf, d_mr / bf);
    // d value / d sim, with the ms -> rgb term transposed back.
    let dsim = (d_rm + d_mr.t()) * (0.5 / tau);
    let drhat = dsim.dot(&m);
    let dmhat = dsim.t().dot(&r);
    Ok(ContrastiveOutput {
        value,
        grad_rgb: normalize_backward(&r, &r_norm, &drhat),
        grad_ms: normalize_backward(&m, &m_norm, &dmhat),
    })
}

/// `max(1, floor(ratio * n))`.
pub fn patch_sample_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).floor() as usize).clamp(1, n)
}

/// Draws the shared patch subset for one call.
pub fn sample_patch_indices<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "patch sample ratio must be in (0, 1], got {ratio}"
        )));
    }
    let s = patch_sample_count(n, ratio);
    Ok(rand::seq::index::sample(rng, n, s).into_vec())
}

#[derive(Clone, Debug)]
pub struct PatchOutput {
    pub value: f64,
    pub grad_rgb: Array3<f64>,
    pub grad_ms: Array3<f64>,
    pub indices: Vec<usize>,
}

/// Patch alignment over a random subset of `max(1, floor(ratio * N))`
/// indices, shared by both pathways and every batch row.
pub fn patch_loss<R: Rng>(
    p_rgb: ArrayView3<f64>,
    p_ms: ArrayView3<f64>,
    ratio: f64,
    rng: &mut R,
) -> Result<PatchOutput> {
    check_same_shape(p_rgb.shape(), p_ms.shape(), "patch")?;
    let indices = sample_patch_indices(p_rgb.dim().1, ratio, rng)?;
    patch_loss_at(p_rgb, p_ms, &indices)
}

/// Patch alignment over an explicit index set.
pub fn patch_loss_at(
    p_rgb: ArrayView3<f64>,
    p_ms: ArrayView3<f64>,
    indices: &[usize],
) -> Result<PatchOutput> {
    check_same_shape(p_rgb.shape(), p_ms.shape(), "patch")?;
    let (b, n, d) = p_rgb.dim();
    if indices.is_empty() || indices.iter().any(|&j| j >= n) {
        return Err(Error::Shape(format!(
            "patch indices must be non-empty and < {n}"
        )));
    }
    let count = (b * indices.len()) as f64;
    let mut a = Array2::zeros((b * indices.len(), d));
    let mut c = Array2::zeros((b * indices.len(), d));
    for i in 0..b {
        for (s, &j) in indices.iter().enumerate() {
            a.row_mut(i * indices.len() + s)
                .assign(&p_rgb.slice(ndarray::s![i, j, ..]));
            c.row_mut(i * indices.len() + s)
                .assign(&p_ms.slice(ndarray::s![i, j, ..]));
        }
    }
    let (ah, an) = normalize_rows(a.view())?;
    let (ch, cn) = normalize_rows(c.view())?;
    let cos = (&ah * &ch).sum_axis(Axis(1));
    let value = 1.0 - cos.sum() / count;
    let ga = normalize_backward(&ah, &an, &ch.mapv(|v| -v / count));
    let gc = normalize_backward(&ch, &cn, &ah.mapv(|v| -v / count));
    let mut grad_rgb = Array3::zeros((b, n, d));
    let mut grad_ms = Array3::zeros((b, n, d));
    for i in 0..b {
        for (s, &j) in indices.iter().enumerate() {
            grad_rgb
                .slice_mut(ndarray::s![i, j, ..])
                .assign(&ga.row(i * indices.len() + s));
            grad_ms
                .slice_mut(ndarray::s![i, j, ..])
                .assign(&gc.row(i * indices.len() + s));
        }
    }
    Ok(PatchOutput {
        value,
        grad_rgb,
        grad_ms,
        indices: indices.to_vec(),
    })
}

#[derive(Clone, Debug)]
pub struct NeighborhoodOutput {
    pub value: f64,
    pub grad_ms: Array2<f64>,
    pub k_eff: usize,
}

/// Mean `KL(p_t || p_m)` over each sample's top-k queue neighbours, where the
/// neighbours are chosen by teacher similarity.
pub fn neighborhood_kl(
    z_teacher: ArrayView2<f64>,
    z_ms: ArrayView2<f64>,
    queue: &QueueState,
    k: usize,
    tau: f64,
) -> Result<NeighborhoodOutput> {
    check_tau(tau)?;
    check_same_shape(z_teacher.shape(), z_ms.shape(), "neighborhood")?;
    if k == 0 {
        return Err(Error::Config("top-k must be positive".into()));
    }
    if queue.is_empty() {
        return Err(Error::QueueEmpty);
    }
    let bf = z_ms.nrows() as f64;
    let (t, _) = normalize_rows(z_teacher)?;
    let (s, s_norm) = normalize_rows(z_ms)?;
    let top = queue.top_k(t.view(), k)?;
    let k_eff = top.indices[0].len();

    let mut value = 0.0;
    let mut dshat = Array2::zeros(s.raw_dim());
    for (i, (idx, tsims)) in top.indices.iter().zip(&top.sims).enumerate() {
        let neighbours = Array2::from_shape_fn((idx.len(), queue.dim()), |(r, c)| {
            queue.row(idx[r])[c] as f64
        });
        let st = Array2::from_shape_vec((1, idx.len()), tsims.iter().map(|v| v / tau).collect())
            .unwrap();
        let sm = (neighbours.dot(&s.row(i)) / tau).insert_axis(Axis(0));
        let log_pt = log_softmax_rows(&st);
        let log_pm = log_softmax_rows(&sm);
        let mut kl = 0.0;
        let mut dlogit = Array1::zeros(idx.len());
        for j in 0..idx.len() {
            let pt = log_pt[[0, j]].exp();
            if pt > 0.0 {
                kl += pt * (log_pt[[0, j]] - log_pm[[0, j]]);
            }
            dlogit[j] = log_pm[[0, j]].exp() - pt;
        }
        value += kl / bf;
        let g = neighbours.t().dot(&dlogit) / (tau * bf);
        dshat.row_mut(i).assign(&g);
    }
    Ok(NeighborhoodOutput {
        value,
        grad_ms: normalize_backward(&s, &s_norm, &dshat),
        k_eff,
    })
}

/// The four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Distill,
    Contrast,
    Patch,
    Neighborhood,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [
        LossTerm::Distill,
        LossTerm::Contrast,
        LossTerm::Patch,
        LossTerm::Neighborhood,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Distill => "distill",
            LossTerm::Contrast => "contrast",
            LossTerm::Patch => "patch",
            LossTerm::Neighborhood => "neighborhood",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss term {s:?} (expected distill|contrast|patch|neighborhood)"
                ))
            })
    }
}

/// Set of enabled loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTerms([bool; 4]);

impl ActiveTerms {
    pub fn none() -> Self {
        Self([false; 4])
    }

    pub fn all() -> Self {
        Self([true; 4])
    }

    pub fn of(terms: &[LossTerm]) -> Self {
        let mut a = Self::none();
        for &t in terms {
            a.0[t.index()] = true;
        }
        a
    }

    pub fn contains(&self, t: LossTerm) -> bool {
        self.0[t.index()]
    }

    pub fn with(mut self, t: LossTerm, on: bool) -> Self {
        self.0[t.index()] = on;
        self
    }

    pub fn terms(&self) -> Vec<LossTerm> {
        LossTerm::ALL
            .into_iter()
            .filter(|t| self.contains(*t))
            .collect()
    }
}

/// Loss weights and neighbourhood-loss hyperparameters for one stage.
///
/// A `None` weight means the term is disabled for the stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_d: Option<f64>,
    pub lambda_c: Option<f64>,
    pub lambda_p: Option<f64>,
    pub lambda_a: Option<f64>,
    pub tau: f64,
    pub patch_sample_ratio: f64,
    pub top_k: usize,
}

impl LossWeights {
    pub fn stage_one() -> Self {
        Self {
            lambda_d: Some(2.0),
            lambda_c: Some(1.0),
            lambda_p: Some(0.1),
            lambda_a: None,
            tau: DEFAULT_TAU,
            patch_sample_ratio: 0.25,
            top_k: DEFAULT_TOP_K,
        }
    }

    pub fn stage_two() -> Self {
        Self {
            lambda_a: Some(0.5),
            ..Self::stage_one()
        }
    }

    pub fn stage_three() -> Self {
        Self {
            lambda_d: Some(0.5),
            lambda_c: Some(1.5),
            lambda_p: Some(0.25),
            lambda_a: Some(1.0),
            tau: DEFAULT_TAU,
            patch_sample_ratio: 0.5,
            top_k: DEFAULT_TOP_K,
        }
    }

    pub fn weight(&self, t: LossTerm) -> Option<f64> {
        match t {
            LossTerm::Distill => self.lambda_d,
            LossTerm::Contrast => self.lambda_c,
            LossTerm::Patch => self.lambda_p,
            LossTerm::Neighborhood => self.lambda_a,
        }
    }

    /// Terms with a weight present.
    pub fn enabled(&self) -> ActiveTerms {
        let mut a = ActiveTerms::none();
        for t in LossTerm::ALL {
            a = a.with(t, self.weight(t).is_some());
        }
        a
    }

    /// Removes the given terms.
    pub fn disable(&mut self, terms: &[LossTerm]) {
        for t in terms {
            match t {
                LossTerm::Distill => self.lambda_d = None,
                LossTerm::Contrast => self.lambda_c = None,
                LossTerm::Patch => self.lambda_p = None,
                LossTerm::Neighborhood => self.lambda_a = None,
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.patch_sample_ratio > 0.0 && self.patch_sample_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "patch sample ratio {} outside (0, 1]",
                self.patch_sample_ratio
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top-k must be positive".into()));
        }
        for t in LossTerm::ALL {
            if let Some(w) = self.weight(t) {
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(Error::Config(format!(
                        "weight for {} must be non-negative, got {w}",
                        t.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-term loss values; `None` where a term was not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub distill: Option<f64>,
    pub contrast: Option<f64>,
    pub patch: Option<f64>,
    pub neighborhood: Option<f64>,
}

impl TermValues {
    pub fn get(&self, t: LossTerm) -> Option<f64> {
        match t {
            LossTerm::Distill => self.distill,
            LossTerm::Contrast => self.contrast,
            LossTerm::Patch => self.patch,
            LossTerm::Neighborhood => self.neighborhood,
        }
    }

    pub fn set(&mut self, t: LossTerm, v: f64) {
        match t {
            LossTerm::Distill => self.distill = Some(v),
            LossTerm::Contrast => self.contrast = Some(v),
            LossTerm::Patch => self.patch = Some(v),
            LossTerm::Neighborhood => self.neighborhood = Some(v),
        }
    }
}

/// Weighted total plus the active per-term values. Inactive terms are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: TermValues,
    pub active: ActiveTerms,
}

impl LossReport {
    pub fn active_terms(&self) -> Vec<LossTerm> {
        self.active.terms()
    }
}

/// `sum_i lambda_i * term_i` over the active terms.
pub fn total_loss(
    values: &TermValues,
    weights: &LossWeights,
    active: ActiveTerms,
) -> Result<LossReport> {
    let mut total = 0.0;
    let mut terms = TermValues::default();
    for t in active.terms() {
        let w = weights.weight(t).ok_or_else(|| {
            Error::Config(format!(
                "{} is active but has no weight for this stage",
                t.name()
            ))
        })?;
        let v = values.get(t).ok_or(Error::MissingTerm(t.name()))?;
        total += w * v;
        terms.set(t, v);
    }
    Ok(LossReport {
        total,
        terms,
        active,
    })
}
