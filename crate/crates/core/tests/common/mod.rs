//! Straight-loop reference implementations used as test oracles. Nothing
//! here calls into the crate's loss code.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::Rng;

pub fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn distill_oracle(z_ms: &[Vec<f64>], z_t: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..z_ms.len() {
        s += cosine(&z_ms[i], &z_t[i]);
    }
    1.0 - s / z_ms.len() as f64
}

fn info_nce_direction(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let ai: Vec<f64> = a[i].iter().map(|v| v / norm(&a[i])).collect();
        let mut denom = 0.0;
        let mut pos = 0.0;
        for j in 0..n {
            let bj: Vec<f64> = b[j].iter().map(|v| v / norm(&b[j])).collect();
            let e = (dot(&ai, &bj) / tau).exp();
            denom += e;
            if i == j {
                pos = e;
            }
        }
        total += -(pos / denom).ln();
    }
    total / n as f64
}

pub fn contrast_oracle(z_rgb: &[Vec<f64>], z_ms: &[Vec<f64>], tau: f64) -> f64 {
    0.5 * (info_nce_direction(z_rgb, z_ms, tau) + info_nce_direction(z_ms, z_rgb, tau))
}

pub fn patch_oracle(p_rgb: &Array3<f64>, p_ms: &Array3<f64>, indices: &[usize]) -> f64 {
    let (b, _, d) = p_rgb.dim();
    let mut s = 0.0;
    for i in 0..b {
        for &j in indices {
            let a: Vec<f64> = (0..d).map(|k| p_rgb[[i, j, k]]).collect();
            let c: Vec<f64> = (0..d).map(|k| p_ms[[i, j, k]]).collect();
            s += cosine(&a, &c);
        }
    }
    1.0 - s / (b * indices.len()) as f64
}

/// `queue` holds `(physical index, row)` pairs for the stored entries.
pub fn neighborhood_oracle(
    z_t: &[Vec<f64>],
    z_ms: &[Vec<f64>],
    queue: &[(usize, Vec<f64>)],
    k: usize,
    tau: f64,
) -> f64 {
    let mut total = 0.0;
    for i in 0..z_t.len() {
        let t: Vec<f64> = z_t[i].iter().map(|v| v / norm(&z_t[i])).collect();
        let s: Vec<f64> = z_ms[i].iter().map(|v| v / norm(&z_ms[i])).collect();
        let mut scored: Vec<(f64, usize, &Vec<f64>)> =
            queue.iter().map(|(p, q)| (dot(&t, q), *p, q)).collect();
        // Selection sort: largest similarity first, lower index on ties.
        for a in 0..scored.len() {
            let mut best = a;
            for c in a + 1..scored.len() {
                let better = scored[c].0 > scored[best].0
                    || (scored[c].0 == scored[best].0 && scored[c].1 < scored[best].1);
                if better {
                    best = c;
                }
            }
            scored.swap(a, best);
        }
        let k_eff = k.min(scored.len());
        let top = &scored[..k_eff];
        let zt: f64 = top.iter().map(|e| (e.0 / tau).exp()).sum();
        let zm: f64 = top.iter().map(|e| (dot(&s, e.2) / tau).exp()).sum();
        let mut kl = 0.0;
        for e in top {
            let pt = (e.0 / tau).exp() / zt;
            let pm = (dot(&s, e.2) / tau).exp() / zm;
            if pt > 0.0 {
                kl += pt * (pt / pm).ln();
            }
        }
        total += kl;
    }
    total / z_t.len() as f64
}

/// Central finite differences of a scalar function of a matrix.
pub fn fd_grad(x: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + h;
        let fp = f(&xp);
        xp[[r, c]] = orig - h;
        let fm = f(&xp);
        xp[[r, c]] = orig;
        g[[r, c]] = (fp - fm) / (2.0 * h);
    }
    g
}

pub fn fd_grad3(x: &Array3<f64>, h: f64, f: impl Fn(&Array3<f64>) -> f64) -> Array3<f64> {
    let mut g = Array3::zeros(x.raw_dim());
    let mut xp = x.clone();
    let shape = x.dim();
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            for k in 0..shape.2 {
                let orig = xp[[i, j, k]];
                xp[[i, j, k]] = orig + h;
                let fp = f(&xp);
                xp[[i, j, k]] = orig - h;
                let fm = f(&xp);
                xp[[i, j, k]] = orig;
                g[[i, j, k]] = (fp - fm) / (2.0 * h);
            }
        }
    }
    g
}

/// `|a - b| / max(|a|, |b|)` in the Frobenius norm; zero when both vanish.
pub fn rel_err<'a>(
    a: impl IntoIterator<Item = &'a f64>,
    b: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.into_iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

pub fn rel_close(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

pub fn randn<R: Rng>(rng: &mut R, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(rand_distr::StandardNormal))
}

pub fn randn3<R: Rng>(rng: &mut R, a: usize, b: usize, c: usize) -> Array3<f64> {
    Array3::from_shape_simple_fn((a, b, c), || {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    })
}

pub mod suites {
    //! Randomized comparisons shared by the loss tests and the acceptance target.

    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use specalign::losses::{contrastive_loss, distill_loss, neighborhood_kl, patch_loss};
    use specalign::queue::QueueState;

    /// Worst relative error against the oracles over `trials` random
    /// instances with `B <= 8`, `D <= 16`: `[distill, contrast, patch, neighborhood]`.
    pub fn oracle_worst(trials: usize, seed: u64) -> [f64; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = [0.0f64; 4];
        for _ in 0..trials {
            let b = rng.gen_range(1..=8);
            let d = rng.gen_range(2..=16);
            let tau = rng.gen_range(0.05..1.0);
            let a = randn(&mut rng, b, d);
            let c = randn(&mut rng, b, d);

            let v = distill_loss(a.view(), c.view()).unwrap().value;
            worst[0] = worst[0].max(rel_close(v, distill_oracle(&rows(&a), &rows(&c))));

            let v = contrastive_loss(a.view(), c.view(), tau).unwrap().value;
            worst[1] = worst[1].max(rel_close(v, contrast_oracle(&rows(&a), &rows(&c), tau)));

            let n = rng.gen_range(1..=12);
            let pr = randn3(&mut rng, b, n, d);
            let pm = randn3(&mut rng, b, n, d);
            let ratio = rng.gen_range(0.01..=1.0);
            let out = patch_loss(pr.view(), pm.view(), ratio, &mut rng).unwrap();
            worst[2] = worst[2].max(rel_close(out.value, patch_oracle(&pr, &pm, &out.indices)));

            let cap = rng.gen_range(1..=24);
            let mut q = QueueState::new(cap, d).unwrap();
            let pushes = rng.gen_range(1..=3 * cap);
            for _ in 0..pushes {
                q.push_batch(randn(&mut rng, 1, d).view()).unwrap();
            }
            let k = rng.gen_range(1..=cap + 2);
            let stored = stored_rows(&q);
            let v = neighborhood_kl(a.view(), c.view(), &q, k, tau)
                .unwrap()
                .value;
            worst[3] = worst[3].max(rel_close(
                v,
                neighborhood_oracle(&rows(&a), &rows(&c), &stored, k, tau),
            ));
        }
        worst
    }

    pub fn stored_rows(q: &QueueState) -> Vec<(usize, Vec<f64>)> {
        let mut idx = q.fifo_order();
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| (i, q.row(i).iter().map(|&v| v as f64).collect()))
            .collect()
    }

    /// Worst relative error of analytic vs central finite-difference
    /// gradients (step 1e-4) for every student-side input:
    /// `[distill, contrast(rgb), contrast(ms), patch(rgb), patch(ms), neighborhood]`.
    pub fn gradient_worst(trials: usize, seed: u64) -> [f64; 6] {
        let h = 1e-4;
        let tau = 0.07;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = [0.0f64; 6];
        for _ in 0..trials {
            let b = rng.gen_range(1..=5);
            let d = rng.gen_range(2..=8);
            let s = randn(&mut rng, b, d);
            let t = randn(&mut rng, b, d);

            let g = distill_loss(s.view(), t.view()).unwrap().grad_student;
            let fd = fd_grad(&s, h, |x| distill_loss(x.view(), t.view()).unwrap().value);
            worst[0] = worst[0].max(rel_err(&g, &fd));

            let out = contrastive_loss(t.view(), s.view(), tau).unwrap();
            let fd_r = fd_grad(&t, h, |x| {
                contrastive_loss(x.view(), s.view(), tau).unwrap().value
            });
            let fd_m = fd_grad(&s, h, |x| {
                contrastive_loss(t.view(), x.view(), tau).unwrap().value
            });
            worst[1] = worst[1].max(rel_err(&out.grad_rgb, &fd_r));
            worst[2] = worst[2].max(rel_err(&out.grad_ms, &fd_m));

            let n = rng.gen_range(2..=6);
            let pr = randn3(&mut rng, b, n, d);
            let pm = randn3(&mut rng, b, n, d);
            let out = patch_loss(pr.view(), pm.view(), 0.5, &mut rng).unwrap();
            let idx = out.indices.clone();
            let fd_r = fd_grad3(&pr, h, |x| {
                specalign::losses::patch_loss_at(x.view(), pm.view(), &idx)
                    .unwrap()
                    .value
            });
            let fd_m = fd_grad3(&pm, h, |x| {
                specalign::losses::patch_loss_at(pr.view(), x.view(), &idx)
                    .unwrap()
                    .value
            });
            worst[3] = worst[3].max(rel_err(&out.grad_rgb, &fd_r));
            worst[4] = worst[4].max(rel_err(&out.grad_ms, &fd_m));

            let mut q = QueueState::new(16, d).unwrap();
            q.push_batch(randn(&mut rng, 12, d).view()).unwrap();
            let k = rng.gen_range(1..=12);
            let g = neighborhood_kl(t.view(), s.view(), &q, k, tau)
                .unwrap()
                .grad_ms;
            let fd = fd_grad(&s, h, |x| {
                neighborhood_kl(t.view(), x.view(), &q, k, tau)
                    .unwrap()
                    .value
            });
            worst[5] = worst[5].max(rel_err(&g, &fd));
        }
        worst
    }
}

pub mod checks {
    //! Table-driven and model-based checks shared with the acceptance target.
    //! Each returns the list of mismatches; empty means pass.

    use std::collections::VecDeque;

    use super::randn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use specalign::losses::LossWeights;
    use specalign::model::{ModalityId, Variant};
    use specalign::queue::{QueueState, PRESET_CAPACITY};
    use specalign::trainer::{RoundRobinSampler, StageConfig, StageId};

    fn cmp<T: PartialEq + std::fmt::Debug>(out: &mut Vec<String>, what: &str, got: T, want: T) {
        if got != want {
            out.push(format!("{what}: got {got:?}, want {want:?}"));
        }
    }

    /// Loss-weight and variant tables, cell by cell.
    pub fn config_fidelity() -> Vec<String> {
        let mut out = Vec::new();
        // (stage, lambda_d, lambda_c, lambda_p, lambda_a, psr)
        let weights = [
            (StageId::I, Some(2.0), Some(1.0), Some(0.1), None, 0.25),
            (
                StageId::II,
                Some(2.0),
                Some(1.0),
                Some(0.1),
                Some(0.5),
                0.25,
            ),
            (
                StageId::III,
                Some(0.5),
                Some(1.5),
                Some(0.25),
                Some(1.0),
                0.5,
            ),
        ];
        // (variant, D, bottleneck, depth, [epochs], [lr], [batch], unfrozen)
        let variants = [
            (
                Variant::VitS,
                384,
                96,
                12,
                [100, 10, 75],
                [1e-4, 1e-4, 5e-5],
                [128, 128, 128],
                6,
            ),
            (
                Variant::VitB,
                768,
                192,
                12,
                [100, 10, 75],
                [1e-4, 1e-4, 4e-5],
                [128, 128, 128],
                6,
            ),
            (
                Variant::VitL,
                1024,
                256,
                24,
                [100, 10, 75],
                [8e-5, 8e-5, 3e-5],
                [64, 64, 64],
                12,
            ),
            (
                Variant::VitG,
                1536,
                384,
                40,
                [50, 10, 30],
                [5e-5, 5e-5, 2e-5],
                [24, 24, 16],
                10,
            ),
        ];
        for (v, d, ab, depth, epochs, lrs, batches, unfrozen) in variants {
            let mc = v.model_config();
            cmp(&mut out, &format!("{v} D"), mc.embed_dim, d);
            cmp(
                &mut out,
                &format!("{v} bottleneck"),
                mc.adapter_bottleneck,
                ab,
            );
            cmp(&mut out, &format!("{v} depth"), mc.depth, depth);
            for (i, (stage, ld, lc, lp, la, psr)) in weights.into_iter().enumerate() {
                let sc = StageConfig::preset(v, stage);
                let tag = format!("{v} stage {stage}");
                let w: &LossWeights = &sc.weights;
                cmp(&mut out, &format!("{tag} lambda_d"), w.lambda_d, ld);
                cmp(&mut out, &format!("{tag} lambda_c"), w.lambda_c, lc);
                cmp(&mut out, &format!("{tag} lambda_p"), w.lambda_p, lp);
                cmp(&mut out, &format!("{tag} lambda_a"), w.lambda_a, la);
                cmp(&mut out, &format!("{tag} psr"), w.patch_sample_ratio, psr);
                cmp(&mut out, &format!("{tag} tau"), w.tau, 0.07);
                cmp(&mut out, &format!("{tag} top-k"), w.top_k, 128);
                cmp(
                    &mut out,
                    &format!("{tag} K"),
                    sc.queue_capacity,
                    PRESET_CAPACITY,
                );
                cmp(&mut out, &format!("{tag} epochs"), sc.epochs, epochs[i]);
                cmp(&mut out, &format!("{tag} lr"), sc.base_lr, lrs[i]);
                cmp(&mut out, &format!("{tag} batch"), sc.batch_size, batches[i]);
                let u = if stage == StageId::III { unfrozen } else { 0 };
                cmp(
                    &mut out,
                    &format!("{tag} unfrozen blocks"),
                    sc.freeze.unfrozen_blocks,
                    u,
                );
            }
        }
        cmp(&mut out, "K", PRESET_CAPACITY, 65_536);
        out
    }

    /// Adapter weight counts for every variant plus the ViT-B figures.
    pub fn adapter_accounting() -> Vec<String> {
        let mut out = Vec::new();
        for v in Variant::ALL {
            let mc = v.model_config();
            let a = mc.accounting();
            let d = mc.embed_dim;
            cmp(
                &mut out,
                &format!("{v} per-adapter"),
                a.weights_per_adapter,
                2 * d * (d / 4),
            );
            cmp(
                &mut out,
                &format!("{v} instances"),
                a.adapter_instances,
                mc.depth * 4,
            );
            cmp(
                &mut out,
                &format!("{v} total"),
                a.total_adapter_weights,
                mc.depth * 4 * 2 * d * (d / 4),
            );
        }
        let b = Variant::VitB.model_config().accounting();
        cmp(
            &mut out,
            "vit-b per-adapter",
            b.weights_per_adapter,
            294_912,
        );
        cmp(&mut out, "vit-b instances", b.adapter_instances, 48);
        let toy = Variant::Toy.model_config().accounting();
        cmp(&mut out, "toy per-adapter", toy.weights_per_adapter, 2_048);
        cmp(&mut out, "toy instances", toy.adapter_instances, 16);
        out
    }

    fn normalized(row: &[f64]) -> Vec<f32> {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter().map(|v| (v / n) as f32).collect()
    }

    /// `ops` random pushes, top-k queries and checkpoint round trips against
    /// a `VecDeque` reference, for several capacities.
    pub fn queue_model(ops: usize, seed: u64) -> Vec<String> {
        let mut out = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        for cap in [1usize, 3, 16, 64] {
            let mut q = QueueState::new(cap, d).unwrap();
            let mut reference: VecDeque<Vec<f32>> = VecDeque::new();
            for op in 0..ops {
                match rng.gen_range(0..10) {
                    0..=4 => {
                        let b = rng.gen_range(1..=cap);
                        let z = randn(&mut rng, b, d);
                        q.push_batch(z.view()).unwrap();
                        for r in z.rows() {
                            if reference.len() == cap {
                                reference.pop_front();
                            }
                            reference.push_back(normalized(r.as_slice().unwrap()));
                        }
                    }
                    5..=8 => {
                        let z = randn(&mut rng, 2, d);
                        let k = rng.gen_range(1..=cap + 2);
                        let got = q.top_k(z.view(), k);
                        if reference.is_empty() {
                            if got.is_ok() {
                                out.push(format!(
                                    "cap {cap} op {op}: top-k on empty queue succeeded"
                                ));
                            }
                            continue;
                        }
                        let got = got.unwrap();
                        for (qi, row) in z.rows().into_iter().enumerate() {
                            let norm = row.dot(&row).sqrt();
                            let mut scored: Vec<(f64, &Vec<f32>)> = reference
                                .iter()
                                .map(|e| {
                                    (
                                        e.iter()
                                            .zip(row.iter())
                                            .map(|(a, b)| *a as f64 * b)
                                            .sum::<f64>()
                                            / norm,
                                        e,
                                    )
                                })
                                .collect();
                            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
                            scored.truncate(k.min(reference.len()));
                            let rows: Vec<&[f32]> =
                                got.indices[qi].iter().map(|&i| q.row(i)).collect();
                            let want: Vec<&[f32]> = scored.iter().map(|s| s.1.as_slice()).collect();
                            if rows != want {
                                out.push(format!("cap {cap} op {op}: top-k entries differ"));
                            }
                            for (s, w) in got.sims[qi].iter().zip(&scored) {
                                if (s - w.0).abs() > 1e-12 {
                                    out.push(format!(
                                        "cap {cap} op {op}: similarity {s} vs {}",
                                        w.0
                                    ));
                                }
                            }
                        }
                    }
                    _ => {
                        let bytes = q.to_bytes();
                        let back = QueueState::from_bytes(&bytes, Some(d)).unwrap();
                        if back != q || back.to_bytes() != bytes {
                            out.push(format!(
                                "cap {cap} op {op}: checkpoint round trip not bit-exact"
                            ));
                        }
                        q = back;
                    }
                }
                let contents: Vec<&[f32]> = q.fifo_order().iter().map(|&i| q.row(i)).collect();
                let want: Vec<&[f32]> = reference.iter().map(|v| v.as_slice()).collect();
                if contents != want {
                    out.push(format!("cap {cap} op {op}: contents differ"));
                }
            }
        }
        out
    }

    /// Per-epoch step counts with equal datasets, and the N, S, L prefix.
    pub fn round_robin_fairness() -> Vec<String> {
        let mut out = Vec::new();
        for (n, bs) in [(200usize, 16usize), (10, 3), (7, 7), (1, 4), (33, 5)] {
            let mut s = RoundRobinSampler::new([n; 3], bs, 9).unwrap();
            for epoch in 0..2 {
                s.start_epoch(epoch);
                let mut counts = [0usize; 3];
                let mut order = Vec::new();
                while let Some((m, _)) = s.next_batch() {
                    counts[m.index() - 1] += 1;
                    order.push(m);
                }
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                if hi - lo > 1 {
                    out.push(format!("n={n} bs={bs} epoch {epoch}: counts {counts:?}"));
                }
                if order.len() >= 3
                    && order[..3] != [ModalityId::NIR, ModalityId::SWIR, ModalityId::LWIR]
                {
                    out.push(format!(
                        "n={n} bs={bs} epoch {epoch}: prefix {:?}",
                        &order[..3]
                    ));
                }
            }
        }
        out
    }
}
