mod common;

use ndarray::{Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use specalign::model::{Adapter, FreezeSpec, ModalityId, Model, ModelVariantConfig, Variant};
use specalign::nn::Parameters;

fn small_cfg() -> ModelVariantConfig {
    ModelVariantConfig::new("tiny", 16, 2, 2, 4, 8)
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, side: usize) -> Array3<f32> {
    Array3::from_shape_simple_fn((c, side, side), || rng.gen::<f32>())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn build_is_deterministic() {
    let cfg = Variant::Toy.model_config();
    let a = Model::build(&cfg, 7).unwrap();
    let b = Model::build(&cfg, 7).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.group_checksums(), b.group_checksums());
    let c = Model::build(&cfg, 8).unwrap();
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn build_rejects_invalid_config() {
    let mut cfg = Variant::Toy.model_config();
    cfg.adapter_bottleneck = 10;
    let err = Model::build(&cfg, 0).unwrap_err();
    assert!(err.to_string().contains("adapter_bottleneck"), "{err}");
}

#[test]
fn toy_model_has_sixteen_adapters_with_bottleneck_init() {
    let model = Model::build(&Variant::Toy.model_config(), 1).unwrap();
    assert_eq!(model.adapter_count(), 16);
    let report = model.trainable_report();
    assert_eq!(report.adapter_weights, 16 * 2 * 64 * 16);
    assert_eq!(
        report.adapter_params_with_bias,
        16 * (2 * 64 * 16 + 64 + 16)
    );
    let mut all = Vec::new();
    for row in &model.adapters {
        for a in row {
            assert!(a.down.bias.value.iter().all(|&b| b == 0.0));
            assert!(a.up.bias.value.iter().all(|&b| b == 0.0));
            all.extend(
                a.down
                    .weight
                    .value
                    .iter()
                    .chain(a.up.weight.value.iter())
                    .map(|&v| v as f64),
            );
        }
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 5e-4, "mean {mean}");
    assert!((std - 0.01).abs() < 5e-4, "std {std}");
}

#[test]
fn rgb_stem_identity_linearity_and_oracle() {
    let mut model = Model::build(&small_cfg(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_image(&mut rng, 3, 8);
    assert_eq!(model.rgb_stem_forward(x.view()).unwrap(), x);

    model.rgb_stem.proj.weight.value = Array2::eye(3) * 2.0;
    let y = model.rgb_stem_forward(x.view()).unwrap();
    assert_eq!(y, x.mapv(|v| 2.0 * v));

    let w = Array2::from_shape_simple_fn((3, 3), || rng.gen_range(-1.0f32..1.0));
    let b = Array2::from_shape_simple_fn((1, 3), || rng.gen_range(-1.0f32..1.0));
    model.rgb_stem.proj.weight.value = w.clone();
    model.rgb_stem.proj.bias.value = b.clone();
    let y = model.rgb_stem_forward(x.view()).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            for c in 0..3 {
                let mut acc = b[[0, c]] as f64;
                for k in 0..3 {
                    acc += w[[c, k]] as f64 * x[[k, i, j]] as f64;
                }
                assert!((y[[c, i, j]] as f64 - acc).abs() < 1e-6);
            }
        }
    }
    let bad = random_image(&mut rng, 1, 8);
    assert!(model.rgb_stem_forward(bad.view()).is_err());
}

#[test]
fn spatial_stem_normalizes_each_channel() {
    let model = Model::build(&Variant::Toy.model_config(), 5).unwrap();
    // Zero padding breaks a nonzero constant at the border, so the constant
    // map is the zero map.
    let zeros = Array3::zeros((1, 64, 64));
    let z = model
        .spatial_stem_forward(zeros.view(), ModalityId::NIR)
        .unwrap();
    assert!(z.iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Array3::from_shape_simple_fn((1, 64, 64), || rng.sample::<f32, _>(StandardNormal));
    for m in ModalityId::MULTISPECTRAL {
        let y = model.spatial_stem_forward(x.view(), m).unwrap();
        assert_eq!(y.dim(), (3, 64, 64));
        for c in 0..3 {
            let ch = y.index_axis(ndarray::Axis(0), c);
            let n = ch.len() as f64;
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5, "{m} channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "{m} channel {c} var {var}");
        }
    }
}

#[test]
fn spatial_stem_errors() {
    let model = Model::build(&Variant::Toy.model_config(), 5).unwrap();
    let x = Array3::zeros((1, 64, 64));
    assert!(matches!(
        model.spatial_stem_forward(x.view(), ModalityId::RGB),
        Err(specalign::Error::Routing(_))
    ));
    let tiny = Array3::zeros((1, 2, 8));
    assert!(matches!(
        model.spatial_stem_forward(tiny.view(), ModalityId::NIR),
        Err(specalign::Error::Shape(_))
    ));
}

#[test]
fn adapter_zero_up_projection_gives_zero_delta() {
    let mut model = Model::build(&small_cfg(), 1).unwrap();
    let a = model.adapter_mut(1, ModalityId::SWIR).unwrap();
    a.up.weight.value.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = Array2::from_shape_simple_fn((5, 16), || rng.sample::<f32, _>(StandardNormal));
    let delta = model
        .adapter_forward(h.view(), 1, ModalityId::SWIR)
        .unwrap();
    assert!(delta.iter().all(|&v| v == 0.0));
    assert!(matches!(
        model.adapter_forward(h.view(), 2, ModalityId::SWIR),
        Err(specalign::Error::Lookup(_))
    ));
}

#[test]
fn adapters_start_near_identity() {
    for dim in [64usize, 768] {
        let mut rng = ChaCha8Rng::seed_from_u64(dim as u64);
        let adapter = Adapter::new(&mut rng, dim, dim / 4);
        let h = Array2::from_shape_simple_fn((32, dim), || rng.sample::<f32, _>(StandardNormal));
        let (delta, _) = adapter.forward(h.view());
        let ratios: Vec<f64> = delta
            .rows()
            .into_iter()
            .zip(h.rows())
            .map(|(d, x)| {
                let nd = d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                let nx = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                nd / nx
            })
            .collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(mean < 0.05, "D={dim}: mean residual ratio {mean}");
        assert_eq!(adapter.weight_count(), 2 * dim * dim / 4);
    }
}

#[test]
fn toy_forward_shapes() {
    let model = Model::build(&Variant::Toy.model_config(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_image(&mut rng, 1, 64);
    let b = model.student_forward(x.view(), ModalityId::LWIR).unwrap();
    assert_eq!(b.cls.len(), 64);
    assert_eq!(b.patches.dim(), (64, 64));
    assert!(b.cls.iter().chain(b.patches.iter()).all(|v| v.is_finite()));
    let wrong = random_image(&mut rng, 3, 64);
    assert!(matches!(
        model.student_forward(wrong.view(), ModalityId::NIR),
        Err(specalign::Error::Shape(_))
    ));
}

#[test]
fn batched_routing_preserves_order_bit_for_bit() {
    let model = Model::build(&Variant::Toy.model_config(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let imgs = [
        random_image(&mut rng, 3, 64),
        random_image(&mut rng, 1, 64),
        random_image(&mut rng, 3, 64),
    ];
    let mods = [ModalityId::RGB, ModalityId::NIR, ModalityId::RGB];
    let views: Vec<ArrayView3<f32>> = imgs.iter().map(|i| i.view()).collect();
    let batched = model.student_forward_batch(&views, &mods).unwrap();
    for i in 0..3 {
        let single = model.student_forward(imgs[i].view(), mods[i]).unwrap();
        assert_eq!(batched[i], single, "position {i}");
    }

    // Permuting inputs permutes outputs identically.
    let perm = [2usize, 0, 1];
    let pviews: Vec<_> = perm.iter().map(|&i| views[i]).collect();
    let pmods: Vec<_> = perm.iter().map(|&i| mods[i]).collect();
    let permuted = model.student_forward_batch(&pviews, &pmods).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(permuted[k], batched[i]);
    }
}

#[test]
fn student_rgb_starts_aligned_with_teacher() {
    let model = Model::build(&Variant::Toy.model_config(), 21).unwrap();
    let teacher = model.teacher();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..4 {
        let x = random_image(&mut rng, 3, 64);
        let s = model.student_forward(x.view(), ModalityId::RGB).unwrap();
        let t = teacher.teacher_forward(x.view()).unwrap();
        let c = cosine(s.cls.as_slice().unwrap(), t.cls.as_slice().unwrap());
        assert!(c > 0.99, "cosine {c}");
    }
}

#[test]
fn teacher_is_deterministic_and_rgb_only() {
    let model = Model::build(&Variant::Toy.model_config(), 2).unwrap();
    let teacher = model.teacher();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_image(&mut rng, 3, 64);
    assert_eq!(
        teacher.teacher_forward(x.view()).unwrap(),
        teacher.teacher_forward(x.view()).unwrap()
    );
    let ms = random_image(&mut rng, 1, 64);
    assert!(teacher.teacher_forward(ms.view()).is_err());
}

#[test]
fn teacher_width_for_vit_b() {
    let mut cfg = Variant::VitB.model_config();
    // Full depth is not needed to check the output width.
    cfg.depth = 1;
    let model = Model::build(&cfg, 0).unwrap();
    let x = Array3::from_elem((3, 224, 224), 0.5f32);
    let t = model.teacher().teacher_forward(x.view()).unwrap();
    assert_eq!(t.cls.len(), 768);
    assert_eq!(t.patches.nrows(), 256);
}

#[test]
fn modality_embedding_conditions_output() {
    let mut model = Model::build(&small_cfg(), 6).unwrap();
    // Give NIR and SWIR identical stems and adapters so only E[m] differs.
    model.ms_stems[1] = model.ms_stems[0].clone();
    for row in &mut model.adapters {
        row[2] = row[1].clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_image(&mut rng, 1, 8);
    let a = model.student_forward(x.view(), ModalityId::NIR).unwrap();
    let b = model.student_forward(x.view(), ModalityId::SWIR).unwrap();
    assert_eq!(a.cls, b.cls);
    model.modality_table.value.row_mut(1).fill(0.3);
    let a = model.student_forward(x.view(), ModalityId::NIR).unwrap();
    assert_ne!(a.cls, b.cls);
}

#[test]
fn freeze_presets_and_reports() {
    let mut model = Model::build(&Variant::Toy.model_config(), 0).unwrap();
    let r = model.set_trainable(&FreezeSpec::stage_one()).unwrap();
    assert!(r.trainable_blocks.is_empty());
    assert!(!r.groups["stem.rgb"].trainable);
    assert!(r.groups["stem.nir"].trainable);
    assert!(r.groups["modality_table"].trainable);
    assert!(r.groups["final_norm"].trainable);
    assert!(!r.groups["patch_embed"].trainable);
    assert!(!r.groups["pos_embed"].trainable);

    let r = model
        .set_trainable(
            &FreezeSpec::stage_one()
                .with_rgb_stem(true)
                .with_unfrozen_blocks(2),
        )
        .unwrap();
    assert_eq!(r.trainable_blocks, vec![2, 3]);
    assert!(r.groups["stem.rgb"].trainable);

    assert!(model
        .set_trainable(&FreezeSpec::stage_one().with_unfrozen_blocks(5))
        .is_err());
}

/// Directional finite-difference check of the full student backward pass:
/// for `L = <R, forward(x)>`, compare `(L(p + h v) - L(p - h v)) / 2h` with
/// `<grad, v>` for a random direction `v` restricted to one parameter.
#[test]
fn student_backward_matches_finite_differences() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut model = Model::build(&cfg, 99).unwrap();
    // Make adapters and the modality table non-trivial so their paths matter.
    model.visit_params_mut(&mut |name, _, p| {
        if name.starts_with("adapters") || name == "modality_table" || name.ends_with("bias") {
            p.value.mapv_inplace(|_| rng.gen_range(-0.3f32..0.3));
        }
    });
    model
        .set_trainable(&FreezeSpec {
            rgb_stem: true,
            ms_stems: [true; 3],
            adapters: true,
            modality_table: true,
            final_norm: true,
            unfrozen_blocks: 2,
        })
        .unwrap();

    for m in [ModalityId::RGB, ModalityId::LWIR] {
        let imgs: Vec<_> = (0..2)
            .map(|_| random_image(&mut rng, m.channels(), 8))
            .collect();
        let views: Vec<_> = imgs.iter().map(|i| i.view()).collect();
        let (y, _) = model.forward_group(&views, m).unwrap();
        let probe = Array2::from_shape_simple_fn(y.raw_dim(), || rng.gen_range(-1.0f32..1.0));

        let loss = |model: &Model| -> f64 {
            let (y, _) = model.forward_group(&views, m).unwrap();
            y.iter()
                .zip(probe.iter())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum()
        };

        model.zero_grad();
        let (_, cache) = model.forward_group(&views, m).unwrap();
        model.backward_group(&cache, probe.view());

        let mut names = Vec::new();
        model.visit_params(&mut |n, _, p| {
            if p.trainable {
                names.push(n.to_string());
            }
        });
        let mut checked = 0;
        for name in names {
            let relevant = !(name.starts_with("stems.")
                && !name.starts_with(&format!("stems.{m}")))
                && !(name.starts_with("adapters.") && !name.contains(&format!(".{m}.")));
            if !relevant {
                continue;
            }
            let mut grad = None;
            model.visit_params(&mut |n, _, p| {
                if n == name {
                    grad = Some(p.grad.clone());
                }
            });
            let grad = grad.unwrap();
            let mut dir =
                Array2::from_shape_simple_fn(grad.raw_dim(), || rng.gen_range(-1.0f32..1.0));
            let norm = dir.iter().map(|v| v * v).sum::<f32>().sqrt();
            dir /= norm;
            let analytic: f64 = grad
                .iter()
                .zip(dir.iter())
                .map(|(g, d)| *g as f64 * *d as f64)
                .sum();
            let h = 3e-2f32;
            let shifted = |sign: f32| {
                let mut mm = model.clone();
                mm.visit_params_mut(&mut |n, _, p| {
                    if n == name {
                        p.value.scaled_add(sign * h, &dir);
                    }
                });
                loss(&mm)
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h as f64);
            let scale = analytic.abs().max(numeric.abs()).max(1e-2);
            assert!(
                (analytic - numeric).abs() / scale < 2e-2,
                "{m} {name}: analytic {analytic} numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked > 20, "only {checked} tensors checked");
    }
}

#[test]
fn frozen_groups_receive_no_gradient() {
    let mut model = Model::build(&small_cfg(), 3).unwrap();
    model.set_trainable(&FreezeSpec::stage_one()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_image(&mut rng, 1, 8);
    let (y, cache) = model.forward_group(&[x.view()], ModalityId::NIR).unwrap();
    model.backward_group(&cache, Array2::ones(y.raw_dim()).view());
    model.visit_params(&mut |n, _, p| {
        if !p.trainable {
            assert!(
                p.grad.iter().all(|&g| g == 0.0),
                "{n} got gradient while frozen"
            );
        }
    });
    let mut stem_grad = 0.0;
    model.ms_stems[0].visit(&mut |_, p| stem_grad += p.grad.iter().map(|g| g.abs()).sum::<f32>());
    assert!(stem_grad > 0.0);
}

#[test]
fn adapter_accounting_for_every_variant() {
    let bad = common::checks::adapter_accounting();
    assert!(bad.is_empty(), "{bad:#?}");
}
