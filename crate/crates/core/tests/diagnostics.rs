use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specalign::data::{generate_in_memory, DatasetConfig, PairedSet, Split};
use specalign::diagnostics::{
    evaluate_alignment, export_embeddings, retrieval, DEFAULT_EXPORT_COUNT,
};
use specalign::model::{ModalityId, Model, ModelVariantConfig};
use specalign::ops;
use specalign::probe::{run_probe, ConcatFusion, ProbeConfig};
use specalign::Error;

fn tiny_model(seed: u64) -> Model {
    Model::build(&ModelVariantConfig::new("tiny", 16, 2, 2, 4, 16), seed).unwrap()
}

fn tiny_set(scenes: usize, split: Split) -> PairedSet {
    let cfg = DatasetConfig {
        scenes,
        seed: 4,
        image_size: 16,
        split: [0.5, 0.5, 0.0],
        modality_ratios: [1.0; 3],
    };
    generate_in_memory(&cfg, split).unwrap()
}

/// Double loop over cosine similarities, counting strictly better gallery
/// rows plus equal ones with a lower index.
fn naive_ranks(q: &Array2<f64>, g: &Array2<f64>) -> Vec<usize> {
    let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    };
    (0..q.nrows())
        .map(|i| {
            let own = cos(q.row(i), g.row(i));
            let mut rank = 0;
            for j in 0..g.nrows() {
                let s = cos(q.row(i), g.row(j));
                if s > own || (s == own && j < i) {
                    rank += 1;
                }
            }
            rank
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn retrieval_matches_naive_ranking(n in 10usize..30, d in 2usize..8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = ops::normal(&mut rng, n, d, 1.0).mapv(|v| v as f64);
        let g = ops::normal(&mut rng, n, d, 1.0).mapv(|v| v as f64);
        let r = retrieval(q.view(), g.view()).unwrap();
        let ranks = naive_ranks(&q, &g);
        prop_assert_eq!(&r.ranks, &ranks);
        let top1 = ranks.iter().filter(|&&k| k == 0).count() as f64 / n as f64;
        let top5 = ranks.iter().filter(|&&k| k < 5).count() as f64 / n as f64;
        prop_assert_eq!(r.top1, top1);
        prop_assert_eq!(r.top5, top5);
    }
}

#[test]
fn identical_embeddings_rank_by_lower_index() {
    let e = Array2::from_elem((12, 4), 1.0);
    let r = retrieval(e.view(), e.view()).unwrap();
    assert_eq!(r.ranks, (0..12).collect::<Vec<_>>());
    assert_eq!(r.top1, 1.0 / 12.0);
    assert_eq!(r.top5, 5.0 / 12.0);
}

#[test]
fn retrieval_refuses_tiny_splits() {
    let e = Array2::from_elem((9, 4), 1.0);
    assert!(matches!(
        retrieval(e.view(), e.view()),
        Err(Error::Config(_))
    ));
    let g = Array2::from_elem((10, 3), 1.0);
    let q = Array2::from_elem((10, 4), 1.0);
    assert!(matches!(
        retrieval(q.view(), g.view()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn untrained_thermal_retrieval_is_near_chance() {
    let model = tiny_model(3);
    let val = tiny_set(80, Split::Val);
    let report = evaluate_alignment(&model, &val, Some("init")).unwrap();
    assert_eq!(report.stage.as_deref(), Some("init"));
    assert_eq!(report.modalities.len(), 3);
    let lwir = report.get(ModalityId::LWIR).unwrap();
    assert_eq!(lwir.pairs, 40);
    assert!(lwir.top1 <= 0.2, "{lwir:?}");
    let mean = report.modalities.iter().map(|a| a.top1).sum::<f64>() / 3.0;
    assert_eq!(report.mean_top1, mean);
}

#[test]
fn export_counts_and_determinism() {
    let model = tiny_model(5);
    let set = tiny_set(300, Split::Train);
    let csv = export_embeddings(&model, &set, DEFAULT_EXPORT_COUNT, 9).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0].split(',').count(), 3 + 16);
    assert!(lines[0].starts_with("scene_id,pair,modality,e0"));
    assert_eq!(lines.len(), 1 + 3 * 2 * DEFAULT_EXPORT_COUNT);
    for band in ["nir", "swir", "lwir"] {
        let pair = format!("rgb-{band}");
        let rows: Vec<&str> = lines[1..]
            .iter()
            .copied()
            .filter(|l| l.split(',').nth(1) == Some(&pair))
            .collect();
        assert_eq!(rows.len(), 2 * DEFAULT_EXPORT_COUNT);
        for two in rows.chunks(2) {
            let a: Vec<_> = two[0].split(',').collect();
            let b: Vec<_> = two[1].split(',').collect();
            assert_eq!(a[0], b[0]);
            assert_eq!((a[2], b[2]), ("rgb", band));
        }
    }
    assert_eq!(
        csv,
        export_embeddings(&model, &set, DEFAULT_EXPORT_COUNT, 9).unwrap()
    );
    assert_ne!(
        csv,
        export_embeddings(&model, &set, DEFAULT_EXPORT_COUNT, 10).unwrap()
    );

    let small = export_embeddings(&model, &set, 10, 9).unwrap();
    assert_eq!(small.lines().count(), 1 + 3 * 2 * 10);
}

#[test]
fn identity_fusion_reduces_to_normalized_rgb() {
    let d = 8;
    let mut f = ConcatFusion::new(d, 1);
    let mut w = Array2::zeros((d, 2 * d));
    for i in 0..d {
        w[[i, i]] = 1.0;
    }
    f.proj.weight.value = w;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rgb = ops::normal(&mut rng, 5, d, 1.0);
    let ms = ops::normal(&mut rng, 5, d, 1.0);
    let out = f.forward(rgb.view(), ms.view()).unwrap();
    let (n, _) = f.norm.forward(rgb.view());
    let expect = ops::gelu_array(&n);
    for (a, b) in out.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-6);
    }
    f.passthrough = true;
    assert_eq!(f.forward(rgb.view(), ms.view()).unwrap(), rgb);
}

#[test]
fn fusion_shapes_order_and_errors() {
    let f = ConcatFusion::new(64, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = ops::normal(&mut rng, 65, 64, 1.0);
    let b = ops::normal(&mut rng, 65, 64, 1.0);
    let ab = f.forward(a.view(), b.view()).unwrap();
    assert_eq!(ab.dim(), (65, 64));
    assert_ne!(ab, f.forward(b.view(), a.view()).unwrap());
    let narrow = ops::normal(&mut rng, 65, 32, 1.0);
    assert!(matches!(
        f.forward(narrow.view(), narrow.view()),
        Err(Error::DimensionMismatch {
            expected: 64,
            found: 32
        })
    ));
    assert!(matches!(
        f.forward(a.view(), a.slice(ndarray::s![..3, ..])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn probe_leaves_backbone_untouched_and_reports_chance() {
    let model = tiny_model(8);
    let before = model.checksum();
    let train = tiny_set(60, Split::Train);
    let val = tiny_set(60, Split::Val);
    let cfg = ProbeConfig {
        epochs: 5,
        seed: 3,
        ..Default::default()
    };
    let report = run_probe(
        &model,
        &train,
        &val,
        &[ModalityId::LWIR, ModalityId::NIR],
        &cfg,
    )
    .unwrap();
    assert_eq!(model.checksum(), before);
    assert_eq!(report.model_checksum, before);
    assert_eq!(report.chance, 0.25);
    let pairs: Vec<_> = report.results.iter().map(|r| r.pair.as_str()).collect();
    assert_eq!(pairs, ["rgb-lwir", "rgb-nir"]);
    for r in &report.results {
        assert_eq!((r.train_pairs, r.eval_pairs), (30, 30));
        assert!((0.0..=1.0).contains(&r.eval_accuracy));
    }
    assert_eq!(
        report,
        run_probe(
            &model,
            &train,
            &val,
            &[ModalityId::LWIR, ModalityId::NIR],
            &cfg
        )
        .unwrap()
    );
}

#[test]
fn probe_rejects_unusable_inputs() {
    let model = tiny_model(8);
    let train = tiny_set(40, Split::Train);
    let mut no_lwir = tiny_set(40, Split::Val);
    no_lwir.retain_modalities(&[ModalityId::NIR]);
    let cfg = ProbeConfig::default();
    assert!(run_probe(&model, &train, &no_lwir, &[ModalityId::LWIR], &cfg).is_err());
    assert!(run_probe(&model, &train, &train, &[ModalityId::RGB], &cfg).is_err());

    let mut bad = tiny_set(40, Split::Train);
    bad.pairs[0][0].label = 9;
    let err = run_probe(&model, &bad, &train, &[ModalityId::NIR], &cfg).unwrap_err();
    assert!(err.to_string().contains("label 9"), "{err}");
}
