use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array3;
use specalign::losses::{contrastive_loss, distill_loss, neighborhood_kl, patch_loss};
use specalign::model::{ModalityId, Model, Variant};
use specalign::queue::QueueState;
use specalign_bench::{band_images, embeddings, rng};

fn forward(c: &mut Criterion) {
    let model = Model::build(&Variant::Toy.model_config(), 1).unwrap();
    let lwir = band_images(2, 16, 64);
    let views: Vec<_> = lwir.iter().map(|x| x.view()).collect();
    let rgb: Vec<Array3<f32>> = (0..16)
        .map(|i| Array3::from_elem((3, 64, 64), i as f32 / 16.0))
        .collect();
    let rgb_views: Vec<_> = rgb.iter().map(|x| x.view()).collect();
    let mut g = c.benchmark_group("toy_forward_b16");
    g.sample_size(20);
    g.bench_function("lwir", |b| {
        b.iter(|| {
            model
                .forward_group(black_box(&views), ModalityId::LWIR)
                .unwrap()
        })
    });
    g.bench_function("rgb", |b| {
        b.iter(|| {
            model
                .forward_group(black_box(&rgb_views), ModalityId::RGB)
                .unwrap()
        })
    });
    let teacher = model.teacher();
    g.bench_function("teacher", |b| {
        b.iter(|| teacher.forward(black_box(&rgb_views)).unwrap())
    });
    g.finish();
}

fn losses(c: &mut Criterion) {
    let (b, d) = (16, 64);
    let t = embeddings(1, b, d);
    let m = embeddings(2, b, d);
    let mut g = c.benchmark_group("losses_b16_d64");
    g.bench_function("distill", |bch| {
        bch.iter(|| distill_loss(black_box(t.view()), m.view()).unwrap())
    });
    g.bench_function("contrast", |bch| {
        bch.iter(|| contrastive_loss(black_box(t.view()), m.view(), 0.07).unwrap())
    });
    let pr = embeddings(3, b * 64, d)
        .into_shape_with_order((b, 64, d))
        .unwrap();
    let pm = embeddings(4, b * 64, d)
        .into_shape_with_order((b, 64, d))
        .unwrap();
    let mut r = rng(5);
    g.bench_function("patch", |bch| {
        bch.iter(|| patch_loss(black_box(pr.view()), pm.view(), 0.5, &mut r).unwrap())
    });
    let mut queue = QueueState::new(4096, d).unwrap();
    queue.push_batch(embeddings(6, 4096, d).view()).unwrap();
    g.bench_function("neighborhood_q4096", |bch| {
        bch.iter(|| neighborhood_kl(black_box(t.view()), m.view(), &queue, 128, 0.07).unwrap())
    });
    g.finish();
}

fn queue_top_k(c: &mut Criterion) {
    let d = 64;
    let z = embeddings(7, 16, d);
    let mut g = c.benchmark_group("queue_top_k_b16");
    for cap in [1024usize, 4096, 16384] {
        let mut q = QueueState::new(cap, d).unwrap();
        q.push_batch(embeddings(8, cap, d).view()).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(cap), &q, |bch, q| {
            bch.iter(|| q.top_k(black_box(z.view()), 128).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward, losses, queue_top_k);
criterion_main!(benches);
