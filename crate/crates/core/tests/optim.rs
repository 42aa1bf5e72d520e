use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specalign::codec::{Reader, Writer};
use specalign::nn::{Linear, Parameters};
use specalign::optim::{adamw_scalar, lr_at, AdamW, AdamWConfig, WEIGHT_DECAY};

/// PyTorch-style AdamW written out with bias corrections folded into the
/// step size and denominator.
fn reference(p: f64, g: f64, m: f64, v: f64, t: u64, lr: f64) -> (f64, f64, f64) {
    let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 0.05);
    let p = p - lr * wd * p;
    let m = b1 * m + (1.0 - b1) * g;
    let v = b2 * v + (1.0 - b2) * g * g;
    let bc1 = 1.0 - b1.powf(t as f64);
    let bc2 = 1.0 - b2.powf(t as f64);
    let denom = v.sqrt() / bc2.sqrt() + eps;
    (p - (lr / bc1) * m / denom, m, v)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn defaults_match_published_constants() {
    let c = AdamWConfig::default();
    assert_eq!(
        (c.beta1, c.beta2, c.eps, c.weight_decay),
        (0.9, 0.999, 1e-8, 0.05)
    );
    assert_eq!(WEIGHT_DECAY, 0.05);
}

#[test]
fn scalar_update_matches_reference_over_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = AdamWConfig::default();
    for _ in 0..50 {
        let (mut p, mut m, mut v) = (rng.gen_range(-2.0..2.0), 0.0, 0.0);
        let (mut rp, mut rm, mut rv) = (p, m, v);
        for t in 1..=40u64 {
            let g: f64 = rng.gen_range(-3.0..3.0);
            let lr = rng.gen_range(1e-5..1e-2);
            (p, m, v) = adamw_scalar(p, g, m, v, t, lr, &cfg);
            (rp, rm, rv) = reference(rp, g, rm, rv, t, lr);
            assert!(
                rel(p, rp) < 1e-10 && rel(m, rm) < 1e-10 && rel(v, rv) < 1e-10,
                "t={t}"
            );
        }
    }
}

#[test]
fn first_step_moves_by_about_lr() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let (p, _, _) = adamw_scalar(1.0, 0.3, 0.0, 0.0, 1, 1e-3, &cfg);
    assert!((p - (1.0 - 1e-3)).abs() < 1e-9);
}

#[test]
fn module_step_matches_scalar_and_skips_frozen() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut lin = Linear::xavier(&mut rng, 3, 2);
    lin.bias.trainable = false;
    lin.bias.value.fill(0.5);
    let cfg = AdamWConfig::default();
    let mut opt = AdamW::new(cfg);
    let w0: Vec<f64> = lin.weight.value.iter().map(|&v| v as f64).collect();
    let mut expect: Vec<(f64, f64, f64)> = w0.iter().map(|&p| (p, 0.0, 0.0)).collect();
    for t in 1..=3u64 {
        let g = Array2::from_shape_fn((2, 3), |(i, j)| (i as f32 - j as f32) * 0.1 * t as f32);
        lin.weight.grad.assign(&g);
        lin.bias.grad.fill(1.0);
        opt.step(&mut lin, 1e-2);
        for (e, &gv) in expect.iter_mut().zip(g.iter()) {
            // The module stores f32 values between steps.
            let p = e.0 as f32 as f64;
            *e = adamw_scalar(p, gv as f64, e.1, e.2, t, 1e-2, &cfg);
        }
        for (v, e) in lin.weight.value.iter().zip(&expect) {
            assert_eq!(*v, e.0 as f32);
        }
        assert!(lin.bias.value.iter().all(|&b| b == 0.5));
    }
    assert_eq!(opt.steps_taken(), 3);
}

#[test]
fn state_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut lin = Linear::xavier(&mut rng, 4, 4);
    let mut opt = AdamW::new(AdamWConfig::default());
    lin.visit_mut(&mut |_, p| p.grad.fill(0.25));
    opt.step(&mut lin, 1e-3);
    let mut w = Writer::new();
    opt.write(&mut w);
    let bytes = w.into_inner();
    let mut r = Reader::new(&bytes, "optimizer");
    let back = AdamW::read(&mut r).unwrap();
    r.finish().unwrap();
    assert_eq!(back, opt);

    let mut r = Reader::new(&bytes[..bytes.len() - 3], "optimizer");
    assert!(AdamW::read(&mut r).is_err());
}

#[test]
fn schedule_examples() {
    let base = 1e-3;
    let min = base / 100.0;
    // 100 steps at 5% warmup: ramp over steps 0..5.
    assert_eq!(lr_at(0, 100, base, 0.05), 0.0);
    assert!((lr_at(2, 100, base, 0.05) - base * 0.4).abs() < 1e-15);
    assert!((lr_at(5, 100, base, 0.05) - base).abs() < 1e-15);
    assert!((lr_at(100, 100, base, 0.05) - min).abs() < 1e-15);
    // Without warmup the midpoint sits halfway between peak and floor.
    assert!((lr_at(10, 20, base, 0.0) - (base + min) / 2.0).abs() < 1e-15);
    assert_eq!(lr_at(0, 20, base, 0.0), base);
    // ceil: 3% of 10 steps is one warmup step.
    assert_eq!(lr_at(0, 10, base, 0.03), 0.0);
    assert_eq!(lr_at(1, 10, base, 0.03), base);
}

proptest! {
    #[test]
    fn schedule_rises_then_falls(total in 1u64..400, wf in 0.0f64..0.5, base in 1e-6f64..1e-1) {
        let warmup = (wf * total as f64).ceil() as u64;
        let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, base, wf)).collect();
        for s in 0..total as usize {
            let (a, b) = (lrs[s], lrs[s + 1]);
            if (s as u64) < warmup {
                prop_assert!(b >= a);
            } else {
                prop_assert!(b <= a + 1e-18);
            }
            prop_assert!(a <= base * (1.0 + 1e-12) && a >= 0.0);
        }
        prop_assert!((lrs[total as usize] - base / 100.0).abs() <= 1e-12 * base);
    }
}
