//! AdamW with decoupled weight decay and a warmup-cosine schedule.

use std::collections::BTreeMap;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const WEIGHT_DECAY: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: WEIGHT_DECAY,
        }
    }
}

/// One scalar AdamW update at step `t` (1-based). Returns `(p, m, v)`.
pub fn adamw_scalar(
    p: f64,
    g: f64,
    m: f64,
    v: f64,
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> (f64, f64, f64) {
    let p = p * (1.0 - lr * cfg.weight_decay);
    let m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    let v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
    let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
    (p - lr * m_hat / (v_hat.sqrt() + cfg.eps), m, v)
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW over the trainable parameters of a module. Frozen parameters are
/// neither decayed nor updated.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

const MAGIC: &[u8; 8] = b"SAADAMW\0";
const VERSION: u32 = 1;

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut dyn Parameters, lr: f64) {
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        let moments = &mut self.moments;
        params.visit_mut(&mut |name, p| {
            if !p.trainable {
                return;
            }
            let st = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
            });
            let vals = p.value.as_slice_mut().expect("parameters are contiguous");
            let grads = p.grad.as_slice().expect("gradients are contiguous");
            for i in 0..vals.len() {
                let (np, nm, nv) = adamw_scalar(
                    vals[i] as f64,
                    grads[i] as f64,
                    st.m[i],
                    st.v[i],
                    t,
                    lr,
                    &cfg,
                );
                vals[i] = np as f32;
                st.m[i] = nm;
                st.v[i] = nv;
            }
        });
    }

    pub fn write(&self, w: &mut Writer) {
        w.bytes(MAGIC);
        w.u32(VERSION);
        for x in [
            self.config.beta1,
            self.config.beta2,
            self.config.eps,
            self.config.weight_decay,
        ] {
            w.f64(x);
        }
        w.u64(self.step);
        w.u64(self.moments.len() as u64);
        for (name, st) in &self.moments {
            w.str(name);
            w.u64(st.m.len() as u64);
            w.f64_slice(&st.m);
            w.f64_slice(&st.v);
        }
    }

    pub fn read(r: &mut Reader) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "optimizer segment version {version}, expected {VERSION}"
            )));
        }
        let config = AdamWConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            weight_decay: r.f64()?,
        };
        let step = r.u64()?;
        let n = r.u64()?;
        let mut moments = BTreeMap::new();
        for _ in 0..n {
            let name = r.str()?;
            let len = r.u64()? as usize;
            let m = r.f64_vec(len)?;
            let v = r.f64_vec(len)?;
            moments.insert(name, Moments { m, v });
        }
        Ok(Self {
            config,
            step,
            moments,
        })
    }
}

/// Learning rate at `step` of `total`: linear ramp from 0 over the first
/// `ceil(warmup_fraction * total)` steps, then cosine decay to `base / 100`.
pub fn lr_at(step: u64, total: u64, base_lr: f64, warmup_fraction: f64) -> f64 {
    let min_lr = base_lr / 100.0;
    if total == 0 {
        return base_lr;
    }
    let step = step.min(total);
    let warmup = (warmup_fraction * total as f64).ceil() as u64;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = total - warmup;
    if span == 0 {
        return min_lr;
    }
    let progress = (step - warmup) as f64 / span as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}
