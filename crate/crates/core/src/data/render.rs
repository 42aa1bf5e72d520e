//! Procedural scenes and their per-band renders.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Image, ModalityId};
use crate::trainer::sampler::mix;

pub const NUM_CLASSES: usize = 4;
pub const NOISE_STD: f32 = 0.01;
pub const LWIR_BACKGROUND: f32 = 0.1;
pub const LWIR_BLUR_SIGMA: f64 = 2.0;
pub const NIR_GAMMA: f32 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

/// One shape. `half` is the radius for disks and the half width and half
/// height for rectangles and triangles (apex up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub half: (f64, f64),
    pub color: [f64; 3],
    pub emissivity: f64,
    pub label: u8,
}

impl Shape {
    pub fn area(&self) -> f64 {
        match self.kind {
            ShapeKind::Disk => std::f64::consts::PI * self.half.0 * self.half.0,
            ShapeKind::Rectangle => 4.0 * self.half.0 * self.half.1,
            ShapeKind::Triangle => 2.0 * self.half.0 * self.half.1,
        }
    }

    fn extent(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Disk => (self.half.0, self.half.0),
            _ => self.half,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (hw, hh) = self.half;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= hw * hw,
            ShapeKind::Rectangle => dx.abs() <= hw && dy.abs() <= hh,
            ShapeKind::Triangle => {
                // Apex at (0, -hh), base from (-hw, hh) to (hw, hh).
                if dy > hh || dy < -hh {
                    return false;
                }
                let t = (dy + hh) / (2.0 * hh);
                dx.abs() <= t * hw
            }
        }
    }
}

/// Class of a shape: disk 0, wide rectangle 1, tall rectangle 2, triangle 3.
pub fn class_of(kind: ShapeKind, half: (f64, f64)) -> u8 {
    match kind {
        ShapeKind::Disk => 0,
        ShapeKind::Rectangle if half.0 >= half.1 => 1,
        ShapeKind::Rectangle => 2,
        ShapeKind::Triangle => 3,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: u64,
    pub size: usize,
    pub background: f64,
    pub shapes: Vec<Shape>,
}

impl SceneSpec {
    /// Draws a scene with 1 to 5 shapes from a generator keyed by
    /// `(seed, id)`.
    pub fn random(id: u64, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ id));
        let s = size as f64;
        let n = rng.gen_range(1..=5);
        let shapes = (0..n)
            .map(|_| {
                let kind = match rng.gen_range(0..4) {
                    0 => ShapeKind::Disk,
                    1 | 2 => ShapeKind::Rectangle,
                    _ => ShapeKind::Triangle,
                };
                let a = rng.gen_range(0.08..0.2) * s;
                let half = match kind {
                    ShapeKind::Disk => (a, a),
                    ShapeKind::Triangle => (a, a * rng.gen_range(0.8..1.2)),
                    ShapeKind::Rectangle => {
                        let long = a * rng.gen_range(1.6..2.2);
                        if rng.gen_bool(0.5) {
                            (long.min(0.45 * s), a * 0.8)
                        } else {
                            (a * 0.8, long.min(0.45 * s))
                        }
                    }
                };
                let cx = rng.gen_range(half.0..s - half.0);
                let cy = rng.gen_range(half.1..s - half.1);
                // Mostly achromatic colors with a tint.
                let value: f64 = rng.gen_range(0.0..1.0);
                let tint: f64 = rng.gen_range(0.0..0.3);
                let color = [0; 3].map(|_: i32| {
                    ((1.0 - tint) * value + tint * rng.gen_range(0.0..1.0)).clamp(0.0, 1.0)
                });
                Shape {
                    kind,
                    center: (cx, cy),
                    half,
                    color,
                    emissivity: rng.gen_range(0.0..1.0),
                    label: class_of(kind, half),
                }
            })
            .collect();
        Self {
            id,
            size,
            background: rng.gen_range(0.0..1.0),
            shapes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("scene {}: {msg}", self.id)));
        if self.size < 3 {
            return bad(format!("image size {} too small", self.size));
        }
        if !(1..=5).contains(&self.shapes.len()) {
            return bad(format!("{} shapes, expected 1 to 5", self.shapes.len()));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return bad("background outside [0, 1]".into());
        }
        let s = self.size as f64;
        for (i, sh) in self.shapes.iter().enumerate() {
            let (ex, ey) = sh.extent();
            if !(ex > 0.0 && ey > 0.0) {
                return bad(format!("shape {i} has non-positive size"));
            }
            let (cx, cy) = sh.center;
            if cx - ex < 0.0 || cx + ex > s || cy - ey < 0.0 || cy + ey > s {
                return bad(format!("shape {i} does not fit inside the image"));
            }
            if sh
                .color
                .iter()
                .chain([&sh.emissivity])
                .any(|c| !(0.0..=1.0).contains(c))
            {
                return bad(format!(
                    "shape {i} has a color or emissivity outside [0, 1]"
                ));
            }
            if sh.label as usize >= NUM_CLASSES {
                return bad(format!(
                    "shape {i} label {} outside 0..{NUM_CLASSES}",
                    sh.label
                ));
            }
        }
        Ok(())
    }

    /// Label of the largest shape; earlier shapes win exact ties.
    pub fn dominant_label(&self) -> u8 {
        let mut best = &self.shapes[0];
        for sh in &self.shapes[1..] {
            if sh.area() > best.area() {
                best = sh;
            }
        }
        best.label
    }

    /// Later shapes are painted over earlier ones.
    fn paint(&self, background: f32, value: impl Fn(&Shape) -> f32) -> Array2<f32> {
        let mut img = Array2::from_elem((self.size, self.size), background);
        for sh in &self.shapes {
            let v = value(sh);
            for ((y, x), px) in img.indexed_iter_mut() {
                if sh.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    *px = v;
                }
            }
        }
        img
    }

    fn clean_rgb(&self) -> Image {
        let mut out = Array3::zeros((3, self.size, self.size));
        for c in 0..3 {
            let plane = self.paint(self.background as f32, |sh| sh.color[c] as f32);
            out.index_axis_mut(ndarray::Axis(0), c).assign(&plane);
        }
        out
    }
}

fn per_pixel(rgb: &Image, f: impl Fn(f32, f32, f32) -> f32) -> Array2<f32> {
    let (_, h, w) = rgb.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        f(rgb[[0, y, x]], rgb[[1, y, x]], rgb[[2, y, x]])
    })
}

pub fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, clamped borders.
pub fn gaussian_blur(img: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (h, w) = img.dim();
    let pass = |src: &Array2<f32>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0f64;
            for (j, kv) in k.iter().enumerate() {
                let o = j as isize - r;
                let (yy, xx) = if horizontal {
                    (y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                } else {
                    ((y as isize + o).clamp(0, h as isize - 1) as usize, x)
                };
                acc += kv * src[[yy, xx]] as f64;
            }
            acc as f32
        })
    };
    let tmp = pass(img, true);
    pass(&tmp, false)
}

/// Noise-free single-band image for `m`, before clamping.
fn clean_band(spec: &SceneSpec, m: ModalityId) -> Array2<f32> {
    match m {
        ModalityId::NIR => per_pixel(&spec.clean_rgb(), |r, g, b| {
            (0.2 * r + 0.3 * g + 0.5 * b).max(0.0).powf(NIR_GAMMA)
        }),
        ModalityId::SWIR => per_pixel(&spec.clean_rgb(), |r, g, b| {
            (1.0 - luminance(r, g, b)) * 0.8 + 0.2 * r
        }),
        _ => {
            let emitted = spec.paint(LWIR_BACKGROUND, |sh| sh.emissivity as f32);
            gaussian_blur(&emitted, LWIR_BLUR_SIGMA)
        }
    }
}

/// Noise-free render before clamping: `(3, H, W)` for RGB, `(1, H, W)`
/// otherwise.
pub fn render_clean(spec: &SceneSpec, m: ModalityId) -> Result<Image> {
    spec.validate()?;
    if m.is_rgb() {
        return Ok(spec.clean_rgb());
    }
    Ok(clean_band(spec, m).insert_axis(ndarray::Axis(0)))
}

/// Deterministic render with additive Gaussian noise (std 0.01, seeded by
/// scene id and band) and clamping to `[0, 1]`.
pub fn render_scene(spec: &SceneSpec, m: ModalityId) -> Result<Image> {
    let mut img = render_clean(spec, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.id ^ ((m.index() as u64) << 56)));
    let noise = Normal::new(0.0f32, NOISE_STD).expect("valid std");
    img.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    Ok(img)
}
