//! Scalar kernels and initializers shared by the layers.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

const INV_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

/// Branch-free rational approximation of `erf` for f32, within a few ulp of
/// the libm value; it vectorizes where `libm::erff` does not.
#[inline]
pub fn erf_f32(x: f32) -> f32 {
    let x = x.clamp(-4.0, 4.0);
    let x2 = x * x;
    let mut p = -2.726_142_3e-10f32;
    p = p * x2 + 2.770_681_4e-8;
    p = p * x2 + -2.101_024e-6;
    p = p * x2 + -5.692_506_4e-5;
    p = p * x2 + -7.349_906_3e-4;
    p = p * x2 + -2.954_600_1e-3;
    p = p * x2 + -1.609_603_3e-2;
    let mut q = -1.456_607_2e-5f32;
    q = q * x2 + -2.133_740_6e-4;
    q = q * x2 + -1.682_827e-3;
    q = q * x2 + -7.373_329_2e-3;
    q = q * x2 + -1.426_474e-2;
    x * p / q
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + erf_f32(x * INV_SQRT_2))
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + erf_f32(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn gelu_array(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(gelu)
}

/// `dx = dy * gelu'(pre)`.
pub fn gelu_backward(pre: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| *d *= gelu_grad(p));
    dx
}

/// Numerically stable in-place softmax over each row.
pub fn softmax_rows(mut x: ArrayViewMut2<f32>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        let inv = 1.0 / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Glorot/Xavier uniform init for a `(fan_out, fan_in)` weight.
pub fn xavier_uniform<R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> Array2<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f32) -> Array2<f32> {
    let dist = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Hex SHA-256 of the little-endian bytes of a sequence of tensors.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = ArrayView2<'a, f32>>) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        for v in t.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_digest(&hasher.finalize())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(bytes))
}
