use ndarray::{Array2, Array3, ArrayView3};
use rand::Rng;

use super::{Linear, Param, Parameters};

/// Stride-1 2-D convolution with zero "same" padding.
///
/// Computed directly as shifted row-slice accumulations, which vectorize
/// well for the few-channel maps the stems use.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// Weight is `(c_out, c_in * k * k)` in `(channel, ky, kx)` order; bias is `(1, c_out)`.
    pub inner: Linear,
    pub c_in: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    input: Array3<f32>,
}

/// Overlap of a row shifted by `d` within `[0, n)`: `(dst_start, src_start, len)`.
#[inline]
fn span(n: usize, d: isize) -> Option<(usize, usize, usize)> {
    let (dst, src) = if d >= 0 {
        (0, d as usize)
    } else {
        ((-d) as usize, 0)
    };
    let len = n.checked_sub(d.unsigned_abs())?;
    (len > 0).then_some((dst, src, len))
}

impl Conv2d {
    pub fn xavier<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize) -> Self {
        let kk = kernel * kernel;
        let bound_in = c_in * kk;
        let inner = Linear {
            weight: Param::new(crate::ops::xavier_uniform(
                rng,
                c_out,
                c_in * kk,
                bound_in,
                c_out * kk,
            )),
            bias: Param::zeros(1, c_out),
        };
        Self {
            inner,
            c_in,
            kernel,
        }
    }

    pub fn c_out(&self) -> usize {
        self.inner.d_out()
    }

    /// Calls `f(o, c, dy, dx, w)` for every tap, with `(dy, dx)` the source
    /// offset relative to the output pixel.
    fn taps(&self, mut f: impl FnMut(usize, usize, isize, isize, usize)) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        for o in 0..self.c_out() {
            for c in 0..self.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        let col = (c * k + ky) * k + kx;
                        f(o, c, ky as isize - pad, kx as isize - pad, col);
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> (Array3<f32>, ConvCache) {
        let (c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv input channels");
        let input = x.as_standard_layout().into_owned();
        let src = input.as_slice().expect("standard layout");
        let weight = &self.inner.weight.value;
        let bias = &self.inner.bias.value;
        let mut out = Array3::zeros((self.c_out(), h, w));
        {
            let dst = out.as_slice_mut().expect("fresh array");
            for o in 0..self.c_out() {
                dst[o * h * w..(o + 1) * h * w].fill(bias[[0, o]]);
            }
            self.taps(|o, c, oy, ox, col| {
                let wv = weight[[o, col]];
                let Some((dx0, sx0, len)) = span(w, ox) else {
                    return;
                };
                for yy in 0..h {
                    let sy = yy as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d = &mut dst[(o * h + yy) * w + dx0..][..len];
                    let s = &src[(c * h + sy as usize) * w + sx0..][..len];
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a += wv * b;
                    }
                }
            });
        }
        (out, ConvCache { input })
    }

    /// Accumulates parameter gradients when trainable and returns `dL/dx`
    /// when `need_dx`.
    pub fn backward(
        &mut self,
        cache: &ConvCache,
        dy: ArrayView3<f32>,
        need_dx: bool,
    ) -> Option<Array3<f32>> {
        let (c_in, h, w) = cache.input.dim();
        let dy = dy.as_standard_layout();
        let g = dy.as_slice().expect("standard layout");
        let src = cache.input.as_slice().expect("standard layout");
        if self.inner.bias.trainable {
            for o in 0..self.c_out() {
                self.inner.bias.grad[[0, o]] += g[o * h * w..(o + 1) * h * w].iter().sum::<f32>();
            }
        }
        if self.inner.weight.trainable {
            let mut dw = Array2::<f32>::zeros(self.inner.weight.value.raw_dim());
            self.taps(|o, c, oy, ox, col| {
                let Some((dx0, sx0, len)) = span(w, ox) else {
                    return;
                };
                let mut acc = 0.0f32;
                for yy in 0..h {
                    let sy = yy as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d = &g[(o * h + yy) * w + dx0..][..len];
                    let s = &src[(c * h + sy as usize) * w + sx0..][..len];
                    acc += d.iter().zip(s).map(|(a, b)| a * b).sum::<f32>();
                }
                dw[[o, col]] = acc;
            });
            self.inner.weight.grad += &dw;
        }
        if !need_dx {
            return None;
        }
        let weight = &self.inner.weight.value;
        let mut dx = Array3::<f32>::zeros((c_in, h, w));
        {
            let dst = dx.as_slice_mut().expect("fresh array");
            self.taps(|o, c, oy, ox, col| {
                let wv = weight[[o, col]];
                let Some((dx0, sx0, len)) = span(w, ox) else {
                    return;
                };
                for yy in 0..h {
                    let sy = yy as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &g[(o * h + yy) * w + dx0..][..len];
                    let d = &mut dst[(c * h + sy as usize) * w + sx0..][..len];
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a += wv * b;
                    }
                }
            });
        }
        Some(dx)
    }
}

impl Parameters for Conv2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        self.inner.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.inner.visit_mut(f)
    }
}

/// `(H*W, C)` pixel rows to a `(C, H, W)` map.
pub(crate) fn pixels_to_chw(y: &Array2<f32>, h: usize, w: usize) -> Array3<f32> {
    let c = y.ncols();
    let t = y.t().as_standard_layout().into_owned();
    t.into_shape_with_order((c, h, w))
        .expect("pixel count matches")
}

pub(crate) fn chw_to_pixels(x: ArrayView3<f32>) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let flat = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous");
    flat.t().as_standard_layout().into_owned()
}
