use ndarray::{Array2, Array3, ArrayView3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    instance_norm, instance_norm_backward, Conv2d, ConvCache, InstanceNormCache, Linear, Param,
    Parameters,
};
use crate::ops;

pub const INSTANCE_NORM_EPS: f32 = 1e-5;
const STEM_HIDDEN: usize = 16;

/// Per-pixel 3->3 linear map (a 1x1 convolution), initialized to identity.
#[derive(Clone, Debug)]
pub struct RgbStem {
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct RgbStemCache {
    pixels: Array2<f32>,
    height: usize,
    width: usize,
}

impl RgbStem {
    pub fn identity() -> Self {
        Self {
            proj: Linear::from_weight(Array2::eye(3)),
        }
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> Result<(Array3<f32>, RgbStemCache)> {
        let (c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::Shape(format!(
                "RGB stem expects 3 channels, got {c}"
            )));
        }
        let pixels = crate::nn::chw_to_pixels(x);
        let y = self.proj.forward(pixels.view());
        let out = crate::nn::pixels_to_chw(&y, h, w);
        Ok((
            out,
            RgbStemCache {
                pixels,
                height: h,
                width: w,
            },
        ))
    }

    pub fn backward(&mut self, cache: &RgbStemCache, dy: ArrayView3<f32>) {
        debug_assert_eq!(dy.dim(), (3, cache.height, cache.width));
        let dy_pix = crate::nn::chw_to_pixels(dy);
        self.proj
            .accumulate_grads(cache.pixels.view(), dy_pix.view());
    }
}

impl Parameters for RgbStem {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        self.proj.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj.visit_mut(f)
    }
}

/// `IN(Conv3x3(16->3)(GELU(Conv3x3(1->16)(x))))` for single-channel bands.
#[derive(Clone, Debug)]
pub struct SpatialStem {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Clone, Debug)]
pub struct SpatialStemCache {
    conv1: ConvCache,
    hidden_pre: Array3<f32>,
    conv2: ConvCache,
    norm: InstanceNormCache,
    height: usize,
    width: usize,
}

impl SpatialStem {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::xavier(rng, 1, STEM_HIDDEN, 3),
            conv2: Conv2d::xavier(rng, STEM_HIDDEN, 3, 3),
        }
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> Result<(Array3<f32>, SpatialStemCache)> {
        let (c, h, w) = x.dim();
        if c != 1 {
            return Err(Error::Shape(format!(
                "spatial stem expects 1 channel, got {c}"
            )));
        }
        if h < 3 || w < 3 {
            return Err(Error::Shape(format!(
                "spatial stem needs at least 3x3 input, got {h}x{w}"
            )));
        }
        let (hidden_pre, conv1) = self.conv1.forward(x);
        let hidden = hidden_pre.mapv(ops::gelu);
        let (pre_norm, conv2) = self.conv2.forward(hidden.view());
        let flat = pre_norm
            .into_shape_with_order((3, h * w))
            .expect("contiguous conv output");
        let (normed, norm) = instance_norm(flat.view(), INSTANCE_NORM_EPS);
        let out = normed
            .into_shape_with_order((3, h, w))
            .expect("pixel count");
        let cache = SpatialStemCache {
            conv1,
            hidden_pre,
            conv2,
            norm,
            height: h,
            width: w,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &SpatialStemCache, dy: ArrayView3<f32>) {
        let (h, w) = (cache.height, cache.width);
        let dflat = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((3, h * w))
            .expect("contiguous");
        let dpre = instance_norm_backward(&cache.norm, dflat.view());
        let dpre = dpre.into_shape_with_order((3, h, w)).expect("pixel count");
        let dhidden = self
            .conv2
            .backward(&cache.conv2, dpre.view(), true)
            .expect("input gradient requested");
        let mut dh = dhidden;
        dh.zip_mut_with(&cache.hidden_pre, |g, &p| *g *= ops::gelu_grad(p));
        self.conv1.backward(&cache.conv1, dh.view(), false);
    }
}

impl Parameters for SpatialStem {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        self.conv1.visit(&mut |n, p| f(&format!("conv1.{n}"), p));
        self.conv2.visit(&mut |n, p| f(&format!("conv2.{n}"), p));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1
            .visit_mut(&mut |n, p| f(&format!("conv1.{n}"), p));
        self.conv2
            .visit_mut(&mut |n, p| f(&format!("conv2.{n}"), p));
    }
}
