use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::{Param, Parameters};

/// Row-wise layer normalization with affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f32,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Array2<f32>,
    rstd: Array1<f32>,
}

impl LayerNormCache {
    pub fn xhat(&self) -> &Array2<f32> {
        &self.xhat
    }
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Array2::ones((1, dim))),
            beta: Param::zeros(1, dim),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> (Array2<f32>, LayerNormCache) {
        let d = x.ncols() as f32;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.fold(0.0, |acc, v| acc + v * v) / d;
            *r = 1.0 / (var + self.eps).sqrt();
            let s = *r;
            row.mapv_inplace(|v| v * s);
        }
        let mut y = &xhat * &self.gamma.value;
        y += &self.beta.value;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: ArrayView2<f32>) -> Array2<f32> {
        if self.gamma.trainable {
            let dg = (&dy * &cache.xhat).sum_axis(Axis(0));
            self.gamma.grad.row_mut(0).scaled_add(1.0, &dg);
        }
        if self.beta.trainable {
            self.beta
                .grad
                .row_mut(0)
                .scaled_add(1.0, &dy.sum_axis(Axis(0)));
        }
        let d = dy.ncols() as f32;
        let mut dx = &dy * &self.gamma.value;
        Zip::from(dx.rows_mut())
            .and(cache.xhat.rows())
            .and(&cache.rstd)
            .for_each(|mut dxh, xh, &r| {
                let mean_d = dxh.sum() / d;
                let mean_dx = dxh.dot(&xh) / d;
                Zip::from(&mut dxh).and(&xh).for_each(|g, &h| {
                    *g = r * (*g - mean_d - h * mean_dx);
                });
            });
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNormCache {
    xhat: Array2<f32>,
    rstd: Array1<f32>,
}

/// Per-channel normalization of a `(channels, pixels)` map, no affine terms.
/// `eps` is added to the variance inside the square root.
pub fn instance_norm(x: ArrayView2<f32>, eps: f32) -> (Array2<f32>, InstanceNormCache) {
    let n = x.ncols() as f32;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        // Accumulate in f64: a 4096-pixel mean in f32 drifts past 1e-5.
        let mean = (row.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n as f64;
        *r = (1.0 / (var + eps as f64).sqrt()) as f32;
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    (xhat.clone(), InstanceNormCache { xhat, rstd })
}

pub fn instance_norm_backward(cache: &InstanceNormCache, dy: ArrayView2<f32>) -> Array2<f32> {
    let n = dy.ncols() as f32;
    let mut dx = dy.to_owned();
    Zip::from(dx.rows_mut())
        .and(cache.xhat.rows())
        .and(&cache.rstd)
        .for_each(|mut g, xh, &r| {
            let mean_d = g.sum() / n;
            let mean_dx = g.dot(&xh) / n;
            Zip::from(&mut g).and(&xh).for_each(|v, &h| {
                *v = r * (*v - mean_d - h * mean_dx);
            });
        });
    dx
}
