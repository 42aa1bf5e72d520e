use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::{Param, Parameters};
use crate::ops;

/// `y = x W^T + b` with `W` stored as `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn xavier<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Param::new(ops::xavier_uniform(rng, d_out, d_in, d_in, d_out)),
            bias: Param::zeros(1, d_out),
        }
    }

    pub fn from_weight(weight: Array2<f32>) -> Self {
        let d_out = weight.nrows();
        Self {
            weight: Param::new(weight),
            bias: Param::zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.value.t());
        y += &self.bias.value;
        y
    }

    /// Accumulates parameter gradients when trainable and returns `dL/dx`.
    pub fn backward(&mut self, x: ArrayView2<f32>, dy: ArrayView2<f32>) -> Array2<f32> {
        self.accumulate_grads(x, dy);
        dy.dot(&self.weight.value)
    }

    pub fn accumulate_grads(&mut self, x: ArrayView2<f32>, dy: ArrayView2<f32>) {
        if self.weight.trainable {
            general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut self.weight.grad);
        }
        if self.bias.trainable {
            self.bias
                .grad
                .row_mut(0)
                .scaled_add(1.0, &dy.sum_axis(Axis(0)));
        }
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Param)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}
