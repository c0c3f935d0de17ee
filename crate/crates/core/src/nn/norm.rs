use ndarray::{Array1, Axis};

use super::{expect_cache, join, Module, Param, ParamKind, Tensor};
use crate::error::{shape_err, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel batch normalisation. Training mode normalises with batch
/// statistics and updates the running estimates; evaluation mode uses the
/// running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0, ParamKind::Weight),
            beta: Param::filled(&[channels], 0.0, ParamKind::Bias),
            running_mean: Param::filled(&[channels], 0.0, ParamKind::Buffer),
            running_var: Param::filled(&[channels], 1.0, ParamKind::Buffer),
            momentum,
            eps,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dim();
        if c != self.channels() {
            return Err(shape_err(format!("batch norm over {} channels got {c}", self.channels())));
        }
        if !train {
            return self.infer(x);
        }
        let m = (n * h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(c);
        let mut y = Tensor::zeros(x.raw_dim());
        for ch in 0..c {
            let xc = x.index_axis(Axis(1), ch);
            let mean = xc.sum() / m;
            let var = xc.fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / m;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let mut xh = xhat.index_axis_mut(Axis(1), ch);
            xh.mapv_inplace(|v| (v - mean) * istd);
            y.index_axis_mut(Axis(1), ch).zip_mut_with(&xh, |o, &v| *o = g * v + b);

            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let mom = self.momentum;
            self.running_mean.value[ch] = (1.0 - mom) * self.running_mean.value[ch] + mom * mean;
            self.running_var.value[ch] = (1.0 - mom) * self.running_var.value[ch] + mom * unbiased;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim().1;
        if c != self.channels() {
            return Err(shape_err(format!("batch norm over {} channels got {c}", self.channels())));
        }
        let mut y = x.clone();
        for ch in 0..c {
            let istd = 1.0 / (self.running_var.value[ch] + self.eps).sqrt();
            let (mean, g, b) = (self.running_mean.value[ch], self.gamma.value[ch], self.beta.value[ch]);
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| g * (v - mean) * istd + b);
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let BnCache { xhat, inv_std } = expect_cache(self.cache.take(), "batch norm");
        let (n, c, h, w) = gy.dim();
        let m = (n * h * w) as f64;
        let mut gx = Tensor::zeros(gy.raw_dim());
        for ch in 0..c {
            let g = gy.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let sum_g = g.sum();
            let sum_gx = ndarray::Zip::from(&g).and(&xh).fold(0.0, |acc, a, b| acc + a * b);
            self.gamma.grad[ch] += sum_gx;
            self.beta.grad[ch] += sum_g;
            let scale = self.gamma.value[ch] * inv_std[ch] / m;
            ndarray::Zip::from(gx.index_axis_mut(Axis(1), ch))
                .and(&g)
                .and(&xh)
                .for_each(|o, &gv, &xv| *o = scale * (m * gv - sum_g - xv * sum_gx));
        }
        gx
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardised_per_channel() {
        let mut bn = BatchNorm2d::new(2, DEFAULT_MOMENTUM, 0.0);
        let x = Tensor::from_shape_fn((3, 2, 4, 4), |(b, c, i, j)| (b * 7 + c * 3 + i * j) as f64);
        let y = bn.forward(&x, true).unwrap();
        for ch in 0..2 {
            let yc = y.index_axis(Axis(1), ch);
            let mean = yc.mean().unwrap();
            let var = yc.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut bn = BatchNorm2d::new(1, 0.1, DEFAULT_EPS);
        let x = Tensor::from_shape_vec((1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        bn.forward(&x, true).unwrap();
        assert!((bn.running_mean.value[0] - 0.2).abs() < 1e-15);
        // unbiased variance of {1, 3} is 2
        assert!((bn.running_var.value[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_is_affine_in_running_stats() {
        let mut bn = BatchNorm2d::new(1, 0.1, 0.0);
        bn.running_mean.value[0] = 2.0;
        bn.running_var.value[0] = 4.0;
        bn.gamma.value[0] = 3.0;
        bn.beta.value[0] = 1.0;
        let x = Tensor::from_elem((1, 1, 2, 2), 6.0);
        let y = bn.forward(&x, false).unwrap();
        assert!(y.iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }
}
