//! 2-D convolution (stride 1) with padding, dilation and channel groups,
//! lowered to GEMM through im2col.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Ix4};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{expect_cache, join, Module, Param, ParamKind, Tensor};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            padding: 0,
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }

    /// Padding that preserves spatial size for the current kernel and dilation.
    pub fn same(mut self) -> Self {
        self.padding = self.dilation * (self.kernel - 1) / 2;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// For convolutions feeding a batch norm, which cancels any bias.
    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1);
        ((h + 2 * self.padding).saturating_sub(span), (w + 2 * self.padding).saturating_sub(span))
    }

    /// Multiply-accumulate count of one forward pass on an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.output_size(h, w);
        (self.out_channels * self.in_per_group() * self.kernel * self.kernel * ho * wo) as u64
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.padding == 0
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cfg: Conv2dConfig,
    /// `(out, in / groups, k, k)`
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    /// Kaiming-normal kernels (fan-in), biases uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(cfg: Conv2dConfig, rng: &mut R) -> Self {
        assert!(cfg.groups >= 1 && cfg.in_channels % cfg.groups == 0 && cfg.out_channels % cfg.groups == 0);
        let k = cfg.kernel;
        let fan_in = (cfg.in_per_group() * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let shape = [cfg.out_channels, cfg.in_per_group(), k, k];
        let mut weight = Param::filled(&shape, 0.0, ParamKind::Weight);
        weight.value.iter_mut().for_each(|v| *v = normal.sample(rng));
        let bias = cfg.bias.then(|| {
            let bound = 1.0 / fan_in.sqrt();
            let uniform = Uniform::new_inclusive(-bound, bound);
            let mut b = Param::filled(&[cfg.out_channels], 0.0, ParamKind::Bias);
            b.value.iter_mut().for_each(|v| *v = uniform.sample(rng));
            b
        });
        Self { cfg, weight, bias, input: None }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.input = train.then(|| x.as_standard_layout().into_owned());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dim();
        let cfg = &self.cfg;
        if c != cfg.in_channels {
            return Err(shape_err(format!(
                "conv expects {} input channels, got {c}",
                cfg.in_channels
            )));
        }
        let (ho, wo) = cfg.output_size(h, w);
        if ho == 0 || wo == 0 {
            return Err(shape_err(format!("conv input {h}x{w} too small for its kernel")));
        }
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut y = Tensor::zeros((n, cfg.out_channels, ho, wo));
        let (cig, cog, kk) = (cfg.in_per_group(), cfg.out_per_group(), cfg.kernel * cfg.kernel);
        let weight = self.weight_matrix();
        let mut cols = Array2::zeros((cig * kk, ho * wo));
        {
            let ys = y.as_slice_mut().expect("fresh array");
            for b in 0..n {
                for g in 0..cfg.groups {
                    let xin = &xs[(b * c + g * cig) * h * w..(b * c + (g + 1) * cig) * h * w];
                    let out = &mut ys[(b * cfg.out_channels + g * cog) * ho * wo
                        ..(b * cfg.out_channels + (g + 1) * cog) * ho * wo];
                    let mut out = ArrayViewMut2::from_shape((cog, ho * wo), out).expect("sized");
                    let wg = weight.slice(ndarray::s![g * cog..(g + 1) * cog, ..]);
                    if cfg.is_pointwise() {
                        let xin = ArrayView2::from_shape((cig, h * w), xin).expect("sized");
                        general_mat_mul(1.0, &wg, &xin, 0.0, &mut out);
                    } else {
                        im2col(xin, cig, h, w, cfg, ho, wo, cols.as_slice_mut().expect("owned"));
                        general_mat_mul(1.0, &wg, &cols, 0.0, &mut out);
                    }
                }
            }
        }
        if let Some(bias) = &self.bias {
            for (co, &bv) in bias.value.iter().enumerate() {
                y.slice_mut(ndarray::s![.., co, .., ..]).mapv_inplace(|v| v + bv);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = expect_cache(self.input.take(), "conv2d");
        let (n, c, h, w) = x.dim();
        let cfg = self.cfg;
        let (_, co, ho, wo) = gy.dim();
        let (cig, cog, kk) = (cfg.in_per_group(), cfg.out_per_group(), cfg.kernel * cfg.kernel);
        let gy = gy.as_standard_layout();
        let gys = gy.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("cached standard layout");

        if let Some(bias) = &mut self.bias {
            for (ch, g) in bias.grad.iter_mut().enumerate() {
                *g += gy.slice(ndarray::s![.., ch, .., ..]).sum();
            }
        }

        let weight = self.weight_matrix();
        let mut wgrad = Array2::<f64>::zeros((co, cig * kk));
        let mut gx = Tensor::zeros((n, c, h, w));
        let mut cols = Array2::zeros((cig * kk, ho * wo));
        let mut dcols = Array2::zeros((cig * kk, ho * wo));
        {
            let gxs = gx.as_slice_mut().expect("fresh array");
            for b in 0..n {
                for g in 0..cfg.groups {
                    let xin = &xs[(b * c + g * cig) * h * w..(b * c + (g + 1) * cig) * h * w];
                    let gout = &gys[(b * co + g * cog) * ho * wo..(b * co + (g + 1) * cog) * ho * wo];
                    let gout = ArrayView2::from_shape((cog, ho * wo), gout).expect("sized");
                    let wg = weight.slice(ndarray::s![g * cog..(g + 1) * cog, ..]);
                    let mut wgrad_g = wgrad.slice_mut(ndarray::s![g * cog..(g + 1) * cog, ..]);
                    let gin = &mut gxs[(b * c + g * cig) * h * w..(b * c + (g + 1) * cig) * h * w];
                    if cfg.is_pointwise() {
                        let xin = ArrayView2::from_shape((cig, h * w), xin).expect("sized");
                        general_mat_mul(1.0, &gout, &xin.t(), 1.0, &mut wgrad_g);
                        let mut gin = ArrayViewMut2::from_shape((cig, h * w), gin).expect("sized");
                        general_mat_mul(1.0, &wg.t(), &gout, 1.0, &mut gin);
                    } else {
                        im2col(xin, cig, h, w, &cfg, ho, wo, cols.as_slice_mut().expect("owned"));
                        general_mat_mul(1.0, &gout, &cols.t(), 1.0, &mut wgrad_g);
                        general_mat_mul(1.0, &wg.t(), &gout, 0.0, &mut dcols);
                        col2im(dcols.as_slice().expect("owned"), cig, h, w, &cfg, ho, wo, gin);
                    }
                }
            }
        }
        let wshape = self.weight.grad.shape().to_vec();
        let wgrad = wgrad.into_shape_with_order(wshape).expect("weight shape");
        self.weight.grad += &wgrad;
        gx
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let cfg = &self.cfg;
        self.weight
            .value
            .clone()
            .into_shape_with_order((cfg.out_channels, cfg.in_per_group() * cfg.kernel * cfg.kernel))
            .expect("weight shape")
    }

    pub fn weight4(&self) -> ndarray::ArrayView4<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix4>().expect("4-d kernel")
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Range of output columns `ow` for which `ow + offset - pad` lies inside `[0, len)`.
#[inline]
fn valid_range(offset: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(offset).min(out_len);
    let hi = (len + pad).saturating_sub(offset).min(out_len);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cfg: &Conv2dConfig, ho: usize, wo: usize, cols: &mut [f64]) {
    let (k, d, p) = (cfg.kernel, cfg.dilation, cfg.padding);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(ki * d, p, h, ho);
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                dst.fill(0.0);
                let (ow_lo, ow_hi) = valid_range(kj * d, p, w, wo);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let ih = oh + ki * d - p;
                    let iw0 = ow_lo + kj * d - p;
                    let len = ow_hi - ow_lo;
                    dst[oh * wo + ow_lo..oh * wo + ow_hi].copy_from_slice(&plane[ih * w + iw0..ih * w + iw0 + len]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, cfg: &Conv2dConfig, ho: usize, wo: usize, x: &mut [f64]) {
    let (k, d, p) = (cfg.kernel, cfg.dilation, cfg.padding);
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(ki * d, p, h, ho);
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (ow_lo, ow_hi) = valid_range(kj * d, p, w, wo);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let ih = oh + ki * d - p;
                    let iw0 = ow_lo + kj * d - p;
                    let len = ow_hi - ow_lo;
                    let dst = &mut plane[ih * w + iw0..ih * w + iw0 + len];
                    for (a, b) in dst.iter_mut().zip(&src[oh * wo + ow_lo..oh * wo + ow_hi]) {
                        *a += b;
                    }
                }
            }
        }
    }
}
