//! Parameter-free layers and tensor plumbing.

use ndarray::{concatenate, s, Axis};

use super::{expect_cache, Tensor};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Tensor>,
}

stateless_module!(Relu, AdaptiveAvgPool2d, BilinearUpsample);

impl Relu {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        if train {
            self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        }
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mask = expect_cache(self.mask.take(), "relu");
        gy * &mask
    }
}

/// Bin `[start, end)` of input positions averaged into output position `i`.
fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Average pooling to a fixed output size, bins chosen as in the usual
/// adaptive pooling definition (`floor(i*in/out)` to `ceil((i+1)*in/out)`).
#[derive(Debug, Clone)]
pub struct AdaptiveAvgPool2d {
    pub output: usize,
    input_hw: Option<(usize, usize)>,
}

impl AdaptiveAvgPool2d {
    pub fn new(output: usize) -> Self {
        Self { output, input_hw: None }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dim();
        let o = self.output;
        if o == 0 || o > h || o > w {
            return Err(shape_err(format!("cannot pool {h}x{w} to {o}x{o}")));
        }
        let mut y = Tensor::zeros((n, c, o, o));
        for i in 0..o {
            let (h0, h1) = adaptive_bin(i, h, o);
            for j in 0..o {
                let (w0, w1) = adaptive_bin(j, w, o);
                let area = ((h1 - h0) * (w1 - w0)) as f64;
                let window = x.slice(s![.., .., h0..h1, w0..w1]);
                let sums = window.sum_axis(Axis(3)).sum_axis(Axis(2));
                y.slice_mut(s![.., .., i, j]).assign(&(sums / area));
            }
        }
        if train {
            self.input_hw = Some((h, w));
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (h, w) = expect_cache(self.input_hw.take(), "adaptive pool");
        let (n, c, o, _) = gy.dim();
        let mut gx = Tensor::zeros((n, c, h, w));
        for i in 0..o {
            let (h0, h1) = adaptive_bin(i, h, o);
            for j in 0..o {
                let (w0, w1) = adaptive_bin(j, w, o);
                let area = ((h1 - h0) * (w1 - w0)) as f64;
                for b in 0..n {
                    for ch in 0..c {
                        let g = gy[[b, ch, i, j]] / area;
                        gx.slice_mut(s![b, ch, h0..h1, w0..w1]).mapv_inplace(|v| v + g);
                    }
                }
            }
        }
        gx
    }
}

/// Source taps `(lo, hi, frac)` for bilinear resampling along one axis with
/// half-pixel centres (`align_corners = false`).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BilinearUpsample {
    pub output: usize,
    input_hw: Option<(usize, usize)>,
}

impl BilinearUpsample {
    pub fn new(output: usize) -> Self {
        Self { output, input_hw: None }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dim();
        if train {
            self.input_hw = Some((h, w));
        }
        if h == self.output && w == self.output {
            return x.clone();
        }
        let (rows, cols) = (bilinear_taps(h, self.output), bilinear_taps(w, self.output));
        let mut y = Tensor::zeros((n, c, self.output, self.output));
        for b in 0..n {
            for ch in 0..c {
                let plane = x.slice(s![b, ch, .., ..]);
                let mut out = y.slice_mut(s![b, ch, .., ..]);
                for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
                    for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let top = plane[[r0, c0]] * (1.0 - fc) + plane[[r0, c1]] * fc;
                        let bottom = plane[[r1, c0]] * (1.0 - fc) + plane[[r1, c1]] * fc;
                        out[[i, j]] = top * (1.0 - fr) + bottom * fr;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (h, w) = expect_cache(self.input_hw.take(), "bilinear upsample");
        if h == self.output && w == self.output {
            return gy.clone();
        }
        let (n, c, _, _) = gy.dim();
        let (rows, cols) = (bilinear_taps(h, self.output), bilinear_taps(w, self.output));
        let mut gx = Tensor::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                let g = gy.slice(s![b, ch, .., ..]);
                let mut plane = gx.slice_mut(s![b, ch, .., ..]);
                for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
                    for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let v = g[[i, j]];
                        plane[[r0, c0]] += v * (1.0 - fr) * (1.0 - fc);
                        plane[[r0, c1]] += v * (1.0 - fr) * fc;
                        plane[[r1, c0]] += v * fr * (1.0 - fc);
                        plane[[r1, c1]] += v * fr * fc;
                    }
                }
            }
        }
        gx
    }
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let views: Vec<_> = parts.iter().map(|t| t.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| shape_err(format!("channel concat: {e}")))
}

pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Vec<Tensor> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = x.slice(s![.., start..start + len, .., ..]).to_owned();
            start += len;
            part
        })
        .collect()
}

pub fn concat_batch(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    concatenate(Axis(0), &[a.view(), b.view()]).map_err(|e| shape_err(format!("batch concat: {e}")))
}

/// Inverse of [`concat_batch`] for two equal halves.
pub fn split_batch(x: &Tensor) -> (Tensor, Tensor) {
    let half = x.dim().0 / 2;
    (
        x.slice(s![..half, .., .., ..]).to_owned(),
        x.slice(s![half.., .., .., ..]).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_pool_averages_even_blocks() {
        let x = Tensor::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let y = AdaptiveAvgPool2d::new(2).forward(&x, false).unwrap();
        assert_eq!(y[[0, 0, 0, 0]], 2.5);
        assert_eq!(y[[0, 0, 1, 1]], 12.5);
    }

    #[test]
    fn adaptive_bins_overlap_for_uneven_sizes() {
        assert_eq!(adaptive_bin(0, 5, 3), (0, 2));
        assert_eq!(adaptive_bin(1, 5, 3), (1, 4));
        assert_eq!(adaptive_bin(2, 5, 3), (3, 5));
    }

    #[test]
    fn bilinear_upsample_preserves_constants_and_matches_reference() {
        let mut up = BilinearUpsample::new(4);
        let y = up.forward(&Tensor::from_elem((1, 2, 2, 2), 3.0), false);
        assert!(y.iter().all(|&v| (v - 3.0).abs() < 1e-15));

        // 1-D reference for [0, 1] upsampled x2 with half-pixel centres: 0, .25, .75, 1
        let x = Tensor::from_shape_vec((1, 1, 2, 2), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = up.forward(&x, false);
        let row: Vec<f64> = y.slice(s![0, 0, 0, ..]).to_vec();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn split_inverts_concat() {
        let a = Tensor::from_elem((2, 1, 2, 2), 1.0);
        let b = Tensor::from_elem((2, 3, 2, 2), 2.0);
        let cat = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&cat, &[1, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let (x, y) = split_batch(&concat_batch(&a, &a).unwrap());
        assert_eq!(x, a);
        assert_eq!(y, a);
    }
}
