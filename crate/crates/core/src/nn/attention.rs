//! Self-attention cores of the channel and axial attention blocks.
//!
//! All three variants reduce to the same token operation: given a token
//! matrix `M` of shape `(tokens, features)`,
//!
//! ```text
//! A   = softmax_rows(M · Mᵀ)        (tokens x tokens)
//! out = A · M + M
//! ```
//!
//! They differ only in how a feature map is cut into token matrices:
//!
//! * `Channel`: one matrix per sample, tokens are channels and features are
//!   the `H·W` spatial positions, giving a `C x C` affinity.
//! * `Column`: one matrix per column, tokens are the `H` positions of that
//!   column and features are channels, giving `H x H` affinities.
//! * `Row`: one matrix per row, `W x W` affinities.
//!
//! The axial variants therefore never materialise an `(H·W) x (H·W)` matrix.
//! Backward recomputes the affinities from the cached input instead of
//! storing them.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::{expect_cache, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    Channel,
    Column,
    Row,
}

/// Shapes of the affinity matrices built by the last forward call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffinityStats {
    /// number of independent affinity matrices
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
}

impl AffinityStats {
    pub fn total_entries(&self) -> usize {
        self.count * self.rows * self.cols
    }
}

pub fn softmax_rows(e: &mut Array2<f64>) {
    for mut row in e.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Affinity `softmax(M Mᵀ)` and attended tokens `A M + M`.
pub fn attend(tokens: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut affinity = tokens.dot(&tokens.t());
    softmax_rows(&mut affinity);
    let out = affinity.dot(&tokens) + tokens;
    (out, affinity)
}

/// Gradient of [`attend`]'s output with respect to its token matrix.
pub fn attend_backward(tokens: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> Array2<f64> {
    let mut affinity = tokens.dot(&tokens.t());
    softmax_rows(&mut affinity);
    // out = A M + M
    let mut grad = grad_out.to_owned() + affinity.t().dot(&grad_out);
    let grad_a = grad_out.dot(&tokens.t());
    // softmax rows: dE = A ⊙ (dA − rowsum(dA ⊙ A))
    let mut grad_e = &grad_a * &affinity;
    let row_dot = grad_e.sum_axis(Axis(1));
    for (mut row, (a_row, &rd)) in grad_e.rows_mut().into_iter().zip(affinity.rows().into_iter().zip(row_dot.iter())) {
        row.zip_mut_with(&a_row, |v, &a| *v -= a * rd);
    }
    // E = M Mᵀ
    let sym = &grad_e + &grad_e.t();
    grad += &sym.dot(&tokens);
    grad
}

#[derive(Debug, Clone)]
pub struct AttentionCore {
    pub axis: AttentionAxis,
    input: Option<Tensor>,
    last_affinity: Option<AffinityStats>,
}

stateless_module!(AttentionCore);

impl AttentionCore {
    pub fn new(axis: AttentionAxis) -> Self {
        Self { axis, input: None, last_affinity: None }
    }

    pub fn last_affinity(&self) -> Option<AffinityStats> {
        self.last_affinity
    }

    /// Number of affinity entries one forward pass on `(c, h, w)` builds per sample.
    pub fn affinity_entries(axis: AttentionAxis, c: usize, h: usize, w: usize) -> usize {
        match axis {
            AttentionAxis::Channel => c * c,
            AttentionAxis::Column => w * h * h,
            AttentionAxis::Row => h * w * w,
        }
    }

    /// Multiply-accumulates for the two matrix products per sample.
    pub fn macs(axis: AttentionAxis, c: usize, h: usize, w: usize) -> u64 {
        2 * (Self::affinity_entries(axis, c, h, w) * match axis {
            AttentionAxis::Channel => h * w,
            _ => c,
        }) as u64
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dim();
        let mut y = Tensor::zeros(x.raw_dim());
        let mut stats = AffinityStats { count: 0, rows: 0, cols: 0 };
        let mut record = |a: &Array2<f64>| {
            stats.count += 1;
            stats.rows = a.nrows();
            stats.cols = a.ncols();
        };
        for b in 0..n {
            match self.axis {
                AttentionAxis::Channel => {
                    let tokens = channel_tokens(x, b);
                    let (out, a) = attend(tokens.view());
                    record(&a);
                    y.slice_mut(s![b, .., .., ..])
                        .assign(&out.into_shape_with_order((c, h, w)).expect("sized"));
                }
                AttentionAxis::Column => {
                    for col in 0..w {
                        // (C, H) slice transposed into (H tokens, C features)
                        let tokens = x.slice(s![b, .., .., col]).t().to_owned();
                        let (out, a) = attend(tokens.view());
                        record(&a);
                        y.slice_mut(s![b, .., .., col]).assign(&out.t());
                    }
                }
                AttentionAxis::Row => {
                    for row in 0..h {
                        let tokens = x.slice(s![b, .., row, ..]).t().to_owned();
                        let (out, a) = attend(tokens.view());
                        record(&a);
                        y.slice_mut(s![b, .., row, ..]).assign(&out.t());
                    }
                }
            }
        }
        self.last_affinity = Some(stats);
        if train {
            self.input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = expect_cache(self.input.take(), "attention core");
        let (n, c, h, w) = x.dim();
        let mut gx = Tensor::zeros(x.raw_dim());
        for b in 0..n {
            match self.axis {
                AttentionAxis::Channel => {
                    let tokens = channel_tokens(&x, b);
                    let g = channel_tokens(gy, b);
                    let gt = attend_backward(tokens.view(), g.view());
                    gx.slice_mut(s![b, .., .., ..])
                        .assign(&gt.into_shape_with_order((c, h, w)).expect("sized"));
                }
                AttentionAxis::Column => {
                    for col in 0..w {
                        let tokens = x.slice(s![b, .., .., col]).t().to_owned();
                        let g = gy.slice(s![b, .., .., col]).t().to_owned();
                        let gt = attend_backward(tokens.view(), g.view());
                        gx.slice_mut(s![b, .., .., col]).assign(&gt.t());
                    }
                }
                AttentionAxis::Row => {
                    for row in 0..h {
                        let tokens = x.slice(s![b, .., row, ..]).t().to_owned();
                        let g = gy.slice(s![b, .., row, ..]).t().to_owned();
                        let gt = attend_backward(tokens.view(), g.view());
                        gx.slice_mut(s![b, .., row, ..]).assign(&gt.t());
                    }
                }
            }
        }
        gx
    }
}

fn channel_tokens(x: &Tensor, b: usize) -> Array2<f64> {
    let (_, c, h, w) = x.dim();
    x.slice(s![b, .., .., ..])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one_even_for_large_logits() {
        let mut e = Array2::from_shape_vec((2, 3), vec![1000.0, 999.0, -5.0, 0.0, 0.0, 0.0]).unwrap();
        softmax_rows(&mut e);
        for row in e.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((e[[1, 0]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn equal_channels_attend_to_their_common_value() {
        let x = Tensor::from_elem((1, 3, 2, 2), 0.7);
        let y = AttentionCore::new(AttentionAxis::Channel).forward(&x, false);
        // uniform affinity rows: A·M = M, plus residual
        assert!(y.iter().all(|&v| (v - 1.4).abs() < 1e-12));
    }

    #[test]
    fn axial_affinities_are_per_axis() {
        let x = Tensor::from_shape_fn((2, 3, 5, 4), |(b, c, i, j)| ((b + c * 2 + i * 3 + j) % 7) as f64 * 0.1);
        let mut col = AttentionCore::new(AttentionAxis::Column);
        col.forward(&x, false);
        assert_eq!(col.last_affinity(), Some(AffinityStats { count: 2 * 4, rows: 5, cols: 5 }));
        let mut row = AttentionCore::new(AttentionAxis::Row);
        row.forward(&x, false);
        assert_eq!(row.last_affinity(), Some(AffinityStats { count: 2 * 5, rows: 4, cols: 4 }));
    }
}
