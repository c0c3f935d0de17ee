//! Test-only oracles: central finite differences, nested-loop attention and
//! brute-force confusion counting. None of these call into the code paths
//! they are used to check.
#![allow(dead_code)]

use hanet::nn::{Module, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Below this norm a gradient counts as identically zero (a bias feeding a
/// training-mode batch norm, say) and the error is measured absolutely.
pub const ZERO_GRAD_FLOOR: f64 = 1e-7;

/// `‖a − b‖ / max(‖a‖, ‖b‖, ZERO_GRAD_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(ZERO_GRAD_FLOOR)
}

fn sample_indices(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Outcome of one gradient check: worst relative error and the tensor it occurred on.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub worst: f64,
    pub worst_on: String,
    pub tensors: usize,
}

impl GradCheck {
    fn push(&mut self, name: &str, err: f64) {
        self.tensors += 1;
        if err > self.worst || self.worst_on.is_empty() {
            self.worst = self.worst.max(err);
            self.worst_on = name.to_string();
        }
    }
}

/// Checks analytic input and parameter gradients of a module against central
/// differences of the scalar `Σ weights ⊙ forward(inputs)`.
///
/// `forward` runs the module in training mode on the given inputs;
/// `backward` returns the gradients with respect to each input.
pub fn check_module<M, F, B>(module: &M, inputs: &[Tensor], forward: F, backward: B, max_entries: usize, seed: u64) -> GradCheck
where
    M: Module + Clone,
    F: Fn(&mut M, &[Tensor]) -> Tensor,
    B: Fn(&mut M, &Tensor) -> Vec<Tensor>,
{
    let mut r = rng(seed);
    let mut m = module.clone();
    m.zero_grad();
    let y = forward(&mut m, inputs);
    let weights = random_tensor(y.dim(), &mut r);
    let input_grads = backward(&mut m, &weights);

    let objective = |module: &M, xs: &[Tensor]| -> f64 {
        let mut fresh = module.clone();
        let y = forward(&mut fresh, xs);
        (&y * &weights).sum()
    };

    let mut result = GradCheck { worst: 0.0, worst_on: String::new(), tensors: 0 };
    for (k, (x, gx)) in inputs.iter().zip(&input_grads).enumerate() {
        let flat: Vec<f64> = gx.iter().copied().collect();
        let idx = sample_indices(x.len(), max_entries, &mut r);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for &i in &idx {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].as_slice_mut().unwrap()[i] += FD_STEP;
            minus[k].as_slice_mut().unwrap()[i] -= FD_STEP;
            numeric.push((objective(module, &plus) - objective(module, &minus)) / (2.0 * FD_STEP));
            analytic.push(flat[i]);
        }
        result.push(&format!("input{k}"), rel_err(&analytic, &numeric));
    }

    let mut names = Vec::new();
    m.visit("", &mut |name, p| {
        if p.is_learnable() {
            names.push((name.to_string(), p.value.len(), p.grad.iter().copied().collect::<Vec<_>>()));
        }
    });
    for (name, len, grad) in names {
        let idx = sample_indices(len, max_entries, &mut r);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for &i in &idx {
            let perturbed = |delta: f64| {
                let mut c = module.clone();
                c.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.as_slice_mut().unwrap()[i] += delta;
                    }
                });
                c
            };
            numeric.push((objective(&perturbed(FD_STEP), inputs) - objective(&perturbed(-FD_STEP), inputs)) / (2.0 * FD_STEP));
            analytic.push(grad[i]);
        }
        result.push(&name, rel_err(&analytic, &numeric));
    }
    result
}

/// Central-difference gradient of a scalar function of a tensor, at every entry.
pub fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.raw_dim());
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_slice_mut().unwrap()[i] += FD_STEP;
        minus.as_slice_mut().unwrap()[i] -= FD_STEP;
        g.as_slice_mut().unwrap()[i] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
    }
    g
}

/// Nested-loop self-attention over tokens `m[t][f]`: `softmax(M Mᵀ) M + M`.
pub fn naive_attend(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = m.len();
    let f = m.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; f]; t];
    for a in 0..t {
        let mut logits = vec![0.0; t];
        for b in 0..t {
            for k in 0..f {
                logits[b] += m[a][k] * m[b][k];
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for k in 0..f {
            let mut acc = 0.0;
            for b in 0..t {
                acc += exps[b] / z * m[b][k];
            }
            out[a][k] = acc + m[a][k];
        }
    }
    out
}

/// Channel attention core of a `(1, c, h, w)` tensor via [`naive_attend`].
pub fn naive_channel_core(x: &Tensor) -> Tensor {
    let (_, c, h, w) = x.dim();
    let tokens: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            let mut v = Vec::new();
            for i in 0..h {
                for j in 0..w {
                    v.push(x[[0, ch, i, j]]);
                }
            }
            v
        })
        .collect();
    let out = naive_attend(&tokens);
    Tensor::from_shape_fn((1, c, h, w), |(_, ch, i, j)| out[ch][i * w + j])
}

/// Column attention core: every column's positions attend to each other.
pub fn naive_column_core(x: &Tensor) -> Tensor {
    let (_, c, h, w) = x.dim();
    let mut y = Tensor::zeros((1, c, h, w));
    for j in 0..w {
        let tokens: Vec<Vec<f64>> = (0..h).map(|i| (0..c).map(|ch| x[[0, ch, i, j]]).collect()).collect();
        let out = naive_attend(&tokens);
        for i in 0..h {
            for ch in 0..c {
                y[[0, ch, i, j]] = out[i][ch];
            }
        }
    }
    y
}

pub fn naive_row_core(x: &Tensor) -> Tensor {
    let (_, c, h, w) = x.dim();
    let mut y = Tensor::zeros((1, c, h, w));
    for i in 0..h {
        let tokens: Vec<Vec<f64>> = (0..w).map(|j| (0..c).map(|ch| x[[0, ch, i, j]]).collect()).collect();
        let out = naive_attend(&tokens);
        for j in 0..w {
            for ch in 0..c {
                y[[0, ch, i, j]] = out[j][ch];
            }
        }
    }
    y
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `(tp, tn, fp, fn)` by explicit enumeration.
pub fn naive_counts(pred: &[u8], gt: &[u8]) -> (u64, u64, u64, u64) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for i in 0..pred.len() {
        if pred[i] == 1 && gt[i] == 1 {
            tp += 1;
        } else if pred[i] == 0 && gt[i] == 0 {
            tn += 1;
        } else if pred[i] == 1 {
            fp += 1;
        } else {
            fn_ += 1;
        }
    }
    (tp, tn, fp, fn_)
}

/// Scores written straight from their textbook definitions (non-degenerate counts only).
pub struct NaiveScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oa: f64,
    pub kappa: f64,
    pub iou: f64,
}

pub fn naive_scores((tp, tn, fp, fn_): (u64, u64, u64, u64)) -> NaiveScores {
    let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let n = tp + tn + fp + fn_;
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    let f1 = 2.0 / (1.0 / precision + 1.0 / recall);
    let oa = (tp + tn) / n;
    let pe = ((tp + fn_) * (tp + fp)) / (n * n) + ((tn + fp) * (tn + fn_)) / (n * n);
    NaiveScores { precision, recall, f1, oa, kappa: (oa - pe) / (1.0 - pe), iou: tp / (tp + fn_ + fp) }
}
