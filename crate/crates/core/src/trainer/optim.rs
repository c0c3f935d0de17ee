use ndarray::ArrayD;

use crate::nn::{Module, ParamKind};

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightDecay {
    /// `wd * x` is added to the gradient before the moment estimates.
    #[default]
    L2,
    /// The parameter is shrunk by `lr * wd` outside the adaptive step.
    Decoupled,
}

/// Adam with optional L2 or decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecay,
    /// Whether batch-norm scales and all biases are decayed as well.
    pub decay_all: bool,
    step: u64,
    moments: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(weight_decay: f64, decay_mode: WeightDecay) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, decay_mode, decay_all: true, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<M: Module>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay_all = self.decay_all;
        let wd = self.weight_decay;
        let mode = self.decay_mode;
        let moments = &mut self.moments;
        let mut idx = 0;
        model.visit_mut("", &mut |_, p| {
            if !p.is_learnable() {
                return;
            }
            if moments.len() <= idx {
                moments.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut moments[idx];
            idx += 1;
            let decayed = decay_all || p.kind == ParamKind::Weight;
            let l2 = if decayed && mode == WeightDecay::L2 { wd } else { 0.0 };
            if decayed && mode == WeightDecay::Decoupled {
                p.value.mapv_inplace(|x| x * (1.0 - lr * wd));
            }
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|x, &g, m, v| {
                let g = g + l2 * *x;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        });
    }
}
