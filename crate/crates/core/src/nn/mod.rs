//! Differentiable layers with explicit forward/backward passes.
//!
//! Every layer caches what it needs during a training-mode forward call and
//! consumes that cache in `backward`, accumulating parameter gradients into
//! its [`Param`]s. Activations are `(batch, channels, height, width)` arrays
//! of `f64`.


use ndarray::{Array4, ArrayD, IxDyn};

pub use attention::{AttentionAxis, AttentionCore};
pub use conv::{Conv2d, Conv2dConfig};
pub use norm::BatchNorm2d;
pub use ops::{AdaptiveAvgPool2d, BilinearUpsample, Relu};

pub type Tensor = Array4<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm running statistics. Saved with the model, never optimised.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(value: ArrayD<f64>, kind: ParamKind) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad, kind }
    }

    pub fn filled(shape: &[usize], fill: f64, kind: ParamKind) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), fill), kind)
    }

    pub fn is_learnable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Hierarchical parameter traversal. Names are stable across runs and form
/// the keys of the checkpoint archive.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn num_learnable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.is_learnable() {
                n += p.value.len();
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

/// Implements [`Module`] with an empty traversal for parameter-free layers.
macro_rules! stateless_module {
    ($($t:ty),*) => {$(
        impl $crate::nn::Module for $t {
            fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &$crate::nn::Param)) {}
            fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut $crate::nn::Param)) {}
        }
    )*};
}

pub mod attention;
pub mod conv;
pub mod norm;
pub mod ops;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn expect_cache<T>(cache: Option<T>, layer: &str) -> T {
    cache.unwrap_or_else(|| panic!("{layer}: backward called without a training-mode forward"))
}
