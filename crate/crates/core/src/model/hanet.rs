use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{ConvBlock, HanModule};
use super::HaNetConfig;
use crate::error::{shape_err, Result};
use crate::nn::ops::{concat_batch, concat_channels, split_batch, split_channels};
use crate::nn::{join, AdaptiveAvgPool2d, BilinearUpsample, Conv2d, Conv2dConfig, Module, Param, Tensor};

/// Per-scale features of both temporal branches, finest scale first.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    pub t1: Vec<Tensor>,
    pub t2: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct HaNet {
    pub config: HaNetConfig,
    pub blocks: Vec<ConvBlock>,
    pools: Vec<AdaptiveAvgPool2d>,
    pub hans: Vec<HanModule>,
    upsamplers: Vec<BilinearUpsample>,
    pub head: Conv2d,
}

impl HaNet {
    pub fn new(config: HaNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mom, eps) = (config.bn_momentum, config.bn_eps);
        let mut input = config.in_channels;
        let mut blocks = Vec::with_capacity(4);
        for &c in &config.stage_channels {
            blocks.push(ConvBlock::new(input, c, mom, eps, &mut rng));
            input = c;
        }
        let groups = config.pcs_groups();
        let hans = config
            .stage_channels
            .iter()
            .map(|&c| HanModule::new(c, &config.pcs_dilations, groups, &mut rng))
            .collect();
        let fused: usize = config.stage_channels.iter().sum();
        let head = Conv2d::new(Conv2dConfig::new(fused, 2, 1), &mut rng);
        Ok(Self {
            pools: config.pooled_sizes.iter().map(|&s| AdaptiveAvgPool2d::new(s)).collect(),
            upsamplers: (0..4).map(|_| BilinearUpsample::new(config.tile)).collect(),
            config,
            blocks,
            hans,
            head,
        })
    }

    fn check_input(&self, t1: &Tensor, t2: &Tensor) -> Result<()> {
        let (_, c, h, w) = t1.dim();
        let cfg = &self.config;
        if t1.dim() != t2.dim() {
            return Err(shape_err(format!("T1 {:?} and T2 {:?} differ", t1.dim(), t2.dim())));
        }
        if c != cfg.in_channels || h != cfg.tile || w != cfg.tile {
            return Err(shape_err(format!(
                "expected ({}, {}, {}) inputs, got ({c}, {h}, {w})",
                cfg.in_channels, cfg.tile, cfg.tile
            )));
        }
        Ok(())
    }

    /// Both branches run as one stacked batch through the shared encoder.
    fn encode_stacked(&mut self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(4);
        let mut cur = self.blocks[0].forward(x, train)?;
        feats.push(cur.clone());
        for (block, pool) in self.blocks[1..].iter_mut().zip(self.pools.iter_mut()) {
            let pooled = pool.forward(&cur, train)?;
            cur = block.forward(&pooled, train)?;
            feats.push(cur.clone());
        }
        Ok(feats)
    }

    pub fn encode(&mut self, t1: &Tensor, t2: &Tensor, train: bool) -> Result<EncoderFeatures> {
        self.check_input(t1, t2)?;
        let stacked = self.encode_stacked(&concat_batch(t1, t2)?, train)?;
        let (a, b): (Vec<_>, Vec<_>) = stacked.iter().map(split_batch).unzip();
        Ok(EncoderFeatures { t1: a, t2: b })
    }

    /// Change logits of shape `(batch, 2, tile, tile)`. Training mode uses
    /// batch statistics and caches activations for [`HaNet::backward`].
    pub fn forward(&mut self, t1: &Tensor, t2: &Tensor, train: bool) -> Result<Tensor> {
        let feats = self.encode(t1, t2, train)?;
        let mut ups = Vec::with_capacity(4);
        for (m, (han, up)) in self.hans.iter_mut().zip(self.upsamplers.iter_mut()).enumerate() {
            let out = han.forward(&feats.t1[m], &feats.t2[m], train)?;
            ups.push(up.forward(&out, train));
        }
        let cat = concat_channels(&ups.iter().collect::<Vec<_>>())?;
        self.head.forward(&cat, train)
    }

    /// Backpropagates `d loss / d logits`, accumulating every parameter gradient.
    pub fn backward(&mut self, grad_logits: &Tensor) {
        let gcat = self.head.backward(grad_logits);
        let parts = split_channels(&gcat, &self.config.stage_channels);
        let mut stacked_grads = Vec::with_capacity(4);
        for ((han, up), g) in self.hans.iter_mut().zip(self.upsamplers.iter_mut()).zip(&parts) {
            let gh = up.backward(g);
            let (g1, g2) = han.backward(&gh);
            stacked_grads.push(concat_batch(&g1, &g2).expect("matching halves"));
        }
        let mut g = self.blocks[3].backward(&stacked_grads[3]);
        for m in (0..3).rev() {
            let mut gm = self.pools[m].backward(&g);
            gm += &stacked_grads[m];
            g = self.blocks[m].backward(&gm);
        }
    }

    pub fn predict(&mut self, t1: &Tensor, t2: &Tensor) -> Result<Array3<u8>> {
        Ok(predict(&self.forward(t1, t2, false)?))
    }

    pub fn parameter_count(&self) -> usize {
        self.num_learnable()
    }

    /// Multiply-accumulate count of one forward pass on a single pair.
    pub fn macs(&self) -> u64 {
        let sizes = self.config.scale_sizes();
        let encoder: u64 = self.blocks.iter().zip(sizes).map(|(b, s)| 2 * b.macs(s, s)).sum();
        let hans: u64 = self.hans.iter().zip(sizes).map(|(h, s)| h.macs(s, s)).sum();
        encoder + hans + self.head.cfg.macs(self.config.tile, self.config.tile)
    }
}

impl Module for HaNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder.block{}", i + 1)), f);
        }
        for (i, h) in self.hans.iter().enumerate() {
            h.visit(&join(prefix, &format!("han{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder.block{}", i + 1)), f);
        }
        for (i, h) in self.hans.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("han{}", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Per-pixel argmax over two-class logits `(batch, 2, h, w)`; ties go to
/// class 0 (unchanged).
pub fn predict(logits: &Tensor) -> Array3<u8> {
    let unchanged = logits.index_axis(Axis(1), 0);
    let changed = logits.index_axis(Axis(1), 1);
    ndarray::Zip::from(&unchanged)
        .and(&changed)
        .map_collect(|&u, &c| u8::from(c > u))
}
