use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::ops::{concat_channels, split_channels};
use crate::nn::{join, AttentionAxis, AttentionCore, BatchNorm2d, Conv2d, Conv2dConfig, Module, Param, Relu, Tensor};

/// Residual convolution block:
///
/// ```text
/// g   = ReLU(BN(conv3x3_a(x)))
/// out = ReLU(BN(conv1x1(g) + conv3x3_b(x)))
/// ```
///
/// The two 3x3 convolutions have independent weights. All three
/// convolutions feed a batch norm and so carry no bias.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv_a: Conv2d,
    pub bn_a: BatchNorm2d,
    relu_a: Relu,
    pub conv_pointwise: Conv2d,
    pub conv_b: Conv2d,
    pub bn_out: BatchNorm2d,
    relu_out: Relu,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, momentum: f64, eps: f64, rng: &mut R) -> Self {
        Self {
            conv_a: Conv2d::new(Conv2dConfig::new(input, output, 3).same().without_bias(), rng),
            bn_a: BatchNorm2d::new(output, momentum, eps),
            relu_a: Relu::default(),
            conv_pointwise: Conv2d::new(Conv2dConfig::new(output, output, 1).without_bias(), rng),
            conv_b: Conv2d::new(Conv2dConfig::new(input, output, 3).same().without_bias(), rng),
            bn_out: BatchNorm2d::new(output, momentum, eps),
            relu_out: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let a = self.conv_a.forward(x, train)?;
        let a = self.bn_a.forward(&a, train)?;
        let g = self.relu_a.forward(&a, train);
        let mut s = self.conv_pointwise.forward(&g, train)?;
        s += &self.conv_b.forward(x, train)?;
        let s = self.bn_out.forward(&s, train)?;
        Ok(self.relu_out.forward(&s, train))
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let gs = self.bn_out.backward(&self.relu_out.backward(gy));
        let mut gx = self.conv_b.backward(&gs);
        let ga = self.bn_a.backward(&self.relu_a.backward(&self.conv_pointwise.backward(&gs)));
        gx += &self.conv_a.backward(&ga);
        gx
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv_a.cfg.macs(h, w) + self.conv_pointwise.cfg.macs(h, w) + self.conv_b.cfg.macs(h, w)
    }
}

impl Module for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv_a.visit(&join(prefix, "conv_a"), f);
        self.bn_a.visit(&join(prefix, "bn_a"), f);
        self.conv_pointwise.visit(&join(prefix, "conv_pointwise"), f);
        self.conv_b.visit(&join(prefix, "conv_b"), f);
        self.bn_out.visit(&join(prefix, "bn_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv_a.visit_mut(&join(prefix, "conv_a"), f);
        self.bn_a.visit_mut(&join(prefix, "bn_a"), f);
        self.conv_pointwise.visit_mut(&join(prefix, "conv_pointwise"), f);
        self.conv_b.visit_mut(&join(prefix, "conv_b"), f);
        self.bn_out.visit_mut(&join(prefix, "bn_out"), f);
    }
}

/// Parallel convolutional structure: the two temporal features are
/// concatenated, passed through four dilated 3x3 group convolutions in
/// parallel, and the concatenated branch outputs are fused back to the
/// per-branch width by a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct Pcs {
    pub channels: usize,
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl Pcs {
    pub fn new<R: Rng + ?Sized>(channels: usize, dilations: &[usize], groups: usize, rng: &mut R) -> Self {
        let joint = 2 * channels;
        let branches = dilations
            .iter()
            .map(|&d| {
                let cfg = Conv2dConfig::new(joint, joint, 3).with_dilation(d).same().with_groups(groups);
                Conv2d::new(cfg, rng)
            })
            .collect::<Vec<_>>();
        let fuse = Conv2d::new(Conv2dConfig::new(joint * dilations.len(), channels, 1), rng);
        Self { channels, branches, fuse }
    }

    /// Returns the fused map together with the intermediate stacked branch outputs.
    pub fn forward_with_stack(&mut self, f1: &Tensor, f2: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        if f1.dim() != f2.dim() {
            return Err(shape_err(format!("temporal features differ: {:?} vs {:?}", f1.dim(), f2.dim())));
        }
        let joint = concat_channels(&[f1, f2])?;
        let outs = self
            .branches
            .iter_mut()
            .map(|b| b.forward(&joint, train))
            .collect::<Result<Vec<_>>>()?;
        let stacked = concat_channels(&outs.iter().collect::<Vec<_>>())?;
        let fused = self.fuse.forward(&stacked, train)?;
        Ok((fused, stacked))
    }

    pub fn forward(&mut self, f1: &Tensor, f2: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_with_stack(f1, f2, train)?.0)
    }

    pub fn backward(&mut self, gy: &Tensor) -> (Tensor, Tensor) {
        let gs = self.fuse.backward(gy);
        let joint = 2 * self.channels;
        let parts = split_channels(&gs, &vec![joint; self.branches.len()]);
        let mut gjoint: Option<Tensor> = None;
        for (branch, g) in self.branches.iter_mut().zip(&parts) {
            let gb = branch.backward(g);
            match &mut gjoint {
                Some(acc) => *acc += &gb,
                None => gjoint = Some(gb),
            }
        }
        let halves = split_channels(&gjoint.expect("at least one branch"), &[self.channels, self.channels]);
        let mut it = halves.into_iter();
        (it.next().unwrap(), it.next().unwrap())
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.branches.iter().map(|b| b.cfg.macs(h, w)).sum::<u64>() + self.fuse.cfg.macs(h, w)
    }
}

impl Module for Pcs {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("dilated{i}")), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("dilated{i}")), f);
        }
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

/// `conv1x1(core(conv3x3(x)))` where the core is channel, column or row
/// self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub conv_in: Conv2d,
    pub core: AttentionCore,
    pub conv_out: Conv2d,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, axis: AttentionAxis, rng: &mut R) -> Self {
        Self {
            conv_in: Conv2d::new(Conv2dConfig::new(channels, channels, 3).same(), rng),
            core: AttentionCore::new(axis),
            conv_out: Conv2d::new(Conv2dConfig::new(channels, channels, 1), rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let i = self.conv_in.forward(x, train)?;
        let a = self.core.forward(&i, train);
        self.conv_out.forward(&a, train)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let ga = self.conv_out.backward(gy);
        let gi = self.core.backward(&ga);
        self.conv_in.backward(&gi)
    }

    pub fn macs(&self, c: usize, h: usize, w: usize) -> u64 {
        self.conv_in.cfg.macs(h, w) + AttentionCore::macs(self.core.axis, c, h, w) + self.conv_out.cfg.macs(h, w)
    }
}

impl Module for AttentionBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv_in.visit_mut(&join(prefix, "conv_in"), f);
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}

/// One hierarchical attention module: PCS fusion followed by channel
/// attention and column-then-row attention in parallel, summed.
#[derive(Debug, Clone)]
pub struct HanModule {
    pub pcs: Pcs,
    pub cam: AttentionBlock,
    pub column: AttentionBlock,
    pub row: AttentionBlock,
}

/// Intermediate maps of one HAN forward pass.
#[derive(Debug, Clone)]
pub struct HanOutputs {
    pub fused: Tensor,
    pub channel: Tensor,
    pub column: Tensor,
    pub axial: Tensor,
    pub output: Tensor,
}

impl HanModule {
    pub fn new<R: Rng + ?Sized>(channels: usize, dilations: &[usize], groups: usize, rng: &mut R) -> Self {
        Self {
            pcs: Pcs::new(channels, dilations, groups, rng),
            cam: AttentionBlock::new(channels, AttentionAxis::Channel, rng),
            column: AttentionBlock::new(channels, AttentionAxis::Column, rng),
            row: AttentionBlock::new(channels, AttentionAxis::Row, rng),
        }
    }

    pub fn forward_detailed(&mut self, f1: &Tensor, f2: &Tensor, train: bool) -> Result<HanOutputs> {
        let fused = self.pcs.forward(f1, f2, train)?;
        let channel = self.cam.forward(&fused, train)?;
        let column = self.column.forward(&fused, train)?;
        let axial = self.row.forward(&column, train)?;
        let output = &channel + &axial;
        Ok(HanOutputs { fused, channel, column, axial, output })
    }

    pub fn forward(&mut self, f1: &Tensor, f2: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_detailed(f1, f2, train)?.output)
    }

    pub fn backward(&mut self, gy: &Tensor) -> (Tensor, Tensor) {
        let mut gfused = self.cam.backward(gy);
        let gcol = self.row.backward(gy);
        gfused += &self.column.backward(&gcol);
        self.pcs.backward(&gfused)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.pcs.channels;
        self.pcs.macs(h, w) + self.cam.macs(c, h, w) + self.column.macs(c, h, w) + self.row.macs(c, h, w)
    }
}

impl Module for HanModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.pcs.visit(&join(prefix, "pcs"), f);
        self.cam.visit(&join(prefix, "cam"), f);
        self.column.visit(&join(prefix, "column"), f);
        self.row.visit(&join(prefix, "row"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.pcs.visit_mut(&join(prefix, "pcs"), f);
        self.cam.visit_mut(&join(prefix, "cam"), f);
        self.column.visit_mut(&join(prefix, "column"), f);
        self.row.visit_mut(&join(prefix, "row"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pcs_shape_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pcs = Pcs::new(32, &[1, 2, 3, 4], 2, &mut rng);
        let f = Tensor::zeros((1, 32, 64, 64));
        let (out, stacked) = pcs.forward_with_stack(&f, &f, false).unwrap();
        assert_eq!(pcs.branches[0].cfg.in_channels, 64);
        assert_eq!(pcs.branches[0].cfg.groups, 2);
        assert_eq!(stacked.dim(), (1, 256, 64, 64));
        assert_eq!(out.dim(), (1, 32, 64, 64));
    }

    #[test]
    fn pcs_rejects_mismatched_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pcs = Pcs::new(2, &[1, 2, 3, 4], 2, &mut rng);
        let a = Tensor::zeros((1, 2, 8, 8));
        let b = Tensor::zeros((1, 2, 8, 4));
        assert!(pcs.forward(&a, &b, false).is_err());
    }

    #[test]
    fn han_output_is_sum_of_channel_and_axial_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut han = HanModule::new(4, &[1, 2, 3, 4], 2, &mut rng);
        let f1 = Tensor::from_shape_fn((1, 4, 8, 8), |(_, c, i, j)| ((c + i * j) % 5) as f64 * 0.2);
        let f2 = f1.mapv(|v| 0.5 - v);
        let out = han.forward_detailed(&f1, &f2, false).unwrap();
        assert_eq!(out.output.dim(), out.fused.dim());
        for ((o, a), b) in out.output.iter().zip(out.channel.iter()).zip(out.axial.iter()) {
            assert_eq!(*o, a + b);
        }
    }

    #[test]
    fn conv_block_with_identity_weights_passes_nonnegative_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = ConvBlock::new(2, 2, 0.1, 0.0, &mut rng);
        for conv in [&mut block.conv_a, &mut block.conv_b] {
            conv.weight.value.fill(0.0);
            assert!(conv.bias.is_none());
        }
        // centre tap of conv_b is the identity; conv_a and the 1x1 path are zero
        block.conv_b.weight.value[[0, 0, 1, 1]] = 1.0;
        block.conv_b.weight.value[[1, 1, 1, 1]] = 1.0;
        block.conv_pointwise.weight.value.fill(0.0);
        let x = Tensor::from_shape_fn((1, 2, 5, 5), |(_, c, i, j)| (c * 25 + i * 5 + j) as f64 / 10.0);
        let y = block.forward(&x, false).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
