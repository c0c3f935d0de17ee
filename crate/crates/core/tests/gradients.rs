mod common;

use common::{check_module, numeric_grad, random_tensor, rel_err, rng};
use hanet::losses::{self, LossConfig};
use hanet::model::{AttentionBlock, ConvBlock, HaNet, HaNetConfig, HanModule, Pcs};
use hanet::nn::{AdaptiveAvgPool2d, AttentionAxis, AttentionCore, BatchNorm2d, BilinearUpsample, Conv2d, Conv2dConfig, Tensor};
use ndarray::Array3;
use rand::Rng;

const TOL: f64 = 1e-3;
const LOSS_TOL: f64 = 1e-4;
const ENTRIES: usize = 40;

fn assert_ok(what: &str, check: common::GradCheck) {
    assert!(check.worst < TOL, "{what}: relative error {:.3e} on {}", check.worst, check.worst_on);
    assert!(check.tensors > 0);
}

#[test]
fn conv_grouped_dilated() {
    let mut r = rng(1);
    let conv = Conv2d::new(Conv2dConfig::new(4, 6, 3).with_dilation(2).same().with_groups(2), &mut r);
    let x = random_tensor((2, 4, 7, 6), &mut r);
    let c = check_module(&conv, &[x], |m, xs| m.forward(&xs[0], true).unwrap(), |m, g| vec![m.backward(g)], ENTRIES, 11);
    assert_ok("conv", c);
}

#[test]
fn batch_norm_training_mode() {
    let mut r = rng(2);
    let bn = BatchNorm2d::new(3, 0.1, 1e-5);
    let x = random_tensor((3, 3, 4, 5), &mut r);
    let c = check_module(&bn, &[x], |m, xs| m.forward(&xs[0], true).unwrap(), |m, g| vec![m.backward(g)], ENTRIES, 12);
    assert_ok("bn", c);
}

#[test]
fn pooling_and_upsampling() {
    let mut r = rng(3);
    let x = random_tensor((1, 2, 7, 7), &mut r);
    let pool = AdaptiveAvgPool2d::new(3);
    let c = check_module(&pool, &[x.clone()], |m, xs| m.forward(&xs[0], true).unwrap(), |m, g| vec![m.backward(g)], 100, 13);
    assert_ok("pool", c);
    let up = BilinearUpsample::new(8);
    let small = random_tensor((1, 2, 3, 3), &mut r);
    let c = check_module(&up, &[small], |m, xs| m.forward(&xs[0], true), |m, g| vec![m.backward(g)], 100, 14);
    assert_ok("upsample", c);
}

#[test]
fn conv_block() {
    let mut r = rng(4);
    let block = ConvBlock::new(3, 4, 0.1, 1e-5, &mut r);
    let x = random_tensor((2, 3, 6, 6), &mut r);
    let c = check_module(&block, &[x], |m, xs| m.forward(&xs[0], true).unwrap(), |m, g| vec![m.backward(g)], ENTRIES, 15);
    assert_ok("conv_block", c);
}

#[test]
fn pcs() {
    let mut r = rng(5);
    let pcs = Pcs::new(4, &[1, 2, 3, 4], 2, &mut r);
    let f1 = random_tensor((1, 4, 8, 8), &mut r);
    let f2 = random_tensor((1, 4, 8, 8), &mut r);
    let c = check_module(
        &pcs,
        &[f1, f2],
        |m, xs| m.forward(&xs[0], &xs[1], true).unwrap(),
        |m, g| {
            let (a, b) = m.backward(g);
            vec![a, b]
        },
        ENTRIES,
        16,
    );
    assert_ok("pcs", c);
}

#[test]
fn attention_cores() {
    for (k, axis) in [AttentionAxis::Channel, AttentionAxis::Column, AttentionAxis::Row].into_iter().enumerate() {
        let mut r = rng(20 + k as u64);
        let core = AttentionCore::new(axis);
        // Small magnitudes keep the softmax away from saturation.
        let x = random_tensor((2, 3, 5, 4), &mut r) * 0.3;
        let c = check_module(&core, &[x], |m, xs| m.forward(&xs[0], true), |m, g| vec![m.backward(g)], 200, 30);
        assert_ok(&format!("{axis:?} core"), c);
    }
}

#[test]
fn attention_blocks() {
    for (k, axis) in [AttentionAxis::Channel, AttentionAxis::Column, AttentionAxis::Row].into_iter().enumerate() {
        let mut r = rng(40 + k as u64);
        let block = AttentionBlock::new(4, axis, &mut r);
        let x = random_tensor((1, 4, 6, 6), &mut r) * 0.5;
        let c = check_module(&block, &[x], |m, xs| m.forward(&xs[0], true).unwrap(), |m, g| vec![m.backward(g)], ENTRIES, 50);
        assert_ok(&format!("{axis:?} block"), c);
    }
}

#[test]
fn han_module() {
    let mut r = rng(6);
    let han = HanModule::new(4, &[1, 2, 3, 4], 2, &mut r);
    let f1 = random_tensor((1, 4, 6, 6), &mut r) * 0.5;
    let f2 = random_tensor((1, 4, 6, 6), &mut r) * 0.5;
    let c = check_module(
        &han,
        &[f1, f2],
        |m, xs| m.forward(&xs[0], &xs[1], true).unwrap(),
        |m, g| {
            let (a, b) = m.backward(g);
            vec![a, b]
        },
        20,
        17,
    );
    assert_ok("han", c);
}

#[test]
fn whole_network() {
    let cfg = HaNetConfig { pooled_sizes: [6, 4, 2], ..HaNetConfig::for_tile(8, [2, 4, 4, 4]) };
    let net = HaNet::new(cfg, 3).unwrap();
    let mut r = rng(7);
    let t1 = random_tensor((2, 3, 8, 8), &mut r);
    let t2 = random_tensor((2, 3, 8, 8), &mut r);
    let c = check_module(&net, &[t1, t2], |m, xs| m.forward(&xs[0], &xs[1], true).unwrap(), |m, g| {
        m.backward(g);
        Vec::new()
    }, 6, 18);
    assert_ok("hanet", c);
}

fn random_labels(n: usize, h: usize, w: usize, r: &mut impl Rng) -> Array3<u8> {
    Array3::from_shape_fn((n, h, w), |_| u8::from(r.gen_bool(0.3)))
}

fn check_loss(name: &str, f: impl Fn(&Tensor) -> losses::LossOutput, logits: &Tensor) {
    let analytic = f(logits).grad;
    let numeric = numeric_grad(logits, |z| f(z).value);
    let err = rel_err(analytic.as_slice().unwrap(), numeric.as_slice().unwrap());
    assert!(err < LOSS_TOL, "{name}: relative error {err:.3e}");
}

#[test]
fn loss_gradients() {
    let mut r = rng(8);
    let logits = random_tensor((2, 2, 4, 4), &mut r) * 2.0;
    let gt = random_labels(2, 4, 4, &mut r);
    let cfg = LossConfig { class_weights: [0.2, 0.8], ..LossConfig::default() };
    check_loss("weighted_ce", |z| losses::weighted_ce(z.view(), gt.view(), cfg.class_weights).unwrap(), &logits);
    check_loss("dice", |z| losses::dice_loss(z.view(), gt.view(), 1.0).unwrap(), &logits);
    check_loss("hybrid", |z| losses::hybrid_loss(z.view(), gt.view(), &cfg).unwrap(), &logits);
    for gamma in [0.0, 0.5, 2.0] {
        check_loss("focal", |z| losses::focal_loss(z.view(), gt.view(), gamma, 0.25).unwrap(), &logits);
    }
}
