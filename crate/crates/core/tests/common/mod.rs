#![allow(dead_code)]

use ehdl_core::bcm_kernel::to_frequency_domain;
use ehdl_core::fxp::Q15;
use ehdl_core::model::{BcmLayer, BcmWeights, ConvLayer, DenseLayer, Layer, Model, Shape3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn q15s(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<Q15> {
    (0..n).map(|_| Q15::from_f64(rng.random_range(-amp..amp))).collect()
}

pub fn conv(rng: &mut ChaCha8Rng, f: usize, c: usize, k: usize, retained: Vec<u16>, amp: f64) -> ConvLayer {
    let n = retained.len() * c * k * k;
    let bias = Some(q15s(rng, retained.len(), 0.05));
    ConvLayer { out_channels: f, in_channels: c, kh: k, kw: k, retained, weights: q15s(rng, n, amp), bias, weight_exp: 0 }
}

pub fn bcm(rng: &mut ChaCha8Rng, rows: usize, cols: usize, k: usize, amp: f64, freq: bool) -> BcmLayer {
    let n = rows * cols / k;
    let l = BcmLayer { rows, cols, k, weights: BcmWeights::Time(q15s(rng, n, amp)), bias: Some(q15s(rng, rows, 0.05)), weight_exp: 0 };
    if freq {
        to_frequency_domain(&l)
    } else {
        l
    }
}

pub fn dense(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f64) -> DenseLayer {
    DenseLayer { rows, cols, weights: q15s(rng, rows * cols, amp), bias: Some(q15s(rng, rows, 0.05)), weight_exp: 0 }
}

/// 1x10x10 -> conv(4, 3 kept) -> relu -> pool -> bcm 64->32 (k=16) -> relu -> dense 32->5.
pub fn tiny_model(rng: &mut ChaCha8Rng, freq: bool) -> Model {
    Model {
        input: Shape3::new(1, 10, 10),
        layers: vec![
            Layer::Conv(conv(rng, 4, 1, 3, vec![0, 2, 3], 0.3)),
            Layer::Relu,
            Layer::MaxPool,
            Layer::Bcm(bcm(rng, 32, 64, 16, 0.2, freq)),
            Layer::Relu,
            Layer::Dense(dense(rng, 5, 32, 0.3)),
        ],
    }
}

/// Dense-only chain with two BCM layers of different block sizes.
pub fn fc_model(rng: &mut ChaCha8Rng, freq: bool) -> Model {
    Model {
        input: Shape3::new(64, 1, 1),
        layers: vec![
            Layer::Bcm(bcm(rng, 64, 64, 32, 0.15, freq)),
            Layer::Relu,
            Layer::Bcm(bcm(rng, 32, 64, 8, 0.2, false)),
            Layer::Dense(dense(rng, 4, 32, 0.3)),
        ],
    }
}

pub fn input_for(rng: &mut ChaCha8Rng, model: &Model) -> Vec<Q15> {
    (0..model.input.len()).map(|_| Q15::from_f64(rng.random_range(0.0..0.9))).collect()
}

/// MNIST-shaped chain: conv 6, pool, relu, conv 16 with 8 kept, pool, relu, bcm 256 (k=128), relu, dense 10.
pub fn mnist_model(rng: &mut ChaCha8Rng) -> Model {
    Model {
        input: Shape3::new(1, 28, 28),
        layers: vec![
            Layer::Conv(conv(rng, 6, 1, 5, (0..6).collect(), 0.2)),
            Layer::MaxPool,
            Layer::Relu,
            Layer::Conv(conv(rng, 16, 6, 5, (0..16).step_by(2).collect(), 0.1)),
            Layer::MaxPool,
            Layer::Relu,
            Layer::Bcm(bcm(rng, 256, 256, 128, 0.05, false)),
            Layer::Relu,
            Layer::Dense(dense(rng, 10, 256, 0.1)),
        ],
    }
}

pub fn har_model(rng: &mut ChaCha8Rng) -> Model {
    Model {
        input: Shape3::new(1, 1, 121),
        layers: vec![
            Layer::Conv(conv_rect(rng, 32, 1, 1, 12)),
            Layer::Relu,
            Layer::Bcm(bcm(rng, 128, 3520, 64, 0.02, false)),
            Layer::Relu,
            Layer::Bcm(bcm(rng, 64, 128, 64, 0.1, false)),
            Layer::Relu,
            Layer::Dense(dense(rng, 6, 64, 0.2)),
        ],
    }
}

pub fn okg_model(rng: &mut ChaCha8Rng) -> Model {
    Model {
        input: Shape3::new(1, 28, 28),
        layers: vec![
            Layer::Conv(conv(rng, 6, 1, 5, (0..6).collect(), 0.2)),
            Layer::Relu,
            Layer::Bcm(bcm(rng, 512, 3456, 128, 0.02, false)),
            Layer::Bcm(bcm(rng, 256, 512, 128, 0.05, false)),
            Layer::Bcm(bcm(rng, 128, 256, 64, 0.05, false)),
            Layer::Dense(dense(rng, 12, 128, 0.1)),
        ],
    }
}

pub fn conv_rect(rng: &mut ChaCha8Rng, f: usize, c: usize, kh: usize, kw: usize) -> ConvLayer {
    let bias = Some(q15s(rng, f, 0.05));
    ConvLayer { out_channels: f, in_channels: c, kh, kw, retained: (0..f as u16).collect(), weights: q15s(rng, f * c * kh * kw, 0.2), bias, weight_exp: 0 }
}
