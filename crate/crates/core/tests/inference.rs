mod common;

use common::*;
use ehdl_core::accel_sim::{Device, DeviceConfig, Movement, OpKind};
use ehdl_core::fxp::Q15;
use ehdl_core::inference::{
    conv_layer, encode_raw, maxpool, parse_input, plan, reference_forward, relu, run_inference, InferenceError, InputFormat,
};
use ehdl_core::model::{ConvLayer, Layer, Model, Shape3};
use proptest::prelude::*;
use rand::Rng;

fn conv_oracle(c: &ConvLayer, s: Shape3, x: &[Q15]) -> Vec<f64> {
    let (oh, ow) = (s.h - c.kh + 1, s.w - c.kw + 1);
    let mut y = vec![0.0; c.out_channels * oh * ow];
    for f in 0..c.out_channels {
        let Some(slot) = c.retained_slot(f) else { continue };
        let w = &c.weights[slot * c.kernel_len()..(slot + 1) * c.kernel_len()];
        for r in 0..oh {
            for col in 0..ow {
                let mut acc = c.bias.as_ref().map_or(0.0, |b| b[slot].to_f64());
                for ci in 0..c.in_channels {
                    for dr in 0..c.kh {
                        for dc in 0..c.kw {
                            let wv = w[(ci * c.kh + dr) * c.kw + dc].to_f64();
                            acc += wv * x[(ci * s.h + r + dr) * s.w + col + dc].to_f64();
                        }
                    }
                }
                y[(f * oh + r) * ow + col] = acc;
            }
        }
    }
    y
}

fn dev() -> Device {
    Device::new(&DeviceConfig::default())
}

#[test]
fn conv_6x1x5x5_on_16x16_matches_direct_convolution() {
    let mut r = rng(20);
    for _ in 0..5 {
        let c = conv(&mut r, 6, 1, 5, (0..6).collect(), 0.15);
        let s = Shape3::new(1, 16, 16);
        let x = q15s(&mut r, 256, 0.9);
        let y = conv_layer(&mut dev(), &c, s, &x).unwrap();
        let o = conv_oracle(&c, s, &x);
        assert_eq!(y.len(), 6 * 12 * 12);
        for (a, b) in y.iter().zip(&o) {
            assert!((a.to_f64() - Q15::from_f64(*b).to_f64()).abs() <= 2f64.powi(-8));
        }
    }
}

#[test]
fn one_mac_per_output_per_retained_filter() {
    let mut r = rng(21);
    let mut d = dev();
    let c = conv(&mut r, 1, 1, 3, vec![0], 0.2);
    conv_layer(&mut d, &c, Shape3::new(1, 3, 3), &q15s(&mut r, 9, 0.5)).unwrap();
    assert_eq!(d.ledger.ops(OpKind::Mac), 1);

    let full = conv(&mut r, 16, 6, 5, (0..16).collect(), 0.1);
    let half = conv(&mut r, 16, 6, 5, (0..16).step_by(2).collect(), 0.1);
    let s = Shape3::new(6, 12, 12);
    let x = q15s(&mut r, s.len(), 0.5);
    let (mut df, mut dh) = (dev(), dev());
    conv_layer(&mut df, &full, s, &x).unwrap();
    let yh = conv_layer(&mut dh, &half, s, &x).unwrap();
    assert_eq!(df.ledger.ops(OpKind::Mac), 16 * 64);
    assert_eq!(dh.ledger.ops(OpKind::Mac) * 2, df.ledger.ops(OpKind::Mac));
    for f in (1..16).step_by(2) {
        assert!(yh[f * 64..(f + 1) * 64].iter().all(|q| *q == Q15::ZERO));
    }
}

#[test]
fn identity_kernel_crops() {
    let mut r = rng(22);
    let mut w = vec![Q15::ZERO; 9];
    w[4] = Q15::MAX;
    let c = ConvLayer { out_channels: 1, in_channels: 1, kh: 3, kw: 3, retained: vec![0], weights: w, bias: None, weight_exp: 0 };
    let x = q15s(&mut r, 49, 0.9);
    let y = conv_layer(&mut dev(), &c, Shape3::new(1, 7, 7), &x).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert!((y[i * 5 + j].0 as i32 - x[(i + 1) * 7 + j + 1].0 as i32).abs() <= 1);
        }
    }
}

#[test]
fn pool_and_relu_are_exact() {
    let mut r = rng(23);
    assert_eq!(relu(&mut dev(), Shape3::new(2, 1, 1), &[Q15(-5), Q15(5)]).unwrap(), vec![Q15(0), Q15(5)]);
    let plane = vec![Q15(1234); 4 * 6 * 8];
    assert_eq!(maxpool(&mut dev(), Shape3::new(4, 6, 8), &plane).unwrap(), vec![Q15(1234); 4 * 3 * 4]);

    for _ in 0..20 {
        let s = Shape3::new(3, 8, 6);
        let x: Vec<Q15> = (0..s.len()).map(|_| Q15(r.random())).collect();
        let pooled = maxpool(&mut dev(), s, &x).unwrap();
        let got = relu(&mut dev(), Shape3::new(3, 4, 3), &pooled).unwrap();
        let mut want = Vec::new();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..3 {
                    let at = |a: usize, b: usize| x[(c * 8 + 2 * i + a) * 6 + 2 * j + b].0;
                    want.push(Q15(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)).max(0)));
                }
            }
        }
        assert_eq!(got, want);
    }
}

#[test]
fn cpu_layers_use_no_accelerator() {
    let mut d = dev();
    relu(&mut d, Shape3::new(1, 4, 4), &[Q15(3); 16]).unwrap();
    maxpool(&mut d, Shape3::new(1, 4, 4), &[Q15(3); 16]).unwrap();
    for k in [OpKind::Fft, OpKind::Ifft, OpKind::Mac, OpKind::Mpy] {
        assert_eq!(d.ledger.ops(k), 0);
    }
}

#[test]
fn odd_dimensions_and_bad_inputs() {
    let m = Model { input: Shape3::new(1, 5, 4), layers: vec![Layer::MaxPool] };
    assert!(matches!(plan(&m, &DeviceConfig::default()), Err(InferenceError::OddDimension { .. })));
    let m = tiny_model(&mut rng(24), false);
    assert!(matches!(run_inference(&m, &[Q15::ZERO; 3], &DeviceConfig::default()), Err(InferenceError::InputLength { .. })));
}

#[test]
fn kernel_too_large_for_window() {
    let mut r = rng(25);
    let m = Model { input: Shape3::new(16, 12, 12), layers: vec![Layer::Conv(conv(&mut r, 2, 16, 9, vec![0, 1], 0.01))] };
    let cfg = DeviceConfig { lea_bytes: 2048, ..DeviceConfig::default() };
    assert!(matches!(plan(&m, &cfg), Err(InferenceError::KernelTooLargeForAccelBuffer { .. })));
}

#[test]
fn buffer_pair_high_water_is_twice_the_largest_activation() {
    let cfg = DeviceConfig::default();
    for m in [mnist_model(&mut rng(26)), har_model(&mut rng(27)), okg_model(&mut rng(28)), tiny_model(&mut rng(29), false)] {
        let p = plan(&m, &cfg).unwrap();
        let max_l = m.activation_lens().unwrap().into_iter().max().unwrap();
        assert_eq!(p.activation_high_water, 2 * max_l * 2);
        assert_eq!(p.buffers.elems, max_l);
        assert_eq!(p.buffers.output_of(0), p.buffers.input_of(1));
        assert_ne!(p.buffers.input_of(1), p.buffers.input_of(2));
    }
}

#[test]
fn runs_are_deterministic() {
    let m = mnist_model(&mut rng(30));
    let x = input_for(&mut rng(31), &m);
    let a = run_inference(&m, &x, &DeviceConfig::default()).unwrap();
    let b = run_inference(&m, &x, &DeviceConfig::default()).unwrap();
    assert_eq!(a.output, b.output);
    assert_eq!(a.device.ledger, b.device.ledger);
    assert_eq!(a.device.ledger.total(), a.device.ledger.components_sum());
}

#[test]
fn zero_image_golden_output() {
    let m = mnist_model(&mut rng(32));
    let run = run_inference(&m, &vec![Q15::ZERO; 784], &DeviceConfig::default()).unwrap();
    let raw: Vec<i16> = run.output.iter().map(|q| q.0).collect();
    assert_eq!(raw, GOLDEN_ZERO);
    let want = reference_forward(&m, &[0.0; 784]).unwrap();
    for (a, b) in run.output.iter().zip(&want) {
        assert!((a.to_f64() - b).abs() <= 2f64.powi(-7));
    }
}

const GOLDEN_ZERO: [i16; 10] = [1278, 972, -1584, 283, 434, -1458, 1312, -1758, -1597, -1424];

#[test]
fn engine_tracks_float_reference() {
    let cfg = DeviceConfig::default();
    for (seed, freq) in [(33, false), (34, true)] {
        let mut r = rng(seed);
        let m = tiny_model(&mut r, freq);
        for _ in 0..5 {
            let x = input_for(&mut r, &m);
            let run = run_inference(&m, &x, &cfg).unwrap();
            let xf: Vec<f64> = x.iter().map(|q| q.to_f64()).collect();
            let want = reference_forward(&m, &xf).unwrap();
            for (a, b) in run.output.iter().zip(&want) {
                assert!((a.to_f64() - b).abs() <= 2f64.powi(-6), "{} vs {b}", a.to_f64());
            }
        }
    }
}

#[test]
fn text_and_raw_inputs() {
    let x = vec![Q15(100), Q15(-32768), Q15(32767)];
    assert_eq!(parse_input(&encode_raw(&x), InputFormat::RawQ15).unwrap(), x);
    let t = parse_input(b"0.5\n-1\n\n0.25\n", InputFormat::Text).unwrap();
    assert_eq!(t, vec![Q15(16384), Q15(-32768), Q15(8192)]);
    assert!(parse_input(b"abc\n", InputFormat::Text).is_err());
    assert!(parse_input(&[1, 2, 3], InputFormat::RawQ15).is_err());
}

#[test]
fn movement_threshold() {
    let d = dev();
    let t = d.cost.dma_threshold();
    assert_eq!(d.movement_policy(1), Movement::Cpu);
    assert_eq!(d.movement_policy(256), Movement::Dma);
    assert_eq!(d.movement_policy(t - 1), Movement::Cpu);
    assert_eq!(d.movement_policy(t), Movement::Dma);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn relu_matches_max_zero(v in prop::collection::vec(any::<i16>(), 1..64)) {
        let x: Vec<Q15> = v.iter().map(|&a| Q15(a)).collect();
        let y = relu(&mut dev(), Shape3::new(x.len(), 1, 1), &x).unwrap();
        prop_assert_eq!(y, v.iter().map(|&a| Q15(a.max(0))).collect::<Vec<_>>());
    }
}
