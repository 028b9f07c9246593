use ehdl_train::net::{ConvF, FLayer, FcF, Grads, Network};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-amp..amp)).collect()
}

fn fc_net(rows: usize, cols: usize, k: usize, rng: &mut ChaCha8Rng) -> Network {
    let fc = FcF { rows, cols, k, w: rand_vec(rng, rows * cols / k, 1.0), gamma: 3.0 };
    Network { arch: None, input: [cols, 1, 1], classes: rows, layers: vec![FLayer::Fc(fc)] }
}

/// Linear probe loss `c . f(x)` and its analytic gradients.
fn probe(net: &Network, x: &[f64], c: &[f64]) -> (Grads, Vec<f64>) {
    let mut g = Grads::zeros_like(net);
    let trace = net.forward_trace(x);
    let gx = net.backward(&trace, c.to_vec(), &mut g);
    (g, gx)
}

fn loss(net: &Network, x: &[f64], c: &[f64]) -> f64 {
    net.forward(x).iter().zip(c).map(|(a, b)| a * b).sum()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale
}

fn numeric_param_grad(net: &Network, x: &[f64], c: &[f64], layer: usize, bias: bool) -> Vec<f64> {
    const H: f64 = 1e-6;
    let len = match &net.layers[layer] {
        FLayer::Conv(cv) if bias => cv.b.len(),
        FLayer::Conv(cv) => cv.w.len(),
        FLayer::Fc(f) => f.w.len(),
        _ => 0,
    };
    (0..len)
        .map(|i| {
            let mut plus = net.clone();
            let mut minus = net.clone();
            for (n, d) in [(&mut plus, H), (&mut minus, -H)] {
                match &mut n.layers[layer] {
                    FLayer::Conv(cv) if bias => cv.b[i] += d,
                    FLayer::Conv(cv) => cv.w[i] += d,
                    FLayer::Fc(f) => f.w[i] += d,
                    _ => {}
                }
            }
            (loss(&plus, x, c) - loss(&minus, x, c)) / (2.0 * H)
        })
        .collect()
}

fn numeric_input_grad(net: &Network, x: &[f64], c: &[f64]) -> Vec<f64> {
    const H: f64 = 1e-6;
    (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += H;
            m[i] -= H;
            (loss(net, &p, c) - loss(net, &m, c)) / (2.0 * H)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tied_bcm_gradients_match_finite_differences(seed in any::<u64>(), kexp in 1u32..4, p in 1usize..4, q in 1usize..4) {
        let k = 1 << kexp;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = fc_net(p * k, q * k, k, &mut rng);
        let x = rand_vec(&mut rng, q * k, 1.0);
        let c = rand_vec(&mut rng, p * k, 1.0);
        let (g, gx) = probe(&net, &x, &c);
        let e_w = rel_err(&g.w[0], &numeric_param_grad(&net, &x, &c, 0, false));
        let e_x = rel_err(&gx, &numeric_input_grad(&net, &x, &c));
        prop_assert!(e_w <= 1e-5, "weight gradient error {e_w}");
        prop_assert!(e_x <= 1e-5, "input gradient error {e_x}");
    }
}

#[test]
fn whole_network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let conv = ConvF { out: 3, inp: 2, kh: 3, kw: 3, w: rand_vec(&mut rng, 54, 0.5), b: rand_vec(&mut rng, 3, 0.2), retained: None };
    let net = Network {
        arch: None,
        input: [2, 6, 6],
        classes: 4,
        layers: vec![
            FLayer::Conv(conv),
            FLayer::MaxPool,
            FLayer::Relu,
            FLayer::Fc(FcF { rows: 8, cols: 12, k: 4, w: rand_vec(&mut rng, 24, 1.0), gamma: 1.0 }),
            FLayer::Relu,
            FLayer::Fc(FcF { rows: 4, cols: 8, k: 1, w: rand_vec(&mut rng, 32, 1.0), gamma: 10.0 }),
        ],
    };
    let x = rand_vec(&mut rng, 72, 1.0);
    let (_, c) = Network::loss_grad(&net.forward(&x), 2);
    let (g, gx) = probe(&net, &x, &c);
    for (layer, bias) in [(0, false), (0, true), (3, false), (5, false)] {
        let num = numeric_param_grad(&net, &x, &c, layer, bias);
        let ana = if bias { &g.b[layer] } else { &g.w[layer] };
        let e = rel_err(ana, &num);
        assert!(e <= 1e-5, "layer {layer} bias {bias}: {e}");
    }
    assert!(rel_err(&gx, &numeric_input_grad(&net, &x, &c)) <= 1e-5);
}

#[test]
fn pruned_filters_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conv = ConvF { out: 4, inp: 1, kh: 2, kw: 2, w: rand_vec(&mut rng, 16, 0.5), b: vec![0.1; 4], retained: Some(vec![1, 2]) };
    let mut net = Network {
        arch: None,
        input: [1, 3, 3],
        classes: 2,
        layers: vec![FLayer::Conv(conv), FLayer::Fc(FcF { rows: 2, cols: 16, k: 1, w: rand_vec(&mut rng, 32, 1.0), gamma: 1.0 })],
    };
    net.apply_masks();
    let (g, _) = probe(&net, &rand_vec(&mut rng, 9, 1.0), &[1.0, -1.0]);
    for f in [0, 3] {
        assert!(g.w[0][f * 4..f * 4 + 4].iter().all(|&v| v == 0.0));
        assert_eq!(g.b[0][f], 0.0);
    }
    assert!(g.w[0][4..12].iter().any(|&v| v != 0.0));
}
