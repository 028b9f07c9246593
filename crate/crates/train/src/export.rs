//! Q15 export with calibration.
//!
//! CONV activations are tracked with a static scale: deployed value =
//! float value / scale, so a layer folds to `W * s_in / s_out`, `b / s_out`.
//! FC layers drop the cosine denominators. Per row, the float output is the
//! deployed output times a positive per-sample factor; bias-free FC chains
//! with ReLU keep that factor, so the predicted class is preserved. Each FC
//! gets one constant `c` chosen so calibrated outputs stay below `FC_TARGET`.

use crate::data::Dataset;
use crate::net::{FLayer, FcF, Network};
use crate::TrainError;
use ehdl_core::bcm_kernel::to_frequency_domain;
use ehdl_core::fxp::Q15;
use ehdl_core::inference::reference_forward;
use ehdl_core::model::{BcmLayer, BcmWeights, ConvLayer, DenseLayer, Layer, Model, Shape3};
use serde::Serialize;

/// Headroom on calibrated CONV outputs.
const CONV_HEADROOM: f64 = 1.25;
/// Largest calibrated |FC output| after folding.
const FC_TARGET: f64 = 0.75;
/// Keeps folded weights strictly inside the Q15 range.
const WEIGHT_MARGIN: f64 = 1.0001;
/// Stored weights are kept below this after the `2^weight_exp` gain.
const STORE_LIMIT: f64 = 0.999;
const MAX_WEIGHT_EXP: u8 = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct ExportOptions {
    /// Re-project FC layers whose dimensions divide by this block size.
    pub block_size: Option<usize>,
    pub freq_domain: bool,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions { block_size: None, freq_domain: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCalibration {
    pub layer: usize,
    pub kind: &'static str,
    /// Max |deployed output| over the calibration set.
    pub max_abs: f64,
    /// Float-to-deployed divisor (CONV) or folding constant (FC).
    pub scale: Option<f64>,
    pub weight_exp: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub samples: usize,
    pub input_max_abs: f64,
    pub layers: Vec<LayerCalibration>,
}

impl CalibrationReport {
    pub fn max_abs(&self) -> f64 {
        self.layers.iter().map(|l| l.max_abs).fold(self.input_max_abs, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct Export {
    pub model: Model,
    pub report: CalibrationReport,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest `e` with `max|w| * 2^e` still storable.
pub fn weight_exp_for(w: &[f64]) -> u8 {
    let m = max_abs(w);
    let mut e = 0;
    while e < MAX_WEIGHT_EXP && m * 2f64.powi(e as i32 + 1) < STORE_LIMIT {
        e += 1;
    }
    e
}

fn quantize_all(w: &[f64], exp: u8) -> Vec<Q15> {
    let g = 2f64.powi(exp as i32);
    w.iter().map(|v| Q15::from_f64(v * g)).collect()
}

fn violation(layer: usize, what: &str, value: f64) -> TrainError {
    TrainError::RangeViolation { layer, what: what.to_string(), value }
}

/// CONV parameters must sit in `[-1, 1)`. FC weights only need to be finite:
/// relative to their row norm they are bounded by 1.
fn check_params(net: &Network) -> Result<(), TrainError> {
    for (l, layer) in net.layers.iter().enumerate() {
        let bad = match layer {
            FLayer::Conv(c) => c.w.iter().chain(&c.b).find(|v| !(-1.0..1.0).contains(*v)),
            FLayer::Fc(f) => f.w.iter().find(|v| !v.is_finite()),
            _ => None,
        };
        if let Some(&v) = bad {
            return Err(violation(l, "parameter", v));
        }
    }
    Ok(())
}

impl Network {
    /// Copy with every FC layer whose rows and cols divide by `k` re-projected
    /// onto `k`-block-circulant structure by averaging along each block's
    /// circulant diagonals. `k = 1` expands every layer to dense.
    pub fn with_block_size(&self, k: usize) -> Network {
        let mut net = self.clone();
        for l in &mut net.layers {
            if let FLayer::Fc(f) = l {
                if k > 0 && f.rows % k == 0 && f.cols % k == 0 && f.k != k {
                    *f = reproject(f, k);
                }
            }
        }
        net
    }
}

fn reproject(f: &FcF, k: usize) -> FcF {
    let d = f.dense();
    let (p, q) = (f.rows / k, f.cols / k);
    let mut w = vec![0.0; p * q * k];
    for i in 0..p {
        for j in 0..q {
            for t in 0..k {
                let s: f64 = (0..k).map(|r| d[(i * k + r) * f.cols + j * k + (r + k - t) % k]).sum();
                w[(i * q + j) * k + t] = s / k as f64;
            }
        }
    }
    FcF { rows: f.rows, cols: f.cols, k, w, gamma: f.gamma }
}

/// Folds, quantizes and calibrates `net` on the first samples of `calib`.
pub fn export_quantized(net: &Network, calib: &Dataset, opts: &ExportOptions) -> Result<Export, TrainError> {
    let net = match opts.block_size {
        Some(k) => net.with_block_size(k),
        None => net.clone(),
    };
    check_params(&net)?;
    let shapes = net.shapes();
    let n = calib.len();
    let mut float_acts: Vec<Vec<f64>> = (0..n).map(|i| calib.sample(i).to_vec()).collect();
    let mut dep_acts = float_acts.clone();
    let input_max_abs = dep_acts.iter().map(|a| max_abs(a)).fold(0.0, f64::max);
    if input_max_abs >= 1.0 {
        return Err(violation(0, "input", input_max_abs));
    }
    let mut scale = 1.0;
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut report = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let ins: Shape3 = shapes[l];
        let mut next_float = Vec::with_capacity(n);
        let (q_layer, kind, layer_scale, exp) = match layer {
            FLayer::Conv(c) => {
                let mut peak: f64 = 0.0;
                for a in &float_acts {
                    let y = crate::net::conv_forward(c, ins, a);
                    peak = peak.max(max_abs(&y));
                    next_float.push(y);
                }
                let s_out = 1f64
                    .max(CONV_HEADROOM * peak)
                    .max(scale * max_abs(&c.w) * WEIGHT_MARGIN)
                    .max(max_abs(&c.b) * WEIGHT_MARGIN);
                let kept: Vec<usize> = (0..c.out).filter(|&f| c.is_kept(f)).collect();
                let kl = c.kernel_len();
                let w: Vec<f64> =
                    kept.iter().flat_map(|&f| c.w[f * kl..(f + 1) * kl].iter().map(|v| v * scale / s_out)).collect();
                let b: Vec<f64> = kept.iter().map(|&f| c.b[f] / s_out).collect();
                let e = weight_exp_for(&w);
                scale = s_out;
                let q = Layer::Conv(ConvLayer {
                    out_channels: c.out,
                    in_channels: c.inp,
                    kh: c.kh,
                    kw: c.kw,
                    retained: kept.iter().map(|&f| f as u16).collect(),
                    weights: quantize_all(&w, e),
                    bias: Some(b.iter().map(|&v| Q15::from_f64(v)).collect()),
                    weight_exp: e,
                });
                (q, "conv", Some(s_out), Some(e))
            }
            FLayer::Fc(f) => {
                let norms: Vec<f64> = (0..f.p()).map(|i| f.row_norm(i).max(f64::MIN_POSITIVE)).collect();
                let mut peak: f64 = 0.0;
                for a in &dep_acts {
                    let u = f.matvec(a);
                    peak = u.iter().enumerate().fold(peak, |m, (r, v)| m.max(v.abs() / norms[r / f.k]));
                }
                let wn: Vec<f64> = f.w.iter().enumerate().map(|(i, v)| v / norms[i / (f.q() * f.k)]).collect();
                let c = (peak / FC_TARGET).max(max_abs(&wn) * WEIGHT_MARGIN).max(f64::MIN_POSITIVE);
                let w: Vec<f64> = wn.iter().map(|v| v / c).collect();
                let e = weight_exp_for(&w);
                let weights = quantize_all(&w, e);
                let q = if f.k == 1 {
                    Layer::Dense(DenseLayer { rows: f.rows, cols: f.cols, weights, bias: None, weight_exp: e })
                } else {
                    let b = BcmLayer { rows: f.rows, cols: f.cols, k: f.k, weights: BcmWeights::Time(weights), bias: None, weight_exp: e };
                    Layer::Bcm(if opts.freq_domain { to_frequency_domain(&b) } else { b })
                };
                (q, if f.k == 1 { "fc_dense" } else { "fc_bcm" }, Some(c), Some(e))
            }
            FLayer::MaxPool => (Layer::MaxPool, "maxpool", None, None),
            FLayer::Relu => (Layer::Relu, "relu", None, None),
        };
        if !matches!(layer, FLayer::Conv(_)) {
            next_float = float_acts.iter().map(|a| float_step(&net, l, a)).collect();
        }
        let single = Model { input: ins, layers: vec![q_layer] };
        let mut peak: f64 = 0.0;
        for a in &mut dep_acts {
            *a = reference_forward(&single, a)?;
            peak = peak.max(max_abs(a));
        }
        if peak >= 1.0 {
            return Err(violation(l, "calibrated intermediate", peak));
        }
        report.push(LayerCalibration { layer: l, kind, max_abs: peak, scale: layer_scale, weight_exp: exp });
        layers.push(single.layers.into_iter().next().expect("one layer"));
        float_acts = next_float;
    }
    let model = Model { input: net.input_shape(), layers };
    model.validate()?;
    Ok(Export { model, report: CalibrationReport { samples: n, input_max_abs, layers: report } })
}

fn float_step(net: &Network, l: usize, a: &[f64]) -> Vec<f64> {
    let single = Network { arch: None, input: { let s = net.shapes()[l]; [s.c, s.h, s.w] }, classes: net.classes, layers: vec![net.layers[l].clone()] };
    single.forward(a)
}
