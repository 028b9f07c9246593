//! Float network with manual backpropagation.
//!
//! FC layers are cosine-normalized: row `r` of block row `i` produces
//! `gamma * (w_r . x) / ((|w_r| + EPS) (|x| + EPS))`. A circulant row has the
//! same norm as its block row's defining vectors, so one norm per block row.
//! Circulant blocks follow the engine orientation `C[r][c] = w[(r - c) mod k]`.

use crate::arch::{ArchSpec, LayerSpec};
use ehdl_core::model::Shape3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const EPS: f64 = 1e-6;
/// Logit scale of the classifier layer.
pub const OUTPUT_GAMMA: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvF {
    pub out: usize,
    pub inp: usize,
    pub kh: usize,
    pub kw: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// Ascending kept filters once pruned; `None` keeps all.
    pub retained: Option<Vec<usize>>,
}

impl ConvF {
    pub fn kernel_len(&self) -> usize {
        self.inp * self.kh * self.kw
    }

    pub fn is_kept(&self, f: usize) -> bool {
        self.retained.as_ref().is_none_or(|r| r.binary_search(&f).is_ok())
    }

    pub fn filter_norm(&self, f: usize) -> f64 {
        let n = self.kernel_len();
        self.w[f * n..(f + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcF {
    pub rows: usize,
    pub cols: usize,
    /// 1 for a dense layer.
    pub k: usize,
    /// Block `(i, j)` defining vector at `(i * q + j) * k`.
    pub w: Vec<f64>,
    pub gamma: f64,
}

impl FcF {
    pub fn p(&self) -> usize {
        self.rows / self.k
    }

    pub fn q(&self) -> usize {
        self.cols / self.k
    }

    pub fn block(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.q() + j) * self.k;
        &self.w[o..o + self.k]
    }

    /// L2 norm of every row in block row `i`.
    pub fn row_norm(&self, i: usize) -> f64 {
        let n = self.q() * self.k;
        self.w[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Raw product `W x` without normalization.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let k = self.k;
        if k == 1 {
            return self.w.chunks_exact(self.cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        }
        let mut y = vec![0.0; self.rows];
        for i in 0..self.p() {
            let yi = &mut y[i * k..(i + 1) * k];
            for j in 0..self.q() {
                circ_acc(self.block(i, j), &x[j * k..(j + 1) * k], yi);
            }
        }
        y
    }

    /// Expanded dense matrix, row-major.
    pub fn dense(&self) -> Vec<f64> {
        let k = self.k;
        let mut m = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                m[r * self.cols + c] = self.block(r / k, c / k)[(r % k + k - c % k) % k];
            }
        }
        m
    }
}

/// `y += C(w) x` with `C[r][c] = w[(r - c) mod k]`.
fn circ_acc(w: &[f64], x: &[f64], y: &mut [f64]) {
    let k = w.len();
    for r in 0..k {
        let lo: f64 = w[..=r].iter().rev().zip(&x[..=r]).map(|(a, b)| a * b).sum();
        let hi: f64 = w[r + 1..].iter().rev().zip(&x[r + 1..]).map(|(a, b)| a * b).sum();
        y[r] += lo + hi;
    }
}

/// `y += C(w)^T h`.
fn circ_acc_t(w: &[f64], h: &[f64], y: &mut [f64]) {
    let k = w.len();
    for c in 0..k {
        let a: f64 = w[..k - c].iter().zip(&h[c..]).map(|(a, b)| a * b).sum();
        let b: f64 = w[k - c..].iter().zip(&h[..c]).map(|(a, b)| a * b).sum();
        y[c] += a + b;
    }
}

/// Tied gradient: `g[t] += sum_r h[r] x[(r - t) mod k]`.
fn circ_grad(h: &[f64], x: &[f64], g: &mut [f64]) {
    let k = h.len();
    for t in 0..k {
        let a: f64 = h[t..].iter().zip(&x[..k - t]).map(|(a, b)| a * b).sum();
        let b: f64 = h[..t].iter().zip(&x[k - t..]).map(|(a, b)| a * b).sum();
        g[t] += a + b;
    }
}

/// Cosine similarity with epsilon-guarded norms.
pub fn cosine_normalize_forward(w: &[f64], x: &[f64]) -> f64 {
    let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
    let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / ((nw + EPS) * (nx + EPS))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FLayer {
    Conv(ConvF),
    MaxPool,
    Relu,
    Fc(FcF),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: Option<crate::arch::Arch>,
    /// Input `[c, h, w]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<FLayer>,
}

/// Per-layer parameter gradients, same layout as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Network) -> Self {
        let (w, b) = net
            .layers
            .iter()
            .map(|l| match l {
                FLayer::Conv(c) => (vec![0.0; c.w.len()], vec![0.0; c.b.len()]),
                FLayer::Fc(f) => (vec![0.0; f.w.len()], Vec::new()),
                _ => (Vec::new(), Vec::new()),
            })
            .unzip();
        Grads { w, b }
    }

    pub fn clear(&mut self) {
        self.w.iter_mut().chain(self.b.iter_mut()).for_each(|v| v.fill(0.0));
    }
}

enum Cache {
    None,
    Pool(Vec<usize>),
    Fc { u: Vec<f64>, a: Vec<f64>, m: f64 },
}

/// Activations and per-layer intermediates of one forward pass.
pub struct Trace {
    pub acts: Vec<Vec<f64>>,
    caches: Vec<Cache>,
}

impl Network {
    pub fn init(spec: &ArchSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(idx, l)| match *l {
                LayerSpec::Conv { out, inp, kh, kw } => {
                    let bound = (6.0 / (inp * kh * kw) as f64).sqrt();
                    FLayer::Conv(ConvF {
                        out,
                        inp,
                        kh,
                        kw,
                        w: (0..out * inp * kh * kw).map(|_| rng.random_range(-bound..bound)).collect(),
                        b: vec![0.0; out],
                        retained: None,
                    })
                }
                LayerSpec::MaxPool => FLayer::MaxPool,
                LayerSpec::Relu => FLayer::Relu,
                LayerSpec::Fc { rows, cols, k } => {
                    let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("valid sigma");
                    let last = idx + 1 == spec.layers.len();
                    FLayer::Fc(FcF {
                        rows,
                        cols,
                        k,
                        w: (0..rows * cols / k).map(|_| normal.sample(&mut rng)).collect(),
                        gamma: if last { OUTPUT_GAMMA } else { 1.0 },
                    })
                }
            })
            .collect();
        Network { arch: Some(spec.arch), input: [spec.input.c, spec.input.h, spec.input.w], classes: spec.classes, layers }
    }

    pub fn input_shape(&self) -> Shape3 {
        Shape3::new(self.input[0], self.input[1], self.input[2])
    }

    /// Input shape followed by every layer's output shape.
    pub fn shapes(&self) -> Vec<Shape3> {
        let mut s = self.input_shape();
        let mut v = vec![s];
        for l in &self.layers {
            s = match l {
                FLayer::Conv(c) => Shape3::new(c.out, s.h + 1 - c.kh, s.w + 1 - c.kw),
                FLayer::MaxPool => Shape3::new(s.c, s.h / 2, s.w / 2),
                FLayer::Relu => s,
                FLayer::Fc(f) => Shape3::new(f.rows, 1, 1),
            };
            v.push(s);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                FLayer::Conv(c) => c.w.len() + c.b.len(),
                FLayer::Fc(f) => f.w.len(),
                _ => 0,
            })
            .sum()
    }

    /// Logits.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).acts.pop().expect("output activation")
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        ehdl_core::inference::argmax(&self.forward(x))
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let shapes = self.shapes();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = &acts[l];
            let s = shapes[l];
            let (y, cache) = match layer {
                FLayer::Conv(c) => (conv_forward(c, s, input), Cache::None),
                FLayer::MaxPool => {
                    let (y, idx) = pool_forward(s, input);
                    (y, Cache::Pool(idx))
                }
                FLayer::Relu => (input.iter().map(|v| v.max(0.0)).collect(), Cache::None),
                FLayer::Fc(f) => {
                    let u = f.matvec(input);
                    let a: Vec<f64> = (0..f.p()).map(|i| f.row_norm(i) + EPS).collect();
                    let m = input.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let b = m + EPS;
                    let z = u.iter().enumerate().map(|(r, ur)| f.gamma * ur / (a[r / f.k] * b)).collect();
                    (z, Cache::Fc { u, a, m })
                }
            };
            acts.push(y);
            caches.push(cache);
        }
        Trace { acts, caches }
    }

    /// Backpropagates `g_out` (loss gradient at the logits) through a trace,
    /// accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&self, trace: &Trace, g_out: Vec<f64>, grads: &mut Grads) -> Vec<f64> {
        let shapes = self.shapes();
        let mut g = g_out;
        for l in (0..self.layers.len()).rev() {
            let x = &trace.acts[l];
            let s = shapes[l];
            g = match (&self.layers[l], &trace.caches[l]) {
                (FLayer::Conv(c), _) => {
                    let (gw, gb) = (&mut grads.w[l], &mut grads.b[l]);
                    conv_backward(c, s, x, &g, gw, gb, l > 0)
                }
                (FLayer::MaxPool, Cache::Pool(idx)) => {
                    let mut gx = vec![0.0; x.len()];
                    for (o, &i) in idx.iter().enumerate() {
                        gx[i] += g[o];
                    }
                    gx
                }
                (FLayer::Relu, _) => g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect(),
                (FLayer::Fc(f), Cache::Fc { u, a, m }) => fc_backward(f, x, u, a, *m, &g, &mut grads.w[l]),
                _ => unreachable!("cache kind matches layer kind"),
            };
        }
        g
    }

    /// Softmax cross-entropy loss and its logit gradient.
    pub fn loss_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        let loss = -(e[label] / sum).ln();
        let mut g: Vec<f64> = e.iter().map(|v| v / sum).collect();
        g[label] -= 1.0;
        (loss, g)
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, data: &crate::data::Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = (0..data.len()).filter(|&i| self.predict(data.sample(i)) == data.labels[i] as usize).count();
        hits as f64 / data.len() as f64
    }

    /// Zeroes the weights and bias of every filter outside `retained`.
    pub fn apply_masks(&mut self) {
        for l in &mut self.layers {
            if let FLayer::Conv(c) = l {
                let n = c.kernel_len();
                for f in 0..c.out {
                    if !c.is_kept(f) {
                        c.w[f * n..(f + 1) * n].fill(0.0);
                        c.b[f] = 0.0;
                    }
                }
            }
        }
    }
}

pub fn conv_forward(c: &ConvF, s: Shape3, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (s.h + 1 - c.kh, s.w + 1 - c.kw);
    let mut y = vec![0.0; c.out * oh * ow];
    for f in 0..c.out {
        if !c.is_kept(f) {
            continue;
        }
        let yf = &mut y[f * oh * ow..(f + 1) * oh * ow];
        yf.fill(c.b[f]);
        for ci in 0..c.inp {
            let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for dy in 0..c.kh {
                for dx in 0..c.kw {
                    let wv = c.w[((f * c.inp + ci) * c.kh + dy) * c.kw + dx];
                    for r in 0..oh {
                        let src = &plane[(r + dy) * s.w + dx..(r + dy) * s.w + dx + ow];
                        for (o, v) in yf[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward(c: &ConvF, s: Shape3, x: &[f64], g: &[f64], gw: &mut [f64], gb: &mut [f64], need_gx: bool) -> Vec<f64> {
    let (oh, ow) = (s.h + 1 - c.kh, s.w + 1 - c.kw);
    let mut gx = if need_gx { vec![0.0; x.len()] } else { Vec::new() };
    for f in 0..c.out {
        if !c.is_kept(f) {
            continue;
        }
        let gf = &g[f * oh * ow..(f + 1) * oh * ow];
        gb[f] += gf.iter().sum::<f64>();
        for ci in 0..c.inp {
            let base = ci * s.h * s.w;
            for dy in 0..c.kh {
                for dx in 0..c.kw {
                    let wi = ((f * c.inp + ci) * c.kh + dy) * c.kw + dx;
                    let wv = c.w[wi];
                    let mut acc = 0.0;
                    for r in 0..oh {
                        let at = base + (r + dy) * s.w + dx;
                        let grow = &gf[r * ow..(r + 1) * ow];
                        acc += grow.iter().zip(&x[at..at + ow]).map(|(a, b)| a * b).sum::<f64>();
                        if need_gx {
                            for (o, gv) in gx[at..at + ow].iter_mut().zip(grow) {
                                *o += wv * gv;
                            }
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    gx
}

fn pool_forward(s: Shape3, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut y = Vec::with_capacity(s.c * oh * ow);
    let mut idx = Vec::with_capacity(s.c * oh * ow);
    for c in 0..s.c {
        for r in 0..oh {
            for q in 0..ow {
                let cand = [(2 * r, 2 * q), (2 * r, 2 * q + 1), (2 * r + 1, 2 * q), (2 * r + 1, 2 * q + 1)];
                let best = cand.iter().map(|&(a, b)| (c * s.h + a) * s.w + b).fold(usize::MAX, |m, i| {
                    if m == usize::MAX || x[i] > x[m] {
                        i
                    } else {
                        m
                    }
                });
                y.push(x[best]);
                idx.push(best);
            }
        }
    }
    (y, idx)
}

fn fc_backward(f: &FcF, x: &[f64], u: &[f64], a: &[f64], m: f64, g: &[f64], gw: &mut [f64]) -> Vec<f64> {
    let (k, p, q) = (f.k, f.p(), f.q());
    let b = m + EPS;
    let mut h = vec![0.0; f.rows];
    let mut d_b = 0.0;
    let mut d_a = vec![0.0; p];
    for r in 0..f.rows {
        let ai = a[r / k];
        let z = f.gamma * u[r] / (ai * b);
        h[r] = g[r] * f.gamma / (ai * b);
        d_a[r / k] -= g[r] * z / ai;
        d_b -= g[r] * z / b;
    }
    let mut gx = vec![0.0; f.cols];
    if k == 1 {
        for r in 0..f.rows {
            let n = a[r] - EPS;
            let row = &f.w[r * q..(r + 1) * q];
            let grow = &mut gw[r * q..(r + 1) * q];
            let norm_term = if n > 0.0 { d_a[r] / n } else { 0.0 };
            for ((gv, wv), xv) in grow.iter_mut().zip(row).zip(x) {
                *gv += h[r] * xv + norm_term * wv;
            }
            for (gv, wv) in gx.iter_mut().zip(row) {
                *gv += wv * h[r];
            }
        }
    }
    for i in (0..p).filter(|_| k > 1) {
        let n = a[i] - EPS;
        let hi = &h[i * k..(i + 1) * k];
        for j in 0..q {
            let o = (i * q + j) * k;
            let w = &f.w[o..o + k];
            circ_grad(hi, &x[j * k..(j + 1) * k], &mut gw[o..o + k]);
            if n > 0.0 {
                for (gv, wv) in gw[o..o + k].iter_mut().zip(w) {
                    *gv += d_a[i] * wv / n;
                }
            }
            circ_acc_t(w, hi, &mut gx[j * k..(j + 1) * k]);
        }
    }
    if m > 0.0 {
        for (gv, xv) in gx.iter_mut().zip(x) {
            *gv += d_b * xv / m;
        }
    }
    gx
}
