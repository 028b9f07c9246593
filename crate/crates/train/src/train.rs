//! Minibatch SGD with momentum.

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::net::{FLayer, Grads, Network};
use crate::TrainError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Loss above which a run counts as diverged.
const LOSS_LIMIT: f64 = 1e3;
/// CONV parameters are clamped to this magnitude after every step so they
/// stay representable.
pub const CONV_PARAM_LIMIT: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub learning_rate: f64,
}

/// Extra gradient added after each minibatch backward pass.
pub type Penalty<'a> = &'a dyn Fn(&Network, &mut Grads);

/// SGD state carried across calls.
pub struct Trainer {
    velocity: Grads,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(net: &Network, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Stream 0 initializes weights.
        rng.set_stream(1);
        Trainer { velocity: Grads::zeros_like(net), rng, epoch: 0 }
    }

    /// Runs `epochs` epochs with the learning rate cosine-annealed
    /// from `cfg.learning_rate` over this call.
    pub fn run(
        &mut self,
        net: &mut Network,
        data: &Dataset,
        cfg: &TrainConfig,
        epochs: usize,
        penalty: Option<Penalty<'_>>,
    ) -> Result<Vec<EpochStats>, TrainError> {
        let data = match cfg.train_limit {
            Some(n) if n < data.len() => data.take(n),
            _ => data.clone(),
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut grads = Grads::zeros_like(net);
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size).max(1);
        let total = (steps_per_epoch * epochs).max(1);
        let mut step = 0;
        let mut stats = Vec::with_capacity(epochs);
        let mut buf = vec![0.0; data.shape.len()];
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            let (mut loss_sum, mut hits) = (0.0, 0);
            let mut lr = cfg.learning_rate;
            for batch in order.chunks(cfg.batch_size) {
                lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
                step += 1;
                grads.clear();
                for &i in batch {
                    let x = if cfg.shift > 0 && data.shape.h > 1 {
                        let s = cfg.shift as i64;
                        let (dy, dx) = (self.rng.random_range(-s..=s), self.rng.random_range(-s..=s));
                        translate(data.sample(i), data.shape, dy, dx, &mut buf);
                        &buf[..]
                    } else {
                        data.sample(i)
                    };
                    let trace = net.forward_trace(x);
                    let logits = trace.acts.last().expect("logits");
                    let label = data.labels[i] as usize;
                    hits += usize::from(ehdl_core::inference::argmax(logits) == label);
                    let (loss, g) = Network::loss_grad(logits, label);
                    loss_sum += loss;
                    net.backward(&trace, g, &mut grads);
                }
                let inv = 1.0 / batch.len() as f64;
                grads.w.iter_mut().chain(grads.b.iter_mut()).flatten().for_each(|g| *g *= inv);
                if let Some(p) = penalty {
                    p(net, &mut grads);
                }
                self.step(net, &grads, lr, cfg);
            }
            let loss = loss_sum / data.len().max(1) as f64;
            if !loss.is_finite() || loss > LOSS_LIMIT {
                return Err(TrainError::Diverged { epoch: self.epoch, loss });
            }
            stats.push(EpochStats {
                epoch: self.epoch,
                loss,
                train_accuracy: hits as f64 / data.len().max(1) as f64,
                learning_rate: lr,
            });
            self.epoch += 1;
        }
        Ok(stats)
    }

    fn step(&mut self, net: &mut Network, grads: &Grads, lr: f64, cfg: &TrainConfig) {
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (w, b, limit): (&mut [f64], &mut [f64], f64) = match layer {
                FLayer::Conv(c) => (&mut c.w, &mut c.b, CONV_PARAM_LIMIT),
                FLayer::Fc(f) => (&mut f.w, &mut [], f64::INFINITY),
                _ => continue,
            };
            let (vw, vb) = (&mut self.velocity.w[l], &mut self.velocity.b[l]);
            for ((p, v), g) in w.iter_mut().zip(vw.iter_mut()).zip(&grads.w[l]) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p = (*p - lr * *v).clamp(-limit, limit);
            }
            for ((p, v), g) in b.iter_mut().zip(vb.iter_mut()).zip(&grads.b[l]) {
                *v = cfg.momentum * *v + g;
                *p = (*p - lr * *v).clamp(-limit, limit);
            }
        }
        net.apply_masks();
    }
}

/// Shifts every channel by `(dy, dx)` pixels with zero fill.
pub fn translate(x: &[f64], s: ehdl_core::model::Shape3, dy: i64, dx: i64, out: &mut [f64]) {
    out.fill(0.0);
    for c in 0..s.c {
        for r in 0..s.h as i64 {
            let sr = r - dy;
            if sr < 0 || sr >= s.h as i64 {
                continue;
            }
            for q in 0..s.w as i64 {
                let sq = q - dx;
                if sq >= 0 && sq < s.w as i64 {
                    out[(c * s.h + r as usize) * s.w + q as usize] = x[(c * s.h + sr as usize) * s.w + sq as usize];
                }
            }
        }
    }
}

/// Trains a fresh network for `cfg.epochs` epochs.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>, TrainError> {
    Trainer::new(net, cfg.seed).run(net, data, cfg, cfg.epochs, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ehdl_core::model::Shape3;

    #[test]
    fn translate_moves_pixels() {
        let s = Shape3::new(1, 3, 3);
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut out = vec![0.0; 9];
        translate(&x, s, 1, 0, &mut out);
        assert_eq!(out, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        translate(&x, s, 0, -1, &mut out);
        assert_eq!(out, vec![2.0, 3.0, 0.0, 5.0, 6.0, 0.0, 8.0, 9.0, 0.0]);
    }
}
