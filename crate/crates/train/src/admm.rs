//! Structured filter pruning by ADMM.
//!
//! Each targeted CONV layer keeps an auxiliary copy `Z` constrained to at most
//! `N` nonzero filters and a scaled dual `U`. Training adds `rho (W - Z + U)`
//! to the weight gradient; the Z step projects `W + U` onto the constraint.

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::net::{FLayer, Grads, Network};
use crate::train::{EpochStats, Trainer};
use crate::TrainError;
use serde::Serialize;

/// Indices of the `keep` filters with the largest L2 norm, ascending.
/// Ties go to the lower index.
pub fn top_filters(w: &[f64], kernel_len: usize, keep: usize) -> Vec<usize> {
    let norms: Vec<f64> =
        w.chunks_exact(kernel_len.max(1)).map(|f| f.iter().map(|v| v * v).sum::<f64>()).collect();
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

/// Euclidean projection onto tensors with at most `keep` nonzero filters.
pub fn project_filters(w: &[f64], kernel_len: usize, keep: usize) -> Vec<f64> {
    let kept = top_filters(w, kernel_len, keep);
    let mut z = vec![0.0; w.len()];
    for f in kept {
        z[f * kernel_len..(f + 1) * kernel_len].copy_from_slice(&w[f * kernel_len..(f + 1) * kernel_len]);
    }
    z
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerPrune {
    pub layer: usize,
    pub filters: usize,
    pub retained: Vec<usize>,
    /// `|W - Z|` after each ADMM iteration.
    pub residuals: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneReport {
    pub layers: Vec<LayerPrune>,
    pub admm: Vec<EpochStats>,
    pub retrain: Vec<EpochStats>,
}

pub fn check_targets(net: &Network, targets: &[(usize, usize)]) -> Result<(), TrainError> {
    for &(layer, keep) in targets {
        let available = match net.layers.get(layer) {
            Some(FLayer::Conv(c)) => c.out,
            _ => 0,
        };
        if keep == 0 || keep > available {
            return Err(TrainError::InfeasibleTarget { layer, retain: keep, available });
        }
    }
    Ok(())
}

fn conv(net: &Network, layer: usize) -> &crate::net::ConvF {
    match &net.layers[layer] {
        FLayer::Conv(c) => c,
        _ => unreachable!("targets are checked"),
    }
}

struct Aux {
    layer: usize,
    keep: usize,
    z: Vec<f64>,
    u: Vec<f64>,
}

/// Prunes `targets` (layer index, filters kept), then retrains with the
/// pruned filters masked.
pub fn admm_prune(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    targets: &[(usize, usize)],
) -> Result<PruneReport, TrainError> {
    check_targets(net, targets)?;
    let mut aux: Vec<Aux> = targets
        .iter()
        .map(|&(layer, keep)| {
            let c = conv(net, layer);
            Aux { layer, keep, z: project_filters(&c.w, c.kernel_len(), keep), u: vec![0.0; c.w.len()] }
        })
        .collect();
    let mut residuals = vec![Vec::new(); aux.len()];
    let mut trainer = Trainer::new(net, cfg.seed.wrapping_add(1));
    let mut admm = Vec::new();
    for _ in 0..cfg.admm_iterations {
        let rho = cfg.rho;
        let penalty = |n: &Network, g: &mut Grads| {
            for a in &aux {
                let w = &conv(n, a.layer).w;
                for (((gv, wv), zv), uv) in g.w[a.layer].iter_mut().zip(w).zip(&a.z).zip(&a.u) {
                    *gv += rho * (wv - zv + uv);
                }
            }
        };
        admm.extend(trainer.run(net, data, cfg, cfg.admm_epochs, Some(&penalty))?);
        for (a, res) in aux.iter_mut().zip(&mut residuals) {
            let c = conv(net, a.layer);
            let wu: Vec<f64> = c.w.iter().zip(&a.u).map(|(w, u)| w + u).collect();
            a.z = project_filters(&wu, c.kernel_len(), a.keep);
            let mut r2 = 0.0;
            for ((u, w), z) in a.u.iter_mut().zip(&c.w).zip(&a.z) {
                *u += w - z;
                r2 += (w - z) * (w - z);
            }
            res.push(r2.sqrt());
        }
    }
    let mut layers = Vec::new();
    for (a, res) in aux.iter().zip(residuals) {
        let FLayer::Conv(c) = &mut net.layers[a.layer] else { unreachable!("targets are checked") };
        let retained = top_filters(&c.w, c.kernel_len(), a.keep);
        c.retained = Some(retained.clone());
        layers.push(LayerPrune { layer: a.layer, filters: c.out, retained, residuals: res });
    }
    net.apply_masks();
    let retrain = Trainer::new(net, cfg.seed.wrapping_add(2)).run(net, data, cfg, cfg.retrain_epochs, None)?;
    Ok(PruneReport { layers, admm, retrain })
}
