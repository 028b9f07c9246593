//! Layer chains of the three reference networks.

use ehdl_core::model::Shape3;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mnist,
    Har,
    Okg,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Mnist, Arch::Har, Arch::Okg];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Mnist => "mnist",
            Arch::Har => "har",
            Arch::Okg => "okg",
        }
    }

    pub fn spec(self) -> ArchSpec {
        use LayerSpec::*;
        let conv = |out, inp, kh, kw| Conv { out, inp, kh, kw };
        let fc = |rows, cols, k| Fc { rows, cols, k };
        match self {
            Arch::Mnist => ArchSpec {
                arch: self,
                input: Shape3::new(1, 28, 28),
                classes: 10,
                layers: vec![conv(6, 1, 5, 5), MaxPool, Relu, conv(16, 6, 5, 5), MaxPool, Relu, fc(256, 256, 128), Relu, fc(10, 256, 1)],
            },
            // 3520 = 55 * 64 and 3456 = 27 * 128: the largest power-of-two
            // blocks that tile those widths.
            Arch::Har => ArchSpec {
                arch: self,
                input: Shape3::new(1, 1, 121),
                classes: 6,
                layers: vec![conv(32, 1, 1, 12), Relu, fc(128, 3520, 64), Relu, fc(64, 128, 64), Relu, fc(6, 64, 1)],
            },
            Arch::Okg => ArchSpec {
                arch: self,
                input: Shape3::new(1, 28, 28),
                classes: 12,
                layers: vec![
                    conv(6, 1, 5, 5),
                    Relu,
                    fc(512, 3456, 128),
                    Relu,
                    fc(256, 512, 128),
                    Relu,
                    fc(128, 256, 64),
                    Relu,
                    fc(12, 128, 1),
                ],
            },
        }
    }

    /// Filters kept per CONV layer after structured pruning.
    pub fn default_prune_targets(self) -> Vec<(usize, usize)> {
        match self {
            Arch::Mnist => vec![(3, 8)],
            Arch::Har | Arch::Okg => vec![],
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Arch::Mnist),
            "har" => Ok(Arch::Har),
            "okg" => Ok(Arch::Okg),
            other => Err(format!("unknown architecture `{other}` (expected mnist, har or okg)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv { out: usize, inp: usize, kh: usize, kw: usize },
    MaxPool,
    Relu,
    /// `k == 1` is a dense layer.
    Fc { rows: usize, cols: usize, k: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub arch: Arch,
    pub input: Shape3,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    /// Same chain with every block-circulant FC layer replaced by block size `k`.
    pub fn with_fc_block(mut self, k: usize) -> Self {
        for l in &mut self.layers {
            if let LayerSpec::Fc { k: kk, .. } = l {
                if *kk > 1 {
                    *kk = k;
                }
            }
        }
        self
    }

    /// Activation shapes, input first. Panics on an inconsistent chain.
    pub fn shapes(&self) -> Vec<Shape3> {
        let mut s = self.input;
        let mut v = vec![s];
        for l in &self.layers {
            s = match *l {
                LayerSpec::Conv { out, inp, kh, kw } => {
                    assert_eq!(inp, s.c, "conv input channels");
                    Shape3::new(out, s.h - kh + 1, s.w - kw + 1)
                }
                LayerSpec::MaxPool => Shape3::new(s.c, s.h / 2, s.w / 2),
                LayerSpec::Relu => s,
                LayerSpec::Fc { rows, cols, .. } => {
                    assert_eq!(cols, s.len(), "fc input width");
                    Shape3::new(rows, 1, 1)
                }
            };
            v.push(s);
        }
        v
    }
}
