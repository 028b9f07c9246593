//! Datasets: gzipped IDX files for MNIST, deterministic synthetic data for
//! shape-only runs.

use crate::TrainError;
use ehdl_core::model::Shape3;
use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::Read;
use std::path::{Path, PathBuf};

/// Environment variable naming the dataset root.
pub const DATA_ENV: &str = "EHDL_DATA";

/// Pixels map to `byte / 256` so the brightest pixel stays inside Q15.
pub const PIXEL_SCALE: f64 = 1.0 / 256.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: Shape3,
    pub classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    /// First `n` samples (all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape,
            classes: self.classes,
            images: self.images[..n * self.shape.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Dataset root: `$EHDL_DATA`, else `data/` under the current directory.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

fn read_gz(path: &Path) -> Result<Vec<u8>, TrainError> {
    let f = std::fs::File::open(path).map_err(|_| TrainError::DatasetMissing(path.to_path_buf()))?;
    let mut out = Vec::new();
    GzDecoder::new(f).read_to_end(&mut out).map_err(|e| TrainError::BadDataset(format!("{}: {e}", path.display())))?;
    Ok(out)
}

fn be_u32(b: &[u8], at: usize) -> Result<usize, TrainError> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]) as usize)
        .ok_or_else(|| TrainError::BadDataset("IDX header truncated".into()))
}

/// Parses an IDX image file (magic 0x803) and label file (magic 0x801).
pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<Dataset, TrainError> {
    if be_u32(images, 0)? != 0x803 || be_u32(labels, 0)? != 0x801 {
        return Err(TrainError::BadDataset("bad IDX magic".into()));
    }
    let (n, h, w) = (be_u32(images, 4)?, be_u32(images, 8)?, be_u32(images, 12)?);
    if be_u32(labels, 4)? != n {
        return Err(TrainError::BadDataset("image and label counts differ".into()));
    }
    let pix = images.get(16..16 + n * h * w).ok_or_else(|| TrainError::BadDataset("IDX images truncated".into()))?;
    let lab = labels.get(8..8 + n).ok_or_else(|| TrainError::BadDataset("IDX labels truncated".into()))?;
    if let Some(&bad) = lab.iter().find(|&&l| l as usize >= classes) {
        return Err(TrainError::BadDataset(format!("label {bad} out of range")));
    }
    Ok(Dataset {
        shape: Shape3::new(1, h, w),
        classes,
        images: pix.iter().map(|&p| p as f64 * PIXEL_SCALE).collect(),
        labels: lab.to_vec(),
    })
}

/// Loads `<root>/mnist/{train,t10k}-*-idx*-ubyte.gz`.
pub fn load_mnist(root: &Path) -> Result<(Dataset, Dataset), TrainError> {
    let dir = root.join("mnist");
    let split = |prefix: &str| -> Result<Dataset, TrainError> {
        let img = read_gz(&dir.join(format!("{prefix}-images-idx3-ubyte.gz")))?;
        let lab = read_gz(&dir.join(format!("{prefix}-labels-idx1-ubyte.gz")))?;
        parse_idx(&img, &lab, 10)
    };
    Ok((split("train")?, split("t10k")?))
}

/// Class-conditional data: each class is a fixed random prototype in
/// `[0, 0.5)`, each sample adds Gaussian noise and clamps to `[0, 0.95]`.
pub fn synthetic(shape: Shape3, classes: usize, n: usize, seed: u64) -> Dataset {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 ^ (shape.len() as u64) << 8 ^ classes as u64);
    let protos: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..shape.len()).map(|_| proto_rng.random_range(0.0..0.5)).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let mut images = Vec::with_capacity(n * shape.len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c as u8);
        images.extend(protos[c].iter().map(|&p| (p + noise.sample(&mut rng)).clamp(0.0, 0.95)));
    }
    Dataset { shape, classes, images, labels }
}
