//! Deployed model container and the `.ehdl` binary format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header (16 B)   "EHDL" | version u16 | layer_count u16 | in_c u16 | in_h u16 | in_w u16 | 0 u16
//! descriptor (32 B each)
//!   0  kind u8 (0 conv, 1 dense fc, 2 block-circulant fc, 3 maxpool, 4 relu)
//!   1  flags u8 (bit0 frequency-domain weights, bit1 bias, bit2 pruned filters)
//!   2  block size k u16
//!   4  d0..d3 u16 (conv: out_ch in_ch kh kw; fc: rows cols; pool/relu: c h w)
//!   12 retained filters u16
//!   14 reserved u16
//!   16 output elements u32
//!   20 weight blob bytes u32
//!   24 bias blob bytes u32
//!   28 weight exponent u8
//!   29 reserved (3 B)
//! blobs, per layer in order: retained index list (u16, pruned conv only),
//!   weights, bias
//! ```
//!
//! Conv weights are `[retained][in_ch][kh][kw]`, dense weights row-major.
//! Block-circulant weights are `p*q` blocks in row-major block order, each the
//! `k` defining values of one circulant block (`C[r][c] = w[(r - c) mod k]`).
//! Frequency-domain blocks store `k` complex values followed by an i16 exponent.
//! Stored weights carry a gain of `2^weight_exp`, undone at read-out.

use thiserror::Error;

use crate::accel_sim::{check_fft_len, DeviceConfig};
use crate::fxp::{CQ15, Q15};
use crate::memory_sim::DEFAULT_FRAM_BYTES;

pub const MAGIC: [u8; 4] = *b"EHDL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const DESC_LEN: usize = 32;

const FLAG_FREQ: u8 = 1;
const FLAG_BIAS: u8 = 2;
const FLAG_PRUNED: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("bad magic, not an EHDL model")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("model data truncated: need {needed} bytes, have {have}")]
    TruncatedBlob { needed: usize, have: usize },
    #[error("layer {layer}: {what}")]
    ShapeArithmeticMismatch { layer: usize, what: String },
    #[error("model needs {bytes} bytes but FRAM holds {capacity}")]
    ExceedsFram { bytes: usize, capacity: usize },
    #[error("{0} trailing bytes after the last blob")]
    TrailingBytes(usize),
}

fn mismatch(layer: usize, what: impl Into<String>) -> ModelError {
    ModelError::ShapeArithmeticMismatch { layer, what: what.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape3 { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LayerKind {
    Conv = 0,
    FcDense = 1,
    FcBcm = 2,
    MaxPool = 3,
    Relu = 4,
}

impl LayerKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => LayerKind::Conv,
            1 => LayerKind::FcDense,
            2 => LayerKind::FcBcm,
            3 => LayerKind::MaxPool,
            4 => LayerKind::Relu,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::FcDense => "fc_dense",
            LayerKind::FcBcm => "fc_bcm",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Relu => "relu",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    /// Ascending indices of the filters that are stored and computed.
    pub retained: Vec<u16>,
    pub weights: Vec<Q15>,
    pub bias: Option<Vec<Q15>>,
    pub weight_exp: u8,
}

impl ConvLayer {
    pub fn kernel_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn is_pruned(&self) -> bool {
        self.retained.len() < self.out_channels
    }

    /// Position of filter `f` among the retained filters.
    pub fn retained_slot(&self, f: usize) -> Option<usize> {
        self.retained.binary_search(&(f as u16)).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<Q15>,
    pub bias: Option<Vec<Q15>>,
    pub weight_exp: u8,
}

/// Precomputed, block-normalized spectrum of one circulant block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqBlock {
    pub spectrum: Vec<CQ15>,
    pub exp: i16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BcmWeights {
    Time(Vec<Q15>),
    Freq(Vec<FreqBlock>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BcmLayer {
    pub rows: usize,
    pub cols: usize,
    pub k: usize,
    pub weights: BcmWeights,
    pub bias: Option<Vec<Q15>>,
    pub weight_exp: u8,
}

impl BcmLayer {
    /// Block rows.
    pub fn p(&self) -> usize {
        self.rows / self.k
    }

    /// Block columns.
    pub fn q(&self) -> usize {
        self.cols / self.k
    }

    pub fn stored_params(&self) -> usize {
        self.p() * self.q() * self.k
    }

    /// Defining vector of block `(i, j)` when stored in the time domain.
    pub fn block(&self, i: usize, j: usize) -> Option<&[Q15]> {
        match &self.weights {
            BcmWeights::Time(w) => {
                let b = (i * self.q() + j) * self.k;
                Some(&w[b..b + self.k])
            }
            BcmWeights::Freq(_) => None,
        }
    }

    pub fn is_freq(&self) -> bool {
        matches!(self.weights, BcmWeights::Freq(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv(ConvLayer),
    Dense(DenseLayer),
    Bcm(BcmLayer),
    MaxPool,
    Relu,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Dense(_) => LayerKind::FcDense,
            Layer::Bcm(_) => LayerKind::FcBcm,
            Layer::MaxPool => LayerKind::MaxPool,
            Layer::Relu => LayerKind::Relu,
        }
    }

    /// Output shape for input shape `s`, checking the layer's dimension rules.
    pub fn output_shape(&self, index: usize, s: Shape3) -> Result<Shape3, ModelError> {
        match self {
            Layer::Conv(c) => {
                if c.in_channels != s.c {
                    return Err(mismatch(index, format!("conv expects {} input channels, got {}", c.in_channels, s.c)));
                }
                if c.kh == 0 || c.kw == 0 || c.kh > s.h || c.kw > s.w {
                    return Err(mismatch(index, format!("kernel {}x{} does not fit input {}x{}", c.kh, c.kw, s.h, s.w)));
                }
                if c.retained.len() > c.out_channels || c.retained.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(mismatch(index, "retained filter list must be ascending and within the filter count"));
                }
                if c.retained.last().is_some_and(|&f| f as usize >= c.out_channels) {
                    return Err(mismatch(index, "retained filter index out of range"));
                }
                Ok(Shape3::new(c.out_channels, s.h - c.kh + 1, s.w - c.kw + 1))
            }
            Layer::Dense(d) => {
                if d.cols != s.len() {
                    return Err(mismatch(index, format!("fc expects {} inputs, got {}", d.cols, s.len())));
                }
                Ok(Shape3::new(d.rows, 1, 1))
            }
            Layer::Bcm(b) => {
                if b.cols != s.len() {
                    return Err(mismatch(index, format!("fc expects {} inputs, got {}", b.cols, s.len())));
                }
                if !b.k.is_power_of_two() || b.rows % b.k != 0 || b.cols % b.k != 0 {
                    return Err(mismatch(index, format!("block size {} must be a power of two dividing {}x{}", b.k, b.rows, b.cols)));
                }
                Ok(Shape3::new(b.rows, 1, 1))
            }
            Layer::MaxPool => {
                if s.h % 2 != 0 || s.w % 2 != 0 {
                    return Err(mismatch(index, format!("maxpool needs even dims, got {}x{}", s.h, s.w)));
                }
                Ok(Shape3::new(s.c, s.h / 2, s.w / 2))
            }
            Layer::Relu => Ok(s),
        }
    }

    fn flags(&self) -> u8 {
        match self {
            Layer::Conv(c) => {
                let mut f = 0;
                if c.bias.is_some() {
                    f |= FLAG_BIAS;
                }
                if c.is_pruned() {
                    f |= FLAG_PRUNED;
                }
                f
            }
            Layer::Dense(d) => {
                if d.bias.is_some() {
                    FLAG_BIAS
                } else {
                    0
                }
            }
            Layer::Bcm(b) => (if b.bias.is_some() { FLAG_BIAS } else { 0 }) | (if b.is_freq() { FLAG_FREQ } else { 0 }),
            _ => 0,
        }
    }

    /// Expected blob sizes `(index list, weights, bias)` in bytes.
    fn blob_sizes(&self) -> (usize, usize, usize) {
        match self {
            Layer::Conv(c) => {
                let idx = if c.is_pruned() { 2 * c.retained.len() } else { 0 };
                let bias = c.bias.as_ref().map_or(0, |_| 2 * c.retained.len());
                (idx, 2 * c.retained.len() * c.kernel_len(), bias)
            }
            Layer::Dense(d) => (0, 2 * d.rows * d.cols, d.bias.as_ref().map_or(0, |_| 2 * d.rows)),
            Layer::Bcm(b) => {
                let w = match b.weights {
                    BcmWeights::Time(_) => 2 * b.stored_params(),
                    BcmWeights::Freq(_) => b.p() * b.q() * (4 * b.k + 2),
                };
                (0, w, b.bias.as_ref().map_or(0, |_| 2 * b.rows))
            }
            _ => (0, 0, 0),
        }
    }

    fn weight_exp(&self) -> u8 {
        match self {
            Layer::Conv(c) => c.weight_exp,
            Layer::Dense(d) => d.weight_exp,
            Layer::Bcm(b) => b.weight_exp,
            _ => 0,
        }
    }
}

/// Fixed-size descriptor record as stored in the file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub kind: LayerKind,
    pub flags: u8,
    pub k: u16,
    pub dims: [u16; 4],
    pub retained: u16,
    pub out_len: u32,
    pub weight_bytes: u32,
    pub bias_bytes: u32,
    pub weight_exp: u8,
}

impl LayerDesc {
    /// Descriptor of a fully connected layer, used for compression accounting.
    pub fn fc(rows: usize, cols: usize, k: usize) -> Self {
        LayerDesc {
            kind: if k > 1 { LayerKind::FcBcm } else { LayerKind::FcDense },
            flags: 0,
            k: k as u16,
            dims: [rows as u16, cols as u16, 0, 0],
            retained: 0,
            out_len: rows as u32,
            weight_bytes: 0,
            bias_bytes: 0,
            weight_exp: 0,
        }
    }

    fn index_bytes(&self) -> usize {
        if self.flags & FLAG_PRUNED != 0 {
            2 * self.retained as usize
        } else {
            0
        }
    }

    fn blob_total(&self) -> usize {
        self.index_bytes() + self.weight_bytes as usize + self.bias_bytes as usize
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.kind as u8);
        out.push(self.flags);
        out.extend_from_slice(&self.k.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.retained.to_le_bytes());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.out_len.to_le_bytes());
        out.extend_from_slice(&self.weight_bytes.to_le_bytes());
        out.extend_from_slice(&self.bias_bytes.to_le_bytes());
        out.push(self.weight_exp);
        out.extend_from_slice(&[0, 0, 0]);
    }

    fn decode(index: usize, b: &[u8]) -> Result<Self, ModelError> {
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]]);
        let kind = LayerKind::from_u8(b[0]).ok_or_else(|| mismatch(index, format!("unknown layer kind {}", b[0])))?;
        Ok(LayerDesc {
            kind,
            flags: b[1],
            k: u16_at(2),
            dims: [u16_at(4), u16_at(6), u16_at(8), u16_at(10)],
            retained: u16_at(12),
            out_len: u32_at(16),
            weight_bytes: u32_at(20),
            bias_bytes: u32_at(24),
            weight_exp: b[28],
        })
    }
}

/// Byte offsets of one layer's blobs inside the serialized image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlobOffsets {
    pub index: usize,
    pub weights: usize,
    pub bias: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Model {
    pub input: Shape3,
    pub layers: Vec<Layer>,
}

impl Model {
    /// Shapes of the model input followed by every layer output.
    pub fn shapes(&self) -> Result<Vec<Shape3>, ModelError> {
        let mut v = Vec::with_capacity(self.layers.len() + 1);
        v.push(self.input);
        for (i, l) in self.layers.iter().enumerate() {
            let s = l.output_shape(i, *v.last().unwrap())?;
            v.push(s);
        }
        Ok(v)
    }

    /// Activation element counts L_i (model input first).
    pub fn activation_lens(&self) -> Result<Vec<usize>, ModelError> {
        Ok(self.shapes()?.iter().map(Shape3::len).collect())
    }

    pub fn output_len(&self) -> Result<usize, ModelError> {
        Ok(self.shapes()?.last().map_or(0, Shape3::len))
    }

    /// Shape and payload checks beyond the dimension rules.
    pub fn validate(&self) -> Result<(), ModelError> {
        let shapes = self.shapes()?;
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(c) => {
                    if c.weights.len() != c.retained.len() * c.kernel_len() {
                        return Err(mismatch(i, "conv weight count does not match retained filters"));
                    }
                    if c.bias.as_ref().is_some_and(|b| b.len() != c.retained.len()) {
                        return Err(mismatch(i, "conv bias count does not match retained filters"));
                    }
                }
                Layer::Dense(d) => {
                    if d.weights.len() != d.rows * d.cols {
                        return Err(mismatch(i, "fc weight count"));
                    }
                    if d.bias.as_ref().is_some_and(|b| b.len() != d.rows) {
                        return Err(mismatch(i, "fc bias count"));
                    }
                }
                Layer::Bcm(b) => {
                    match &b.weights {
                        BcmWeights::Time(w) if w.len() != b.stored_params() => {
                            return Err(mismatch(i, "block-circulant weight count"));
                        }
                        BcmWeights::Freq(f) if f.len() != b.p() * b.q() || f.iter().any(|x| x.spectrum.len() != b.k) => {
                            return Err(mismatch(i, "frequency-domain block count"));
                        }
                        _ => {}
                    }
                    if b.bias.as_ref().is_some_and(|x| x.len() != b.rows) {
                        return Err(mismatch(i, "fc bias count"));
                    }
                }
                _ => {}
            }
            if shapes[i + 1].len() > u32::MAX as usize {
                return Err(mismatch(i, "activation too large"));
            }
        }
        Ok(())
    }

    fn descriptor(&self, l: &Layer, out: Shape3, input: Shape3) -> LayerDesc {
        let (_, wb, bb) = l.blob_sizes();
        let (k, dims, retained) = match l {
            Layer::Conv(c) => (0, [c.out_channels, c.in_channels, c.kh, c.kw], c.retained.len()),
            Layer::Dense(d) => (0, [d.rows, d.cols, 0, 0], 0),
            Layer::Bcm(b) => (b.k, [b.rows, b.cols, 0, 0], 0),
            Layer::MaxPool | Layer::Relu => (0, [input.c, input.h, input.w, 0], 0),
        };
        LayerDesc {
            kind: l.kind(),
            flags: l.flags(),
            k: k as u16,
            dims: dims.map(|d| d as u16),
            retained: retained as u16,
            out_len: out.len() as u32,
            weight_bytes: wb as u32,
            bias_bytes: bb as u32,
            weight_exp: l.weight_exp(),
        }
    }

    /// Descriptor records in layer order.
    pub fn descriptors(&self) -> Result<Vec<LayerDesc>, ModelError> {
        let shapes = self.shapes()?;
        Ok(self.layers.iter().enumerate().map(|(i, l)| self.descriptor(l, shapes[i + 1], shapes[i])).collect())
    }

    /// Blob offsets per layer within [`Model::serialize`] output.
    pub fn blob_offsets(&self) -> Result<Vec<BlobOffsets>, ModelError> {
        let mut off = HEADER_LEN + DESC_LEN * self.layers.len();
        let mut v = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (i, w, b) = l.blob_sizes();
            v.push(BlobOffsets { index: off, weights: off + i, bias: off + i + w });
            off += i + w + b;
        }
        Ok(v)
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_LEN
            + self
                .layers
                .iter()
                .map(|l| {
                    let (i, w, b) = l.blob_sizes();
                    DESC_LEN + i + w + b
                })
                .sum::<usize>()
    }

    pub fn serialize(&self) -> Result<Vec<u8>, ModelError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for d in [self.input.c, self.input.h, self.input.w, 0] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        for d in self.descriptors()? {
            d.encode(&mut out);
        }
        let put = |out: &mut Vec<u8>, v: &[Q15]| {
            for q in v {
                out.extend_from_slice(&q.0.to_le_bytes());
            }
        };
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    if c.is_pruned() {
                        for r in &c.retained {
                            out.extend_from_slice(&r.to_le_bytes());
                        }
                    }
                    put(&mut out, &c.weights);
                    if let Some(b) = &c.bias {
                        put(&mut out, b);
                    }
                }
                Layer::Dense(d) => {
                    put(&mut out, &d.weights);
                    if let Some(b) = &d.bias {
                        put(&mut out, b);
                    }
                }
                Layer::Bcm(b) => {
                    match &b.weights {
                        BcmWeights::Time(w) => put(&mut out, w),
                        BcmWeights::Freq(blocks) => {
                            for fb in blocks {
                                for c in &fb.spectrum {
                                    out.extend_from_slice(&c.re.0.to_le_bytes());
                                    out.extend_from_slice(&c.im.0.to_le_bytes());
                                }
                                out.extend_from_slice(&fb.exp.to_le_bytes());
                            }
                        }
                    }
                    if let Some(bias) = &b.bias {
                        put(&mut out, bias);
                    }
                }
                _ => {}
            }
        }
        debug_assert_eq!(out.len(), self.serialized_len());
        Ok(out)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Model, ModelError> {
        Self::deserialize_with_capacity(bytes, DEFAULT_FRAM_BYTES)
    }

    /// Parses a model, rejecting images larger than `fram_capacity`.
    pub fn deserialize_with_capacity(bytes: &[u8], fram_capacity: usize) -> Result<Model, ModelError> {
        if bytes.len() < 4 {
            return Err(ModelError::TruncatedBlob { needed: HEADER_LEN, have: bytes.len() });
        }
        if bytes[..4] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(ModelError::TruncatedBlob { needed: HEADER_LEN, have: bytes.len() });
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
        let version = u16_at(4) as u16;
        if version != VERSION {
            return Err(ModelError::VersionMismatch { found: version, expected: VERSION });
        }
        let n = u16_at(6);
        let input = Shape3::new(u16_at(8), u16_at(10), u16_at(12));
        let desc_end = HEADER_LEN + n * DESC_LEN;
        if bytes.len() < desc_end {
            return Err(ModelError::TruncatedBlob { needed: desc_end, have: bytes.len() });
        }
        let descs: Vec<LayerDesc> = (0..n)
            .map(|i| LayerDesc::decode(i, &bytes[HEADER_LEN + i * DESC_LEN..HEADER_LEN + (i + 1) * DESC_LEN]))
            .collect::<Result<_, _>>()?;
        let declared = desc_end + descs.iter().map(LayerDesc::blob_total).sum::<usize>();
        if declared > fram_capacity {
            return Err(ModelError::ExceedsFram { bytes: declared, capacity: fram_capacity });
        }
        if bytes.len() < declared {
            return Err(ModelError::TruncatedBlob { needed: declared, have: bytes.len() });
        }
        if bytes.len() > declared {
            return Err(ModelError::TrailingBytes(bytes.len() - declared));
        }

        let mut off = desc_end;
        let mut take = |len: usize| {
            let s = &bytes[off..off + len];
            off += len;
            s
        };
        let q15s = |b: &[u8]| -> Vec<Q15> { b.chunks_exact(2).map(|c| Q15(i16::from_le_bytes([c[0], c[1]]))).collect() };
        let mut layers = Vec::with_capacity(n);
        let mut shape = input;
        for (i, d) in descs.iter().enumerate() {
            let dims = d.dims.map(|x| x as usize);
            let index_blob = take(d.index_bytes());
            let wblob = take(d.weight_bytes as usize);
            let bblob = take(d.bias_bytes as usize);
            let has_bias = d.flags & FLAG_BIAS != 0;
            if !has_bias && d.bias_bytes != 0 {
                return Err(mismatch(i, "bias blob present without bias flag"));
            }
            let bias = has_bias.then(|| q15s(bblob));
            let layer = match d.kind {
                LayerKind::Conv => {
                    let retained: Vec<u16> = if d.flags & FLAG_PRUNED != 0 {
                        index_blob.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
                    } else {
                        (0..dims[0] as u16).collect()
                    };
                    if retained.len() != d.retained as usize {
                        return Err(mismatch(i, "retained count disagrees with filter list"));
                    }
                    Layer::Conv(ConvLayer {
                        out_channels: dims[0],
                        in_channels: dims[1],
                        kh: dims[2],
                        kw: dims[3],
                        retained,
                        weights: q15s(wblob),
                        bias,
                        weight_exp: d.weight_exp,
                    })
                }
                LayerKind::FcDense => Layer::Dense(DenseLayer {
                    rows: dims[0],
                    cols: dims[1],
                    weights: q15s(wblob),
                    bias,
                    weight_exp: d.weight_exp,
                }),
                LayerKind::FcBcm => {
                    let k = d.k as usize;
                    let weights = if d.flags & FLAG_FREQ != 0 {
                        if k == 0 || wblob.len() % (4 * k + 2) != 0 {
                            return Err(mismatch(i, "frequency-domain blob length"));
                        }
                        BcmWeights::Freq(
                            wblob
                                .chunks_exact(4 * k + 2)
                                .map(|c| FreqBlock {
                                    spectrum: c[..4 * k]
                                        .chunks_exact(4)
                                        .map(|e| CQ15::new(i16::from_le_bytes([e[0], e[1]]), i16::from_le_bytes([e[2], e[3]])))
                                        .collect(),
                                    exp: i16::from_le_bytes([c[4 * k], c[4 * k + 1]]),
                                })
                                .collect(),
                        )
                    } else {
                        BcmWeights::Time(q15s(wblob))
                    };
                    Layer::Bcm(BcmLayer { rows: dims[0], cols: dims[1], k, weights, bias, weight_exp: d.weight_exp })
                }
                LayerKind::MaxPool => Layer::MaxPool,
                LayerKind::Relu => Layer::Relu,
            };
            if matches!(d.kind, LayerKind::MaxPool | LayerKind::Relu) && dims[..3] != [shape.c, shape.h, shape.w] {
                return Err(mismatch(i, "descriptor input dims disagree with the layer chain"));
            }
            let out = layer.output_shape(i, shape)?;
            let (ib, wb, bb) = layer.blob_sizes();
            if (ib, wb, bb) != (d.index_bytes(), d.weight_bytes as usize, d.bias_bytes as usize) {
                return Err(mismatch(i, "blob lengths disagree with layer shape"));
            }
            if out.len() != d.out_len as usize {
                return Err(mismatch(i, format!("declared {} outputs, shape gives {}", d.out_len, out.len())));
            }
            shape = out;
            layers.push(layer);
        }
        let m = Model { input, layers };
        m.validate()?;
        Ok(m)
    }
}

/// Storage accounting for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompressionEntry {
    pub original_bytes: u64,
    pub compressed_bytes: u64,
    /// Reduction in hundredths of a percent, truncated.
    pub reduction_bp: u64,
}

impl CompressionEntry {
    fn new(original: u64, compressed: u64) -> Self {
        let reduction_bp = if original == 0 { 0 } else { (original - compressed) * 10_000 / original };
        CompressionEntry { original_bytes: original, compressed_bytes: compressed, reduction_bp }
    }

    /// Exact reduction fraction.
    pub fn reduction(&self) -> f64 {
        if self.original_bytes == 0 {
            0.0
        } else {
            1.0 - self.compressed_bytes as f64 / self.original_bytes as f64
        }
    }

    /// Two decimals, truncated, e.g. `"96.87%"`.
    pub fn reduction_percent(&self) -> String {
        format!("{}.{:02}%", self.reduction_bp / 100, self.reduction_bp % 100)
    }

    /// Parameter reduction factor (original / compressed).
    pub fn factor(&self) -> f64 {
        if self.compressed_bytes == 0 {
            0.0
        } else {
            self.original_bytes as f64 / self.compressed_bytes as f64
        }
    }
}

pub fn compression_stats(desc: &LayerDesc, bytes_per_param: u64) -> CompressionEntry {
    let d = desc.dims.map(|x| x as u64);
    match desc.kind {
        LayerKind::FcBcm | LayerKind::FcDense => {
            let original = d[0] * d[1] * bytes_per_param;
            let k = if desc.kind == LayerKind::FcBcm { (desc.k as u64).max(1) } else { 1 };
            CompressionEntry::new(original, original / k)
        }
        LayerKind::Conv => {
            let per = d[1] * d[2] * d[3] * bytes_per_param;
            CompressionEntry::new(d[0] * per, desc.retained as u64 * per)
        }
        LayerKind::MaxPool | LayerKind::Relu => CompressionEntry::new(0, 0),
    }
}

/// Per-layer compression of a whole model.
pub fn compression_report(model: &Model, bytes_per_param: u64) -> Result<Vec<(LayerKind, CompressionEntry)>, ModelError> {
    Ok(model.descriptors()?.iter().map(|d| (d.kind, compression_stats(d, bytes_per_param))).collect())
}

/// Staging bytes a layer needs in the accelerator window.
pub fn staging_bytes(layer: &Layer) -> usize {
    match layer {
        Layer::Conv(c) => 2 * 2 * c.kernel_len(),
        Layer::Dense(d) => 2 * 2 * d.cols,
        Layer::Bcm(b) => crate::bcm_kernel::BcmStaging::new(0, b.k).bytes(),
        Layer::MaxPool | Layer::Relu => 0,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FitReport {
    pub fram_capacity: usize,
    pub fram_required: usize,
    pub model_bytes: usize,
    pub input_bytes: usize,
    /// Both ping-pong activation buffers.
    pub buffer_bytes: usize,
    pub checkpoint_bytes: usize,
    pub sram_capacity: usize,
    pub sram_required: usize,
    pub failures: Vec<String>,
}

impl FitReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn fram_margin(&self) -> i64 {
        self.fram_capacity as i64 - self.fram_required as i64
    }

    pub fn sram_margin(&self) -> i64 {
        self.sram_capacity as i64 - self.sram_required as i64
    }
}

/// Checks that a model, its activations and the checkpoint area fit the device.
pub fn validate_resource_fit(model: &Model, cfg: &DeviceConfig) -> FitReport {
    let mut failures = Vec::new();
    let sram_capacity = cfg.lea_capacity();
    if model.layers.is_empty() {
        return FitReport {
            fram_capacity: cfg.fram_bytes,
            fram_required: 0,
            model_bytes: 0,
            input_bytes: 0,
            buffer_bytes: 0,
            checkpoint_bytes: 0,
            sram_capacity,
            sram_required: 0,
            failures,
        };
    }
    let lens = match model.activation_lens() {
        Ok(l) => l,
        Err(e) => {
            failures.push(e.to_string());
            vec![0]
        }
    };
    let max_len = lens.iter().copied().max().unwrap_or(0);
    let max_k = model
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Bcm(b) => Some(b.k),
            _ => None,
        })
        .max();
    let model_bytes = model.serialized_len();
    let input_bytes = 2 * lens[0];
    let buffer_bytes = 2 * 2 * max_len;
    let checkpoint_bytes = crate::intermittent::checkpoint_area_bytes(max_k);
    let fram_required = model_bytes + input_bytes + buffer_bytes + checkpoint_bytes;
    if fram_required > cfg.fram_bytes {
        failures.push(format!("FRAM needs {fram_required} bytes, device has {}", cfg.fram_bytes));
    }
    let mut sram_required = 0;
    for (i, l) in model.layers.iter().enumerate() {
        let s = staging_bytes(l);
        sram_required = sram_required.max(s);
        if s > sram_capacity {
            failures.push(format!("layer {i} ({}) stages {s} bytes, accelerator window holds {sram_capacity}", l.kind().name()));
        }
        if let Layer::Bcm(b) = l {
            if check_fft_len(b.k).is_err() {
                failures.push(format!("layer {i}: block size {} unsupported by the FFT unit", b.k));
            }
        }
        if !matches!(l, Layer::Bcm(_)) && lens.get(i + 1).is_some_and(|&n| n > u16::MAX as usize) {
            failures.push(format!("layer {i}: too many outputs for the loop-index cursor"));
        }
    }
    FitReport {
        fram_capacity: cfg.fram_bytes,
        fram_required,
        model_bytes,
        input_bytes,
        buffer_bytes,
        checkpoint_bytes,
        sram_capacity,
        sram_required,
        failures,
    }
}
