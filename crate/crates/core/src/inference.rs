//! Dataflow engine: FRAM layout, ping-pong activation buffers and the layer
//! executors shared by continuous and intermittent runs.
//!
//! FRAM holds, in order: the serialized model image, the input tensor, the two
//! activation buffers and the checkpoint area. Layer `l` reads buffer A when
//! `l` is even and writes the other one, so the output of one layer is the input
//! of the next without a copy. Accelerator operands are staged in the SRAM
//! window; maxpool and ReLU run on the CPU straight from FRAM.

use thiserror::Error;

use crate::accel_sim::{mac_readout, Device, DeviceConfig, Loc, SimError};
use crate::bcm_kernel::{run_bcm_layer, BcmHook, BcmLayerCtx, BlockPoint, NoHook, Staged};
use crate::fxp::{quantize_q15, sat_add, OverflowFlag, Q15};
use crate::intermittent::CheckpointLayout;
use crate::memory_sim::{AllocTag, Allocation, FramAllocator, MemoryError};
use crate::model::{staging_bytes, BcmWeights, BlobOffsets, ConvLayer, DenseLayer, Layer, Model, ModelError, Shape3};

/// Outputs between two periodic cursor saves for maxpool and ReLU.
pub const CPU_LAYER_SAVE_PERIOD: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("layer {layer}: {what}")]
    ShapeMismatch { layer: usize, what: String },
    #[error("layer {layer}: staging needs {bytes} bytes, accelerator buffer holds {capacity}")]
    KernelTooLargeForAccelBuffer { layer: usize, bytes: usize, capacity: usize },
    #[error("layer {layer}: maxpool needs even spatial dims, got {h}x{w}")]
    OddDimension { layer: usize, h: usize, w: usize },
    #[error("input has {got} values, model expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("input line {line}: cannot parse {text:?}")]
    InputSyntax { line: usize, text: String },
    #[error("raw Q15 input must have an even byte count, got {0}")]
    OddInputBytes(usize),
    #[error(transparent)]
    Fram(#[from] MemoryError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// The two activation buffers, `elems` Q15 values each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferPair {
    pub a: usize,
    pub b: usize,
    pub elems: usize,
}

impl BufferPair {
    pub fn input_of(&self, layer: usize) -> Loc {
        Loc::fram(if layer % 2 == 0 { self.a } else { self.b })
    }

    pub fn output_of(&self, layer: usize) -> Loc {
        self.input_of(layer + 1)
    }
}

/// SRAM slices one layer stages for the accelerator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Staging {
    /// Kernel at `kernel`, flattened window at `window`.
    Conv { kernel: usize, window: usize, len: usize },
    Dense { x: usize, w: usize, len: usize },
    Bcm { base: usize, bytes: usize },
    CpuOnly,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataflowPlan {
    pub shapes: Vec<Shape3>,
    pub model_bytes: usize,
    pub blobs: Vec<BlobOffsets>,
    pub input: usize,
    pub buffers: BufferPair,
    pub checkpoint: CheckpointLayout,
    pub staging: Vec<Staging>,
    /// Global sequence number of each layer's first accelerator op; one extra
    /// entry holds the total.
    pub op_base: Vec<u64>,
    pub dma_threshold: usize,
    pub allocations: Vec<Allocation>,
    pub activation_high_water: usize,
}

impl DataflowPlan {
    pub fn total_ops(&self) -> u64 {
        *self.op_base.last().unwrap_or(&0)
    }

    pub fn output_loc(&self) -> Loc {
        let n = self.shapes.len() - 1;
        if n == 0 {
            Loc::fram(self.input)
        } else {
            self.buffers.output_of(n - 1)
        }
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.len())
    }
}

/// Accelerator ops a layer issues in a complete run.
pub fn layer_ops(layer: &Layer, out: Shape3) -> u64 {
    match layer {
        Layer::Conv(c) => (c.retained.len() * out.h * out.w) as u64,
        Layer::Dense(d) => d.rows as u64,
        Layer::Bcm(b) => {
            let per = if b.is_freq() { 4 } else { 5 };
            (b.p() * b.q()) as u64 * per
        }
        Layer::MaxPool | Layer::Relu => 0,
    }
}

/// Lays the model out in FRAM and fixes SRAM staging for every layer.
pub fn plan(model: &Model, cfg: &DeviceConfig) -> Result<DataflowPlan, InferenceError> {
    let mut s = model.input;
    for (i, l) in model.layers.iter().enumerate() {
        if matches!(l, Layer::MaxPool) && (s.h % 2 != 0 || s.w % 2 != 0) {
            return Err(InferenceError::OddDimension { layer: i, h: s.h, w: s.w });
        }
        s = l.output_shape(i, s)?;
    }
    model.validate()?;
    let shapes = model.shapes()?;
    let lea = cfg.lea_capacity();
    let mut staging = Vec::with_capacity(model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        let bytes = staging_bytes(l);
        if bytes > lea {
            return Err(InferenceError::KernelTooLargeForAccelBuffer { layer: i, bytes, capacity: lea });
        }
        staging.push(match l {
            Layer::Conv(c) => Staging::Conv { kernel: 0, window: 2 * c.kernel_len(), len: c.kernel_len() },
            Layer::Dense(d) => Staging::Dense { x: 0, w: 2 * d.cols, len: d.cols },
            Layer::Bcm(_) => Staging::Bcm { base: 0, bytes },
            Layer::MaxPool | Layer::Relu => Staging::CpuOnly,
        });
    }
    let mut op_base = Vec::with_capacity(model.layers.len() + 1);
    let mut acc = 0u64;
    for (i, l) in model.layers.iter().enumerate() {
        op_base.push(acc);
        acc += layer_ops(l, shapes[i + 1]);
    }
    op_base.push(acc);

    let max_elems = shapes.iter().map(|s| s.len()).max().unwrap_or(0);
    let max_k = model
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Bcm(b) => Some(b.k),
            _ => None,
        })
        .max();
    let mut fa = FramAllocator::new(cfg.fram_bytes);
    let model_bytes = model.serialized_len();
    let to_fit = |e: MemoryError| match e {
        MemoryError::FramFull { .. } => InferenceError::Model(ModelError::ExceedsFram {
            bytes: model_bytes + 2 * shapes[0].len() + 4 * max_elems + crate::intermittent::checkpoint_area_bytes(max_k),
            capacity: cfg.fram_bytes,
        }),
        other => InferenceError::Fram(other),
    };
    let image = fa.alloc(model_bytes, AllocTag::Model).map_err(to_fit)?;
    let input = fa.alloc(2 * shapes[0].len(), AllocTag::Input).map_err(to_fit)?;
    let a = fa.alloc(2 * max_elems, AllocTag::Activation).map_err(to_fit)?;
    let b = fa.alloc(2 * max_elems, AllocTag::Activation).map_err(to_fit)?;
    let area = fa.alloc(crate::intermittent::checkpoint_area_bytes(max_k), AllocTag::Checkpoint).map_err(to_fit)?;
    let blobs = model
        .blob_offsets()?
        .into_iter()
        .map(|o| BlobOffsets { index: image.offset + o.index, weights: image.offset + o.weights, bias: image.offset + o.bias })
        .collect();
    Ok(DataflowPlan {
        shapes,
        model_bytes,
        blobs,
        input: input.offset,
        buffers: BufferPair { a: a.offset, b: b.offset, elems: max_elems },
        checkpoint: CheckpointLayout::new(area.offset, max_k),
        staging,
        op_base,
        dma_threshold: cfg.cost.dma_threshold(),
        activation_high_water: fa.activation_high_water(),
        allocations: fa.allocations().to_vec(),
    })
}

/// Writes the model image and the input into FRAM and clears the checkpoint
/// area. Host-side, uncharged.
pub fn deploy(dev: &mut Device, model: &Model, plan: &DataflowPlan, input: &[Q15]) -> Result<(), InferenceError> {
    let expected = plan.shapes[0].len();
    if input.len() != expected {
        return Err(InferenceError::InputLength { expected, got: input.len() });
    }
    let image = model.serialize()?;
    dev.mem.fram.write(0, &image)?;
    let raw: Vec<i16> = input.iter().map(|q| q.0).collect();
    dev.mem.fram.write_i16s(plan.input, &raw)?;
    dev.mem.fram.write(plan.checkpoint.base, &vec![0u8; plan.checkpoint.bytes()])?;
    Ok(())
}

/// Engine callbacks beyond the BCM pipeline ones. Sequence numbers passed to
/// [`BcmHook::op_start`] are layer-relative.
pub trait ExecHook: BcmHook {
    fn enter_layer(&mut self, _dev: &mut Device, _layer: usize) {}
    fn input_loaded(&mut self, _dev: &mut Device) -> Result<(), SimError> {
        Ok(())
    }
    /// The first `done` outputs of the current non-BCM layer are final.
    /// `boundary` marks a periodic save point.
    fn progress(&mut self, _dev: &mut Device, _done: usize, _boundary: bool) -> Result<(), SimError> {
        Ok(())
    }
    fn layer_done(&mut self, _dev: &mut Device, _layer: usize) -> Result<(), SimError> {
        Ok(())
    }
}

impl ExecHook for NoHook {}

/// Where execution picks up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resume {
    Fresh,
    Layer { layer: usize, cursor: usize },
    Block { layer: usize, at: BlockPoint, staged: Staged },
}

/// Layer-relative index of the MAC op that produces conv output `cursor`.
pub fn conv_ops_before(c: &ConvLayer, per_filter: usize, cursor: usize) -> u64 {
    let f = cursor / per_filter;
    let full = c.retained.partition_point(|&r| (r as usize) < f);
    let partial = if c.retained_slot(f).is_some() { cursor % per_filter } else { 0 };
    (full * per_filter + partial) as u64
}

#[allow(clippy::too_many_arguments)]
fn conv_exec(
    dev: &mut Device,
    c: &ConvLayer,
    blob: &BlobOffsets,
    ins: Shape3,
    outs: Shape3,
    input: Loc,
    output: Loc,
    start: usize,
    hook: &mut dyn ExecHook,
) -> Result<OverflowFlag, SimError> {
    let klen = c.kernel_len();
    let (kern, win) = (0usize, 2 * klen);
    let per_filter = outs.h * outs.w;
    let total = outs.c * per_filter;
    let mut staged = None;
    let mut flag = OverflowFlag::CLEAN;
    for cur in start..total {
        let f = cur / per_filter;
        let (oy, ox) = ((cur % per_filter) / outs.w, cur % outs.w);
        let out = output.add_elems(cur);
        match c.retained_slot(f) {
            None => dev.cpu_store_one(out, 0)?,
            Some(slot) => {
                if staged != Some(f) {
                    dev.copy(Loc::fram(blob.weights).add_elems(slot * klen), Loc::sram(kern), klen)?;
                    staged = Some(f);
                }
                for ch in 0..c.in_channels {
                    for ky in 0..c.kh {
                        let src = input.add_elems(ch * ins.h * ins.w + (oy + ky) * ins.w + ox);
                        dev.copy(src, Loc::sram(win).add_elems((ch * c.kh + ky) * c.kw), c.kw)?;
                    }
                }
                let seq = conv_ops_before(c, per_filter, cur);
                hook.op_start(dev, seq);
                let acc = dev.lea_mac_wide(kern, win, klen)?;
                hook.op_done(dev, seq);
                let (mut v, fl) = mac_readout(acc, c.weight_exp as u32);
                flag |= fl;
                if c.bias.is_some() {
                    let b = dev.cpu_load_one(Loc::fram(blob.bias).add_elems(slot))?;
                    dev.cpu_ops(1)?;
                    let (s, fl) = sat_add(v, Q15(b));
                    flag |= fl;
                    v = s;
                }
                dev.cpu_store_one(out, v.0)?;
            }
        }
        hook.progress(dev, cur + 1, true)?;
    }
    Ok(flag)
}

#[allow(clippy::too_many_arguments)]
fn dense_exec(
    dev: &mut Device,
    d: &DenseLayer,
    blob: &BlobOffsets,
    input: Loc,
    output: Loc,
    start: usize,
    hook: &mut dyn ExecHook,
) -> Result<OverflowFlag, SimError> {
    let (xs, ws) = (0usize, 2 * d.cols);
    let mut flag = OverflowFlag::CLEAN;
    if start < d.rows {
        dev.copy(input, Loc::sram(xs), d.cols)?;
    }
    for r in start..d.rows {
        dev.copy(Loc::fram(blob.weights).add_elems(r * d.cols), Loc::sram(ws), d.cols)?;
        hook.op_start(dev, r as u64);
        let acc = dev.lea_mac_wide(ws, xs, d.cols)?;
        hook.op_done(dev, r as u64);
        let (mut v, fl) = mac_readout(acc, d.weight_exp as u32);
        flag |= fl;
        if d.bias.is_some() {
            let b = dev.cpu_load_one(Loc::fram(blob.bias).add_elems(r))?;
            dev.cpu_ops(1)?;
            let (s, fl) = sat_add(v, Q15(b));
            flag |= fl;
            v = s;
        }
        dev.cpu_store_one(output.add_elems(r), v.0)?;
        hook.progress(dev, r + 1, true)?;
    }
    Ok(flag)
}

fn boundary(done: usize, total: usize) -> bool {
    done % CPU_LAYER_SAVE_PERIOD == 0 || done == total
}

fn maxpool_exec(dev: &mut Device, ins: Shape3, input: Loc, output: Loc, start: usize, hook: &mut dyn ExecHook) -> Result<(), SimError> {
    let (oh, ow) = (ins.h / 2, ins.w / 2);
    let total = ins.c * oh * ow;
    for cur in start..total {
        let ch = cur / (oh * ow);
        let (oy, ox) = ((cur % (oh * ow)) / ow, cur % ow);
        let mut m = i16::MIN;
        for dy in 0..2 {
            let mut pair = [0i16; 2];
            dev.cpu_load(input.add_elems(ch * ins.h * ins.w + (2 * oy + dy) * ins.w + 2 * ox), &mut pair)?;
            m = m.max(pair[0]).max(pair[1]);
        }
        dev.cpu_ops(3)?;
        dev.cpu_store_one(output.add_elems(cur), m)?;
        hook.progress(dev, cur + 1, boundary(cur + 1, total))?;
    }
    Ok(())
}

fn relu_exec(dev: &mut Device, len: usize, input: Loc, output: Loc, start: usize, hook: &mut dyn ExecHook) -> Result<(), SimError> {
    for cur in start..len {
        let v = dev.cpu_load_one(input.add_elems(cur))?;
        dev.cpu_ops(1)?;
        dev.cpu_store_one(output.add_elems(cur), v.max(0))?;
        hook.progress(dev, cur + 1, boundary(cur + 1, len))?;
    }
    Ok(())
}

/// Runs the model on a deployed device from `resume` to the end and returns
/// the final layer's output (read back uncharged).
pub fn execute(
    dev: &mut Device,
    model: &Model,
    plan: &DataflowPlan,
    resume: Resume,
    hook: &mut dyn ExecHook,
) -> Result<(Vec<Q15>, OverflowFlag), SimError> {
    let (first, mut cursor, mut block) = match resume {
        Resume::Fresh => {
            if !model.layers.is_empty() {
                dev.copy(Loc::fram(plan.input), plan.buffers.input_of(0), plan.shapes[0].len())?;
            }
            hook.input_loaded(dev)?;
            (0, 0, None)
        }
        Resume::Layer { layer, cursor } => (layer, cursor, None),
        Resume::Block { layer, at, staged } => (layer, 0, Some((at, staged))),
    };
    let mut flag = OverflowFlag::CLEAN;
    for (l, layer) in model.layers.iter().enumerate().skip(first) {
        dev.ledger.set_layer(Some(l));
        hook.enter_layer(dev, l);
        let (ins, outs) = (plan.shapes[l], plan.shapes[l + 1]);
        let (input, output) = (plan.buffers.input_of(l), plan.buffers.output_of(l));
        let blob = &plan.blobs[l];
        match layer {
            Layer::Conv(c) => flag |= conv_exec(dev, c, blob, ins, outs, input, output, cursor, hook)?,
            Layer::Dense(d) => flag |= dense_exec(dev, d, blob, input, output, cursor, hook)?,
            Layer::Bcm(b) => {
                let ctx = BcmLayerCtx::new(b, blob.weights, Some(blob.bias), input, output);
                let (at, staged) = block.take().unwrap_or((BlockPoint::ORIGIN, Staged::default()));
                flag |= run_bcm_layer(dev, &ctx, at, staged, hook)?;
            }
            Layer::MaxPool => maxpool_exec(dev, ins, input, output, cursor, hook)?,
            Layer::Relu => relu_exec(dev, ins.len(), input, output, cursor, hook)?,
        }
        cursor = 0;
        hook.layer_done(dev, l)?;
    }
    dev.ledger.set_layer(None);
    let mut out = vec![0i16; plan.output_len()];
    let at = plan.output_loc();
    dev.mem.fram.read_i16s(at.offset, &mut out).map_err(SimError::from)?;
    Ok((out.into_iter().map(Q15).collect(), flag))
}

/// Result of a run on continuous power.
#[derive(Debug)]
pub struct InferenceRun {
    pub output: Vec<Q15>,
    pub flag: OverflowFlag,
    pub device: Device,
    pub plan: DataflowPlan,
}

impl InferenceRun {
    pub fn argmax(&self) -> usize {
        argmax(&self.output)
    }
}

/// Index of the largest score, first one on ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the whole model on a fresh device with continuous power.
pub fn run_inference(model: &Model, input: &[Q15], cfg: &DeviceConfig) -> Result<InferenceRun, InferenceError> {
    let plan = plan(model, cfg)?;
    let mut device = Device::new(cfg);
    deploy(&mut device, model, &plan, input)?;
    let (output, flag) = execute(&mut device, model, &plan, Resume::Fresh, &mut NoHook)?;
    Ok(InferenceRun { output, flag, device, plan })
}

fn single_layer(dev: &mut Device, layer: Layer, shape: Shape3, input: &[Q15]) -> Result<Vec<Q15>, InferenceError> {
    let model = Model { input: shape, layers: vec![layer] };
    let cfg = DeviceConfig {
        sram_bytes: dev.mem.sram.capacity(),
        fram_bytes: dev.mem.fram.capacity(),
        lea_bytes: dev.lea_bytes(),
        cost: dev.cost.clone(),
    };
    let plan = plan(&model, &cfg)?;
    deploy(dev, &model, &plan, input)?;
    Ok(execute(dev, &model, &plan, Resume::Fresh, &mut NoHook)?.0)
}

/// One convolution on `dev` (input placed uncharged, then copied in).
pub fn conv_layer(dev: &mut Device, layer: &ConvLayer, shape: Shape3, input: &[Q15]) -> Result<Vec<Q15>, InferenceError> {
    single_layer(dev, Layer::Conv(layer.clone()), shape, input)
}

pub fn maxpool(dev: &mut Device, shape: Shape3, input: &[Q15]) -> Result<Vec<Q15>, InferenceError> {
    single_layer(dev, Layer::MaxPool, shape, input)
}

pub fn relu(dev: &mut Device, shape: Shape3, input: &[Q15]) -> Result<Vec<Q15>, InferenceError> {
    single_layer(dev, Layer::Relu, shape, input)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    /// Little-endian i16 values.
    RawQ15,
    /// One decimal value per line, quantized on load. Blank lines and `#`
    /// comments are skipped.
    Text,
}

impl InputFormat {
    /// `.txt` and `.csv` files are text, anything else raw.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") | Some("csv") => InputFormat::Text,
            _ => InputFormat::RawQ15,
        }
    }
}

pub fn parse_input(bytes: &[u8], format: InputFormat) -> Result<Vec<Q15>, InferenceError> {
    match format {
        InputFormat::RawQ15 => {
            if bytes.len() % 2 != 0 {
                return Err(InferenceError::OddInputBytes(bytes.len()));
            }
            Ok(bytes.chunks_exact(2).map(|c| Q15(i16::from_le_bytes([c[0], c[1]]))).collect())
        }
        InputFormat::Text => {
            let text = String::from_utf8_lossy(bytes);
            let mut out = Vec::new();
            for (n, line) in text.lines().enumerate() {
                let t = line.split('#').next().unwrap_or("").trim();
                if t.is_empty() {
                    continue;
                }
                let v: f64 = t.parse().map_err(|_| InferenceError::InputSyntax { line: n + 1, text: t.to_string() })?;
                out.push(quantize_q15(v).0);
            }
            Ok(out)
        }
    }
}

pub fn encode_raw(input: &[Q15]) -> Vec<u8> {
    input.iter().flat_map(|q| q.0.to_le_bytes()).collect()
}

fn deq(v: &[Q15]) -> Vec<f64> {
    v.iter().map(|q| q.to_f64()).collect()
}

/// Time-domain defining vectors of a block-circulant layer, one per block,
/// as real values including the stored gain.
fn bcm_time_blocks(b: &crate::model::BcmLayer) -> Vec<Vec<f64>> {
    let k = b.k;
    match &b.weights {
        BcmWeights::Time(w) => w.chunks(k).map(deq).collect(),
        BcmWeights::Freq(blocks) => blocks
            .iter()
            .map(|fb| {
                // spectrum = DFT(w / k) * 2^exp, so w = k * IDFT(spectrum) * 2^-exp
                let g = k as f64 * 2f64.powi(-(fb.exp as i32));
                (0..k)
                    .map(|n| {
                        let mut re = 0.0;
                        for (m, c) in fb.spectrum.iter().enumerate() {
                            let a = 2.0 * std::f64::consts::PI * (m * n) as f64 / k as f64;
                            re += c.re.to_f64() * a.cos() - c.im.to_f64() * a.sin();
                        }
                        re / k as f64 * g
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Double-precision forward pass of a deployed model, used as the oracle for
/// the fixed-point engine.
pub fn reference_forward(model: &Model, input: &[f64]) -> Result<Vec<f64>, InferenceError> {
    let shapes = model.shapes()?;
    if input.len() != shapes[0].len() {
        return Err(InferenceError::InputLength { expected: shapes[0].len(), got: input.len() });
    }
    let mut x = input.to_vec();
    for (l, layer) in model.layers.iter().enumerate() {
        let (ins, outs) = (shapes[l], shapes[l + 1]);
        x = match layer {
            Layer::Conv(c) => {
                let gain = 2f64.powi(-(c.weight_exp as i32));
                let mut y = vec![0.0; outs.len()];
                for (slot, &f) in c.retained.iter().enumerate() {
                    let w = &c.weights[slot * c.kernel_len()..(slot + 1) * c.kernel_len()];
                    let b = c.bias.as_ref().map_or(0.0, |b| b[slot].to_f64());
                    for oy in 0..outs.h {
                        for ox in 0..outs.w {
                            let mut s = 0.0;
                            for ch in 0..c.in_channels {
                                for ky in 0..c.kh {
                                    for kx in 0..c.kw {
                                        s += w[(ch * c.kh + ky) * c.kw + kx].to_f64()
                                            * x[ch * ins.h * ins.w + (oy + ky) * ins.w + ox + kx];
                                    }
                                }
                            }
                            y[f as usize * outs.h * outs.w + oy * outs.w + ox] = s * gain + b;
                        }
                    }
                }
                y
            }
            Layer::Dense(d) => {
                let gain = 2f64.powi(-(d.weight_exp as i32));
                (0..d.rows)
                    .map(|r| {
                        let s: f64 = (0..d.cols).map(|c| d.weights[r * d.cols + c].to_f64() * x[c]).sum();
                        s * gain + d.bias.as_ref().map_or(0.0, |b| b[r].to_f64())
                    })
                    .collect()
            }
            Layer::Bcm(b) => {
                let gain = 2f64.powi(-(b.weight_exp as i32));
                let blocks = bcm_time_blocks(b);
                let (k, q) = (b.k, b.q());
                (0..b.rows)
                    .map(|r| {
                        let (i, rr) = (r / k, r % k);
                        let mut s = 0.0;
                        for j in 0..q {
                            let w = &blocks[i * q + j];
                            for c in 0..k {
                                s += w[(rr + k - c) % k] * x[j * k + c];
                            }
                        }
                        s * gain + b.bias.as_ref().map_or(0.0, |bb| bb[r].to_f64())
                    })
                    .collect()
            }
            Layer::MaxPool => {
                let (oh, ow) = (ins.h / 2, ins.w / 2);
                let mut y = vec![0.0; outs.len()];
                for ch in 0..ins.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let at = |dy: usize, dx: usize| x[ch * ins.h * ins.w + (2 * oy + dy) * ins.w + 2 * ox + dx];
                            y[ch * oh * ow + oy * ow + ox] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                        }
                    }
                }
                y
            }
            Layer::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accel_sim::OpKind;

    fn conv(f: usize, c: usize, k: usize, weights: Vec<Q15>) -> ConvLayer {
        ConvLayer {
            out_channels: f,
            in_channels: c,
            kh: k,
            kw: k,
            retained: (0..f as u16).collect(),
            weights,
            bias: None,
            weight_exp: 0,
        }
    }

    #[test]
    fn one_window_is_one_mac() {
        let mut dev = Device::new(&DeviceConfig::default());
        let layer = conv(1, 1, 3, vec![Q15(1000); 9]);
        let out = conv_layer(&mut dev, &layer, Shape3::new(1, 3, 3), &[Q15(3000); 9]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(dev.ledger.ops(OpKind::Mac), 1);
    }

    #[test]
    fn identity_kernel_crops() {
        let mut w = vec![Q15(0); 9];
        w[4] = Q15::MAX;
        let layer = conv(1, 1, 3, w);
        let input: Vec<Q15> = (0..25).map(|i| Q15(i * 100)).collect();
        let mut dev = Device::new(&DeviceConfig::default());
        let out = conv_layer(&mut dev, &layer, Shape3::new(1, 5, 5), &input).unwrap();
        // 32767/32768 scaling drops at most one LSB
        for (oy, row) in out.chunks(3).enumerate() {
            for (ox, v) in row.iter().enumerate() {
                let want = input[(oy + 1) * 5 + ox + 1].0;
                assert!((v.0 - want).abs() <= 1, "{} vs {}", v.0, want);
            }
        }
    }

    #[test]
    fn relu_and_pool_examples() {
        let mut dev = Device::new(&DeviceConfig::default());
        assert_eq!(relu(&mut dev, Shape3::new(2, 1, 1), &[Q15(-5), Q15(5)]).unwrap(), vec![Q15(0), Q15(5)]);
        let mut dev = Device::new(&DeviceConfig::default());
        assert_eq!(maxpool(&mut dev, Shape3::new(1, 4, 4), &[Q15(77); 16]).unwrap(), vec![Q15(77); 4]);
        let mut dev = Device::new(&DeviceConfig::default());
        assert!(matches!(
            maxpool(&mut dev, Shape3::new(1, 3, 4), &[Q15(1); 12]),
            Err(InferenceError::OddDimension { layer: 0, h: 3, w: 4 })
        ));
    }

    #[test]
    fn text_input() {
        let v = parse_input(b"0.5\n# c\n\n-1\n", InputFormat::Text).unwrap();
        assert_eq!(v, vec![Q15(16384), Q15(-32768)]);
        assert!(parse_input(b"x\n", InputFormat::Text).is_err());
        assert_eq!(parse_input(&[0, 0x40], InputFormat::RawQ15).unwrap(), vec![Q15(16384)]);
    }

    #[test]
    fn conv_op_index_skips_pruned() {
        let mut c = conv(4, 1, 1, vec![Q15(1); 2]);
        c.retained = vec![1, 3];
        assert_eq!(conv_ops_before(&c, 10, 0), 0);
        assert_eq!(conv_ops_before(&c, 10, 13), 3);
        assert_eq!(conv_ops_before(&c, 10, 25), 10);
        assert_eq!(conv_ops_before(&c, 10, 31), 11);
    }
}
