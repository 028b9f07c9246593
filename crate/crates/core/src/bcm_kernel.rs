//! Block-circulant FC layers computed through the FFT unit.
//!
//! Per block `(i, j)`: scale both operands down by `k`, complexify, forward
//! FFT each, normalize each spectrum to a shared block exponent, multiply
//! element-wise, inverse FFT (per-stage halving), take the real part and
//! scale up by `k * k * 2^-(ex + ew + weight_exp)`. Block outputs of a block
//! row are summed with saturating adds.
//!
//! The normalization step shifts a spectrum until its largest component
//! lies in `[2^13, 2^14)`. Without it the two `1/k` scale-downs leave too few
//! significant bits for `k >= 32`.
//!
//! Circulant orientation: block `C[r][c] = w[(r - c) mod k]`, i.e. `C x` is
//! the circular convolution of `w` and `x`.

use crate::accel_sim::{fft_in_place, Device, FftDirection, Loc, SimError};
use crate::fxp::{cq15_mul, round_shift, sat_add, saturate_into, OpSite, OverflowFlag, CQ15, Q15};
use crate::model::BcmLayer;

/// Divides every element by `length`, rounding half up.
pub fn scale_down(v: &[Q15], length: usize) -> Vec<Q15> {
    assert!(length > 0, "scale_down length must be positive");
    let l = length as i64;
    v.iter().map(|q| Q15((2 * q.0 as i64 + l).div_euclid(2 * l) as i16)).collect()
}

/// Multiplies every element by `len_i * len_w`, saturating.
pub fn scale_up(v: &[Q15], len_i: usize, len_w: usize) -> (Vec<Q15>, OverflowFlag) {
    scale_up_shifted(v, len_i, len_w, 0)
}

/// `raw * len_i * len_w * 2^-shift`, rounded half up and saturated.
pub fn scale_up_shifted(v: &[Q15], len_i: usize, len_w: usize, shift: i32) -> (Vec<Q15>, OverflowFlag) {
    let mut flag = OverflowFlag::CLEAN;
    let m = (len_i * len_w) as i64;
    let out = v
        .iter()
        .map(|q| {
            let p = q.0 as i64 * m;
            let r = if shift >= 0 { round_shift(p, shift as u32) } else { p << (-shift) as u32 };
            saturate_into(r, OpSite::Scale, &mut flag)
        })
        .collect();
    (out, flag)
}

pub fn complexify(v: &[Q15]) -> Vec<CQ15> {
    v.iter().map(|&q| CQ15::real(q)).collect()
}

pub fn take_real(v: &[CQ15]) -> Vec<Q15> {
    v.iter().map(|c| c.re).collect()
}

/// Shifts the spectrum so its largest component is in `[2^13, 2^14)` and
/// returns the applied left shift (negative for a right shift).
pub fn block_normalize(v: &mut [CQ15]) -> i16 {
    let max = v.iter().map(|c| (c.re.0 as i32).abs().max((c.im.0 as i32).abs())).max().unwrap_or(0);
    if max == 0 {
        return 0;
    }
    let msb = 31 - max.leading_zeros() as i32;
    let s = 13 - msb;
    if s == 0 {
        return 0;
    }
    for c in v.iter_mut() {
        for x in [&mut c.re, &mut c.im] {
            let r = x.0 as i64;
            let shifted = if s > 0 { r << s } else { round_shift(r, (-s) as u32) };
            *x = Q15(shifted as i16);
        }
    }
    s as i16
}

/// Normalized spectrum of one stored block, as computed on the device.
pub fn weight_spectrum(w: &[Q15]) -> (Vec<CQ15>, i16, OverflowFlag) {
    let k = w.len();
    let mut s = complexify(&scale_down(w, k));
    let flag = fft_in_place(&mut s, FftDirection::Forward).unwrap_or(OverflowFlag::at(OpSite::FftStage));
    let e = block_normalize(&mut s);
    (s, e, flag)
}

/// Host-side run of the block pipeline with the device's exact arithmetic.
pub fn block_matvec_pure(w: &[Q15], x: &[Q15], weight_exp: u8) -> Result<(Vec<Q15>, OverflowFlag), SimError> {
    let k = w.len();
    if x.len() != k {
        return Err(SimError::LengthMismatch(k, x.len()));
    }
    let mut xs = complexify(&scale_down(x, k));
    let mut flag = fft_in_place(&mut xs, FftDirection::Forward)?;
    let ex = block_normalize(&mut xs);
    let mut ws = complexify(&scale_down(w, k));
    flag |= fft_in_place(&mut ws, FftDirection::Forward)?;
    let ew = block_normalize(&mut ws);
    let mut p: Vec<CQ15> = xs
        .iter()
        .zip(&ws)
        .map(|(a, b)| {
            let (c, f) = cq15_mul(*a, *b);
            flag |= f;
            c
        })
        .collect();
    flag |= fft_in_place(&mut p, FftDirection::Inverse)?;
    let (y, f) = scale_up_shifted(&take_real(&p), k, k, ex as i32 + ew as i32 + weight_exp as i32);
    Ok((y, flag | f))
}

/// Pipeline progress markers for one block; `stage` names the last finished step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Stage {
    Start = 0,
    DmaInDone = 1,
    FftXDone = 2,
    FftWDone = 3,
    MpyDone = 4,
    IfftDone = 5,
    DmaOutDone = 6,
}

impl Stage {
    pub fn from_bits(b: u8) -> Option<Stage> {
        Some(match b {
            0 => Stage::Start,
            1 => Stage::DmaInDone,
            2 => Stage::FftXDone,
            3 => Stage::FftWDone,
            4 => Stage::MpyDone,
            5 => Stage::IfftDone,
            6 => Stage::DmaOutDone,
            _ => return None,
        })
    }
}

/// SRAM slots for one block pipeline, byte offsets from `base`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BcmStaging {
    pub base: usize,
    pub k: usize,
}

impl BcmStaging {
    pub fn new(base: usize, k: usize) -> Self {
        BcmStaging { base, k }
    }
    pub fn xv(&self) -> usize {
        self.base
    }
    pub fn wv(&self) -> usize {
        self.base + 4 * self.k
    }
    pub fn pv(&self) -> usize {
        self.base + 8 * self.k
    }
    /// Row accumulator, `k` reals.
    pub fn acc(&self) -> usize {
        self.base + 12 * self.k
    }
    /// Scaled block output, `k` reals.
    pub fn tmp(&self) -> usize {
        self.base + 14 * self.k
    }
    pub fn bytes(&self) -> usize {
        16 * self.k
    }
}

/// Where a block-circulant layer's data lives on the device.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BcmLayerCtx {
    pub k: usize,
    pub p: usize,
    pub q: usize,
    /// FRAM byte offset of the weight blob.
    pub weights: usize,
    pub freq: bool,
    pub weight_exp: u8,
    pub bias: Option<usize>,
    pub input: Loc,
    pub output: Loc,
    pub staging: BcmStaging,
}

impl BcmLayerCtx {
    pub fn new(layer: &BcmLayer, weights: usize, bias: Option<usize>, input: Loc, output: Loc) -> Self {
        BcmLayerCtx {
            k: layer.k,
            p: layer.p(),
            q: layer.q(),
            weights,
            freq: layer.is_freq(),
            weight_exp: layer.weight_exp,
            bias: if layer.bias.is_some() { bias } else { None },
            input,
            output,
            staging: BcmStaging::new(0, layer.k),
        }
    }

    /// Accelerator ops per block: two forward FFTs (one when the weight
    /// spectrum is stored), MPY, IFFT, ADD.
    pub fn ops_per_block(&self) -> u64 {
        if self.freq {
            4
        } else {
            5
        }
    }

    pub fn total_ops(&self) -> u64 {
        (self.p * self.q) as u64 * self.ops_per_block()
    }

    /// Layer-relative sequence number of the `n`-th op of block `(i, j)`.
    pub fn op_seq(&self, i: usize, j: usize, n: u64) -> u64 {
        (i * self.q + j) as u64 * self.ops_per_block() + n
    }

    /// Ops completed once block `(i, j)` has reached `stage`.
    pub fn ops_done(&self, i: usize, j: usize, stage: Stage) -> u64 {
        let within = match stage {
            Stage::Start | Stage::DmaInDone => 0,
            Stage::FftXDone => 1,
            Stage::FftWDone => {
                if self.freq {
                    1
                } else {
                    2
                }
            }
            Stage::MpyDone => self.ops_per_block() - 2,
            Stage::IfftDone => self.ops_per_block() - 1,
            Stage::DmaOutDone => self.ops_per_block(),
        };
        self.op_seq(i, j, within)
    }

    fn weight_block_fram(&self, i: usize, j: usize) -> usize {
        let b = i * self.q + j;
        if self.freq {
            self.weights + b * (4 * self.k + 2)
        } else {
            self.weights + b * 2 * self.k
        }
    }
}

/// Position inside a block-circulant layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPoint {
    pub i: usize,
    pub j: usize,
    pub stage: Stage,
    pub ex: i16,
    pub ew: i16,
}

impl BlockPoint {
    pub const ORIGIN: BlockPoint = BlockPoint { i: 0, j: 0, stage: Stage::Start, ex: 0, ew: 0 };
}

/// Which SRAM slots currently hold valid data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Staged {
    pub x_time: bool,
    pub w_time: bool,
    pub x_spec: bool,
    pub w_spec: bool,
    pub product: bool,
    pub y: bool,
    pub acc: bool,
}

/// Callbacks from the block pipeline; the checkpointing engine persists state here.
pub trait BcmHook {
    fn op_start(&mut self, _dev: &mut Device, _layer_seq: u64) {}
    fn op_done(&mut self, _dev: &mut Device, _layer_seq: u64) {}
    /// `at.stage` has just finished for block `(at.i, at.j)`.
    fn stage_done(&mut self, _dev: &mut Device, _ctx: &BcmLayerCtx, _at: &BlockPoint) -> Result<(), SimError> {
        Ok(())
    }
    /// Block row `i` has been written to the output buffer.
    fn row_done(&mut self, _dev: &mut Device, _ctx: &BcmLayerCtx, _i: usize) -> Result<(), SimError> {
        Ok(())
    }
}

pub struct NoHook;
impl BcmHook for NoHook {}

fn cpu_fn(dev: &mut Device, src: usize, n_in: usize, dst: usize, f: impl FnOnce(&[i16]) -> Vec<i16>) -> Result<(), SimError> {
    let mut v = vec![0i16; n_in];
    dev.cpu_load(Loc::sram(src), &mut v)?;
    let out = f(&v);
    dev.cpu_store(Loc::sram(dst), &out)
}

fn to_q15(v: &[i16]) -> Vec<Q15> {
    v.iter().map(|&x| Q15(x)).collect()
}

fn interleave(v: &[CQ15]) -> Vec<i16> {
    v.iter().flat_map(|c| [c.re.0, c.im.0]).collect()
}

fn deinterleave(v: &[i16]) -> Vec<CQ15> {
    v.chunks_exact(2).map(|c| CQ15::new(c[0], c[1])).collect()
}

/// Stages an FRAM operand as its scaled-down complex form in `dst`.
fn stage_scaled(dev: &mut Device, ctx: &BcmLayerCtx, src: Loc, dst: usize) -> Result<(), SimError> {
    let k = ctx.k;
    let tmp = ctx.staging.tmp();
    dev.copy(src, Loc::sram(tmp), k)?;
    cpu_fn(dev, tmp, k, dst, |v| interleave(&complexify(&scale_down(&to_q15(v), k))))
}

fn normalize_on_cpu(dev: &mut Device, off: usize, k: usize) -> Result<i16, SimError> {
    let mut raw = vec![0i16; 2 * k];
    dev.cpu_load(Loc::sram(off), &mut raw)?;
    dev.cpu_ops(2 * k)?;
    let mut c = deinterleave(&raw);
    let e = block_normalize(&mut c);
    dev.cpu_store(Loc::sram(off), &interleave(&c))?;
    Ok(e)
}

/// Runs a block-circulant layer from `start` to completion.
pub fn run_bcm_layer(
    dev: &mut Device,
    ctx: &BcmLayerCtx,
    start: BlockPoint,
    staged: Staged,
    hook: &mut dyn BcmHook,
) -> Result<OverflowFlag, SimError> {
    let k = ctx.k;
    let s = ctx.staging;
    let mut at = start;
    let mut st = staged;
    let mut flag = OverflowFlag::CLEAN;
    while at.i < ctx.p {
        let (i, j) = (at.i, at.j);
        let x_src = ctx.input.add_elems(j * k);
        let w_src = Loc::fram(ctx.weight_block_fram(i, j));
        match at.stage {
            Stage::Start => {
                stage_scaled(dev, ctx, x_src, s.xv())?;
                st.x_time = true;
                if !ctx.freq {
                    stage_scaled(dev, ctx, w_src, s.wv())?;
                    st.w_time = true;
                }
                at.stage = Stage::DmaInDone;
                hook.stage_done(dev, ctx, &at)?;
            }
            Stage::DmaInDone => {
                if !st.x_time {
                    stage_scaled(dev, ctx, x_src, s.xv())?;
                }
                let seq = ctx.op_seq(i, j, 0);
                hook.op_start(dev, seq);
                flag |= dev.lea_fft(s.xv(), k, FftDirection::Forward)?;
                hook.op_done(dev, seq);
                at.ex = normalize_on_cpu(dev, s.xv(), k)?;
                st.x_time = false;
                st.x_spec = true;
                at.stage = Stage::FftXDone;
                hook.stage_done(dev, ctx, &at)?;
            }
            Stage::FftXDone => {
                if ctx.freq {
                    dev.copy(w_src, Loc::sram(s.wv()), 2 * k)?;
                    at.ew = dev.cpu_load_one(w_src.add_elems(2 * k))?;
                } else {
                    if !st.w_time {
                        stage_scaled(dev, ctx, w_src, s.wv())?;
                    }
                    let seq = ctx.op_seq(i, j, 1);
                    hook.op_start(dev, seq);
                    flag |= dev.lea_fft(s.wv(), k, FftDirection::Forward)?;
                    hook.op_done(dev, seq);
                    at.ew = normalize_on_cpu(dev, s.wv(), k)?;
                }
                st.w_time = false;
                st.w_spec = true;
                at.stage = Stage::FftWDone;
                hook.stage_done(dev, ctx, &at)?;
            }
            Stage::FftWDone => {
                debug_assert!(st.x_spec && st.w_spec, "spectra must be staged before MPY");
                let seq = ctx.op_seq(i, j, ctx.ops_per_block() - 3);
                hook.op_start(dev, seq);
                flag |= dev.lea_mpy(s.xv(), s.wv(), s.pv(), k)?;
                hook.op_done(dev, seq);
                st.product = true;
                at.stage = Stage::MpyDone;
                hook.stage_done(dev, ctx, &at)?;
            }
            Stage::MpyDone => {
                debug_assert!(st.product);
                let seq = ctx.op_seq(i, j, ctx.ops_per_block() - 2);
                hook.op_start(dev, seq);
                flag |= dev.lea_fft(s.pv(), k, FftDirection::Inverse)?;
                hook.op_done(dev, seq);
                let shift = at.ex as i32 + at.ew as i32 + ctx.weight_exp as i32;
                let mut f = OverflowFlag::CLEAN;
                cpu_fn(dev, s.pv(), 2 * k, s.tmp(), |v| {
                    let re: Vec<Q15> = v.iter().step_by(2).map(|&x| Q15(x)).collect();
                    let (y, fl) = scale_up_shifted(&re, k, k, shift);
                    f = fl;
                    y.iter().map(|q| q.0).collect()
                })?;
                flag |= f;
                st.y = true;
                at.stage = Stage::IfftDone;
                hook.stage_done(dev, ctx, &at)?;
            }
            Stage::IfftDone => {
                debug_assert!(st.y);
                if j == 0 {
                    dev.cpu_store(Loc::sram(s.acc()), &vec![0i16; k])?;
                } else {
                    debug_assert!(st.acc, "row accumulator must be staged");
                }
                let seq = ctx.op_seq(i, j, ctx.ops_per_block() - 1);
                hook.op_start(dev, seq);
                flag |= dev.lea_add(s.acc(), s.tmp(), s.acc(), k)?;
                hook.op_done(dev, seq);
                st.acc = true;
                at.stage = Stage::DmaOutDone;
                hook.stage_done(dev, ctx, &at)?;
            }
            Stage::DmaOutDone => {
                if j + 1 == ctx.q {
                    let out = ctx.output.add_elems(i * k);
                    match ctx.bias {
                        Some(b) => {
                            let mut acc = vec![0i16; k];
                            let mut bias = vec![0i16; k];
                            dev.cpu_load(Loc::sram(s.acc()), &mut acc)?;
                            dev.cpu_load(Loc::fram(b).add_elems(i * k), &mut bias)?;
                            dev.cpu_ops(k)?;
                            let sum: Vec<i16> = acc
                                .iter()
                                .zip(&bias)
                                .map(|(a, b)| {
                                    let (v, f) = sat_add(Q15(*a), Q15(*b));
                                    flag |= f;
                                    v.0
                                })
                                .collect();
                            dev.cpu_store(out, &sum)?;
                        }
                        None => dev.copy(Loc::sram(s.acc()), out, k)?,
                    }
                    hook.row_done(dev, ctx, i)?;
                    at = BlockPoint { i: i + 1, ..BlockPoint::ORIGIN };
                    st = Staged::default();
                } else {
                    at = BlockPoint { i, j: j + 1, ..BlockPoint::ORIGIN };
                    st = Staged { acc: true, ..Staged::default() };
                }
            }
        }
    }
    Ok(flag)
}

/// The same layer with every block replaced by its normalized spectrum, as
/// the device would compute it.
pub fn to_frequency_domain(layer: &BcmLayer) -> BcmLayer {
    let weights = match &layer.weights {
        crate::model::BcmWeights::Time(w) => crate::model::BcmWeights::Freq(
            w.chunks(layer.k)
                .map(|b| {
                    let (spectrum, exp, _) = weight_spectrum(b);
                    crate::model::FreqBlock { spectrum, exp }
                })
                .collect(),
        ),
        f => f.clone(),
    };
    BcmLayer { weights, ..layer.clone() }
}

/// Places `vals` at an FRAM location without charging (host-side deployment).
pub fn deploy(dev: &mut Device, loc: Loc, vals: &[Q15]) -> Result<(), SimError> {
    let raw: Vec<i16> = vals.iter().map(|q| q.0).collect();
    dev.mem.region_mut(loc.kind).write_i16s(loc.offset, &raw)?;
    Ok(())
}

/// One block product `C x` on a fresh device region. Output stays in the
/// staging `tmp` slot of a 1x1 layer and is returned.
pub fn bcm_block_matvec(dev: &mut Device, w: &[Q15], x: &[Q15], weight_exp: u8) -> Result<(Vec<Q15>, OverflowFlag), SimError> {
    let k = w.len();
    if x.len() != k {
        return Err(SimError::LengthMismatch(k, x.len()));
    }
    let layer = BcmLayer {
        rows: k,
        cols: k,
        k,
        weights: crate::model::BcmWeights::Time(w.to_vec()),
        bias: None,
        weight_exp,
    };
    bcm_fc_layer(dev, &layer, x)
}

/// Runs a whole block-circulant layer on the device and returns its output.
/// Weights and input are placed in FRAM first (uncharged).
pub fn bcm_fc_layer(dev: &mut Device, layer: &BcmLayer, input: &[Q15]) -> Result<(Vec<Q15>, OverflowFlag), SimError> {
    if input.len() != layer.cols || layer.k == 0 || layer.rows % layer.k != 0 || layer.cols % layer.k != 0 {
        return Err(SimError::LengthMismatch(layer.cols, input.len()));
    }
    let wbytes = match &layer.weights {
        crate::model::BcmWeights::Time(w) => {
            deploy(dev, Loc::fram(0), w)?;
            2 * w.len()
        }
        crate::model::BcmWeights::Freq(blocks) => {
            let mut off = 0;
            for b in blocks {
                let mut raw = interleave(&b.spectrum);
                raw.push(b.exp);
                dev.mem.fram.write_i16s(off, &raw)?;
                off += 2 * raw.len();
            }
            off
        }
    };
    let bias_at = wbytes;
    let mut after = bias_at;
    if let Some(b) = &layer.bias {
        deploy(dev, Loc::fram(bias_at), b)?;
        after += 2 * b.len();
    }
    let input_at = Loc::fram(after);
    deploy(dev, input_at, input)?;
    let output_at = input_at.add_elems(input.len());
    dev.mem.fram.check(output_at.offset, 2 * layer.rows)?;
    let ctx = BcmLayerCtx::new(layer, 0, Some(bias_at), input_at, output_at);
    let flag = run_bcm_layer(dev, &ctx, BlockPoint::ORIGIN, Staged::default(), &mut NoHook)?;
    let mut out = vec![0i16; layer.rows];
    dev.mem.fram.read_i16s(output_at.offset, &mut out)?;
    Ok((to_q15(&out), flag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_examples() {
        assert_eq!(scale_down(&[Q15(32767); 8], 8), vec![Q15(4096); 8]);
        assert_eq!(scale_down(&[Q15(-5), Q15(7)], 1), vec![Q15(-5), Q15(7)]);
        // half-up on ties: -3/2 = -1.5 -> -1, 3/2 -> 2
        assert_eq!(scale_down(&[Q15(-3), Q15(3)], 2), vec![Q15(-1), Q15(2)]);
        assert_eq!(scale_up(&[Q15(2)], 4, 4), (vec![Q15(32)], OverflowFlag::CLEAN));
        assert_eq!(scale_up(&[Q15(4096)], 4, 4), (vec![Q15(32767)], OverflowFlag::at(OpSite::Scale)));
    }

    #[test]
    fn normalize_range() {
        let mut v = vec![CQ15::new(3, -100), CQ15::new(7, 0)];
        let e = block_normalize(&mut v);
        assert_eq!(e, 7);
        assert_eq!(v[0].im.0, -12800);
        let mut big = vec![CQ15::new(30000, 0)];
        assert_eq!(block_normalize(&mut big), -1);
        assert_eq!(big[0].re.0, 15000);
        let mut z = vec![CQ15::ZERO; 4];
        assert_eq!(block_normalize(&mut z), 0);
    }

    #[test]
    fn device_matches_pure_pipeline() {
        let w: Vec<Q15> = (0..16).map(|i| Q15(((i * 7919) % 6000 - 3000) as i16)).collect();
        let x: Vec<Q15> = (0..16).map(|i| Q15(((i * 104729) % 20000 - 10000) as i16)).collect();
        let mut dev = Device::new(&Default::default());
        let (a, fa) = bcm_block_matvec(&mut dev, &w, &x, 1).unwrap();
        let (b, fb) = block_matvec_pure(&w, &x, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(fa, fb);
    }
}
