//! Intermittent execution: harvested power, failure injection and
//! checkpointing.
//!
//! Checkpoint area layout (FRAM, word granular):
//!
//! ```text
//! record slot 0 | record slot 1 | payload slot 0 .. payload slot 4
//! ```
//!
//! A record is 16 words: state (bits 0-2 stage, bit 3 commit), seq (u32),
//! layer, block i, block j, cursor, ex, ew, then payload refs x, w, p, y, acc
//! (`0xFFFF` for none). A commit first writes the payload into a slot the
//! current record does not reference, then the state word with the commit bit
//! clear, then the body, then the state word with the commit bit set. The
//! valid record with the higher seq wins at restore, so a torn write falls
//! back to the previous one. The cursor word of the live record is updated in
//! place for non-BCM layers; a single word write is atomic.

use std::any::Any;

use serde::Serialize;
use thiserror::Error;

use crate::accel_sim::{Component, Device, DeviceConfig, Draw, Event, Loc, OpKind, PowerStatus, SimError, Supply};
use crate::bcm_kernel::{BcmHook, BcmLayerCtx, BlockPoint, Stage, Staged};
use crate::fxp::{OverflowFlag, Q15};
use crate::inference::{deploy, execute, plan, DataflowPlan, ExecHook, InferenceError, Resume};
use crate::model::{Layer, Model};

pub const RECORD_WORDS: usize = 16;
pub const RECORD_BYTES: usize = 2 * RECORD_WORDS;
pub const PAYLOAD_SLOTS: usize = 5;
pub const COMMIT_BIT: u16 = 1 << 3;
const STAGE_MASK: u16 = 0b111;
const NO_REF: u16 = 0xFFFF;
const W_STATE: usize = 0;
const W_CURSOR: usize = 6;

/// FRAM bytes of the checkpoint area for a model whose largest block size is
/// `max_k` (`None` without block-circulant layers).
pub fn checkpoint_area_bytes(max_k: Option<usize>) -> usize {
    2 * RECORD_BYTES + max_k.map_or(0, |k| PAYLOAD_SLOTS * 4 * k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointLayout {
    pub base: usize,
    pub slot_bytes: usize,
}

impl CheckpointLayout {
    pub fn new(base: usize, max_k: Option<usize>) -> Self {
        CheckpointLayout { base, slot_bytes: max_k.map_or(0, |k| 4 * k) }
    }

    pub fn record(&self, r: usize) -> Loc {
        Loc::fram(self.base + r * RECORD_BYTES)
    }

    pub fn slot(&self, s: usize) -> Loc {
        Loc::fram(self.base + 2 * RECORD_BYTES + s * self.slot_bytes)
    }

    pub fn slots(&self) -> usize {
        if self.slot_bytes == 0 {
            0
        } else {
            PAYLOAD_SLOTS
        }
    }

    pub fn bytes(&self) -> usize {
        2 * RECORD_BYTES + self.slots() * self.slot_bytes
    }
}

/// Persisted intermediate vectors a record points at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Refs {
    pub x: Option<u16>,
    pub w: Option<u16>,
    pub p: Option<u16>,
    pub y: Option<u16>,
    pub acc: Option<u16>,
}

impl Refs {
    fn all(&self) -> [Option<u16>; 5] {
        [self.x, self.w, self.p, self.y, self.acc]
    }

    pub fn uses(&self, slot: u16) -> bool {
        self.all().contains(&Some(slot))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointRecord {
    pub seq: u32,
    pub layer: u16,
    pub i: u16,
    pub j: u16,
    pub stage: Stage,
    pub cursor: u16,
    pub ex: i16,
    pub ew: i16,
    pub refs: Refs,
}

impl CheckpointRecord {
    pub fn layer_start(layer: usize) -> Self {
        CheckpointRecord {
            seq: 0,
            layer: layer as u16,
            i: 0,
            j: 0,
            stage: Stage::Start,
            cursor: 0,
            ex: 0,
            ew: 0,
            refs: Refs::default(),
        }
    }

    pub fn encode(&self, commit: bool) -> [i16; RECORD_WORDS] {
        let r = |o: Option<u16>| o.unwrap_or(NO_REF);
        let state = self.stage as u16 | if commit { COMMIT_BIT } else { 0 };
        let w: [u16; RECORD_WORDS] = [
            state,
            self.seq as u16,
            (self.seq >> 16) as u16,
            self.layer,
            self.i,
            self.j,
            self.cursor,
            self.ex as u16,
            self.ew as u16,
            r(self.refs.x),
            r(self.refs.w),
            r(self.refs.p),
            r(self.refs.y),
            r(self.refs.acc),
            0,
            0,
        ];
        w.map(|v| v as i16)
    }

    /// `None` unless the commit bit is set and the stage is known.
    pub fn decode(words: &[i16; RECORD_WORDS]) -> Option<Self> {
        let w = words.map(|v| v as u16);
        if w[W_STATE] & COMMIT_BIT == 0 || w[W_STATE] & !(COMMIT_BIT | STAGE_MASK) != 0 {
            return None;
        }
        let stage = Stage::from_bits((w[W_STATE] & STAGE_MASK) as u8)?;
        let r = |v: u16| (v != NO_REF).then_some(v);
        Some(CheckpointRecord {
            seq: w[1] as u32 | (w[2] as u32) << 16,
            layer: w[3],
            i: w[4],
            j: w[5],
            stage,
            cursor: w[W_CURSOR],
            ex: w[7] as i16,
            ew: w[8] as i16,
            refs: Refs { x: r(w[9]), w: r(w[10]), p: r(w[11]), y: r(w[12]), acc: r(w[13]) },
        })
    }

    /// `(filter, row, col)` of a conv cursor for an output of `h x w` planes.
    pub fn loop_indices(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let c = self.cursor as usize;
        (c / (h * w), (c % (h * w)) / w, c % w)
    }

    /// Progress key, non-decreasing along an execution.
    pub fn position(&self) -> (u16, u16, u16, Stage, u16) {
        (self.layer, self.i, self.j, self.stage, self.cursor)
    }
}

/// Checkpoint energy bookkeeping (host-side instrumentation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CheckpointStats {
    pub commits: u64,
    pub cursor_saves: u64,
    pub max_checkpoint_fj: u64,
    pub checkpoint_fj: u64,
    pub restores: u64,
    pub restore_fj: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PayloadKind {
    X,
    W,
    P,
    Y,
    Acc,
}

/// Writes and reads checkpoint records. Device state lives in FRAM; the host
/// copy of the live record is rebuilt on every [`Checkpointer::restore`].
#[derive(Clone, Debug)]
pub struct Checkpointer {
    pub layout: CheckpointLayout,
    latest: Option<(usize, CheckpointRecord)>,
    next_seq: u32,
    pub stats: CheckpointStats,
    began_fj: u64,
}

impl Checkpointer {
    pub fn new(layout: CheckpointLayout) -> Self {
        Checkpointer { layout, latest: None, next_seq: 1, stats: CheckpointStats::default(), began_fj: 0 }
    }

    pub fn latest(&self) -> Option<&CheckpointRecord> {
        self.latest.as_ref().map(|(_, r)| r)
    }

    fn begin(&mut self, dev: &mut Device) {
        self.began_fj = dev.ledger.component(Component::Checkpoint).energy_fj;
        dev.set_attribution(Some(Component::Checkpoint));
        let units = dev.units();
        dev.record(Event::CheckpointBegin { units });
    }

    fn end(&mut self, dev: &mut Device) -> u64 {
        dev.set_attribution(None);
        let spent = dev.ledger.component(Component::Checkpoint).energy_fj - self.began_fj;
        self.stats.checkpoint_fj += spent;
        self.stats.max_checkpoint_fj = self.stats.max_checkpoint_fj.max(spent);
        spent
    }

    fn free_slot(&self) -> u16 {
        let live = self.latest.map(|(_, r)| r.refs).unwrap_or_default();
        (0..self.layout.slots() as u16).find(|&s| !live.uses(s)).expect("a free payload slot always exists")
    }

    fn write_record(&mut self, dev: &mut Device, mut rec: CheckpointRecord) -> Result<(), SimError> {
        let slot = self.latest.map_or(0, |(s, _)| 1 - s);
        rec.seq = self.next_seq;
        let at = self.layout.record(slot);
        let words = rec.encode(true);
        dev.cpu_store_one(at, words[W_STATE] & !(COMMIT_BIT as i16))?;
        dev.cpu_store(at.add_elems(1), &words[1..])?;
        dev.cpu_store_one(at, words[W_STATE])?;
        self.latest = Some((slot, rec));
        self.next_seq += 1;
        self.stats.commits += 1;
        let units = dev.units();
        dev.record(Event::Commit { layer: rec.layer, block_i: rec.i, block_j: rec.j, stage: rec.stage as u8, units });
        Ok(())
    }

    /// Persists `payload` (SRAM offset, element count) if given, then commits
    /// `rec` with the new payload slot filled in.
    fn commit(
        &mut self,
        dev: &mut Device,
        mut rec: CheckpointRecord,
        payload: Option<(PayloadKind, usize, usize)>,
    ) -> Result<Option<u16>, SimError> {
        self.begin(dev);
        let mut written = None;
        if let Some((kind, off, n)) = payload {
            let s = self.free_slot();
            dev.copy(Loc::sram(off), self.layout.slot(s as usize), n)?;
            match kind {
                PayloadKind::X => rec.refs.x = Some(s),
                PayloadKind::W => rec.refs.w = Some(s),
                PayloadKind::P => rec.refs.p = Some(s),
                PayloadKind::Y => rec.refs.y = Some(s),
                PayloadKind::Acc => rec.refs.acc = Some(s),
            }
            written = Some(s);
        }
        self.write_record(dev, rec)?;
        self.end(dev);
        Ok(written)
    }

    pub fn commit_layer_start(&mut self, dev: &mut Device, layer: usize) -> Result<(), SimError> {
        self.commit(dev, CheckpointRecord::layer_start(layer), None).map(|_| ())
    }

    /// Updates the loop-index cursor of the live record in place.
    pub fn save_cursor(&mut self, dev: &mut Device, cursor: usize) -> Result<(), SimError> {
        let Some((slot, rec)) = self.latest.as_mut() else {
            return Ok(());
        };
        let at = self.layout.record(*slot).add_elems(W_CURSOR);
        let layer = rec.layer;
        self.began_fj = dev.ledger.component(Component::Checkpoint).energy_fj;
        dev.set_attribution(Some(Component::Checkpoint));
        dev.cpu_store_one(at, cursor as u16 as i16)?;
        rec.cursor = cursor as u16;
        self.stats.cursor_saves += 1;
        self.end(dev);
        let units = dev.units();
        dev.record(Event::CursorSaved { layer, cursor: cursor as u16, units });
        Ok(())
    }

    /// Reads both record slots and adopts the newest committed one.
    pub fn restore(&mut self, dev: &mut Device) -> Result<Option<CheckpointRecord>, SimError> {
        let before = dev.ledger.component(Component::Checkpoint).energy_fj;
        dev.set_attribution(Some(Component::Checkpoint));
        let mut best: Option<(usize, CheckpointRecord)> = None;
        for s in 0..2 {
            let mut w = [0i16; RECORD_WORDS];
            dev.cpu_load(self.layout.record(s), &mut w)?;
            if let Some(r) = CheckpointRecord::decode(&w) {
                if best.is_none_or(|(_, b)| r.seq > b.seq) {
                    best = Some((s, r));
                }
            }
        }
        dev.set_attribution(None);
        self.latest = best;
        self.next_seq = best.map_or(1, |(_, r)| r.seq + 1);
        self.stats.restore_fj += dev.ledger.component(Component::Checkpoint).energy_fj - before;
        Ok(best.map(|(_, r)| r))
    }

    /// Copies a payload slot back into SRAM.
    fn load(&mut self, dev: &mut Device, slot: u16, dst: usize, n: usize) -> Result<(), SimError> {
        let before = dev.ledger.component(Component::Checkpoint).energy_fj;
        dev.set_attribution(Some(Component::Checkpoint));
        dev.copy(self.layout.slot(slot as usize), Loc::sram(dst), n)?;
        dev.set_attribution(None);
        self.stats.restore_fj += dev.ledger.component(Component::Checkpoint).energy_fj - before;
        Ok(())
    }

    /// Turns a restored record into a resume point, reloading persisted
    /// vectors into the staging slots.
    pub fn resume_point(&mut self, dev: &mut Device, model: &Model, plan: &DataflowPlan, rec: &CheckpointRecord) -> Result<Resume, SimError> {
        let layer = rec.layer as usize;
        let Some(Layer::Bcm(b)) = model.layers.get(layer) else {
            return Ok(Resume::Layer { layer, cursor: rec.cursor as usize });
        };
        let ctx = BcmLayerCtx::new(b, plan.blobs[layer].weights, Some(plan.blobs[layer].bias), plan.buffers.input_of(layer), plan.buffers.output_of(layer));
        let (k, s) = (ctx.k, ctx.staging);
        let mut staged = Staged::default();
        let mut at = BlockPoint { i: rec.i as usize, j: rec.j as usize, stage: rec.stage, ex: rec.ex, ew: rec.ew };
        if let Some(a) = rec.refs.acc {
            self.load(dev, a, s.acc(), k)?;
            staged.acc = true;
        }
        if let Some(x) = rec.refs.x {
            self.load(dev, x, s.xv(), 2 * k)?;
            staged.x_spec = true;
        }
        if let Some(w) = rec.refs.w {
            self.load(dev, w, s.wv(), 2 * k)?;
            staged.w_spec = true;
        }
        if let Some(p) = rec.refs.p {
            self.load(dev, p, s.pv(), 2 * k)?;
            staged.product = true;
        }
        if let Some(y) = rec.refs.y {
            self.load(dev, y, s.tmp(), k)?;
            staged.y = true;
        }
        if at.stage == Stage::FftWDone && !staged.w_spec {
            // stored spectrum: fetch it again from the model image
            at.stage = Stage::FftXDone;
        }
        Ok(Resume::Block { layer, at, staged })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Per-stage commits inside block-circulant layers, loop indices elsewhere,
    /// on-demand checkpoint when the monitor warns.
    Flex,
    /// Loop indices everywhere; a block-circulant layer commits once per block.
    Baseline,
    /// No checkpoints; every failure restarts the inference.
    None,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Scheme> {
        match s.to_ascii_lowercase().as_str() {
            "flex" => Some(Scheme::Flex),
            "baseline" => Some(Scheme::Baseline),
            "none" => Some(Scheme::None),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Flex => "flex",
            Scheme::Baseline => "baseline",
            Scheme::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InterruptKind {
    Failure,
    Hibernate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Interruption {
    pub kind: InterruptKind,
    pub units: u64,
    pub layer: Option<usize>,
    pub in_bcm: bool,
    /// Accelerator ops started again after this interruption.
    pub reexecuted_ops: u64,
    /// Of those, ops that had already completed before it.
    pub reexecuted_completed: u64,
}

/// Counts accelerator ops started more than once. Ops are identified by
/// their position in the schedule, which is fixed for a given model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WastedWorkMeter {
    pub ops_started: u64,
    pub reexecuted_ops: u64,
    pub reexecuted_completed: u64,
    pub interruptions: Vec<Interruption>,
    #[serde(skip)]
    started_high: u64,
    #[serde(skip)]
    completed_high: u64,
    #[serde(skip)]
    layer: Option<(usize, bool)>,
}

impl WastedWorkMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn op_start(&mut self, seq: u64) {
        self.ops_started += 1;
        let again = seq < self.started_high;
        let done_before = seq < self.completed_high;
        if again {
            self.reexecuted_ops += 1;
        } else {
            self.started_high = seq + 1;
        }
        if done_before {
            self.reexecuted_completed += 1;
        }
        if let Some(last) = self.interruptions.last_mut() {
            last.reexecuted_ops += again as u64;
            last.reexecuted_completed += done_before as u64;
        }
    }

    pub fn op_done(&mut self, seq: u64) {
        self.completed_high = self.completed_high.max(seq + 1);
    }

    fn set_layer(&mut self, layer: usize, bcm: bool) {
        self.layer = Some((layer, bcm));
    }

    pub fn interrupt(&mut self, kind: InterruptKind, units: u64) {
        self.interruptions.push(Interruption {
            kind,
            units,
            layer: self.layer.map(|l| l.0),
            in_bcm: self.layer.is_some_and(|l| l.1),
            reexecuted_ops: 0,
            reexecuted_completed: 0,
        });
    }

    pub fn failures(&self) -> impl Iterator<Item = &Interruption> {
        self.interruptions.iter().filter(|i| i.kind == InterruptKind::Failure)
    }

    pub fn failure_count(&self) -> usize {
        self.failures().count()
    }

    pub fn hibernations(&self) -> usize {
        self.interruptions.len() - self.failure_count()
    }

    pub fn max_per_failure(&self) -> u64 {
        self.failures().map(|f| f.reexecuted_ops).max().unwrap_or(0)
    }
}

fn bcm_op_kind(freq: bool, n: u64) -> OpKind {
    let order: &[OpKind] = if freq {
        &[OpKind::Fft, OpKind::Mpy, OpKind::Ifft, OpKind::Add]
    } else {
        &[OpKind::Fft, OpKind::Fft, OpKind::Mpy, OpKind::Ifft, OpKind::Add]
    };
    order[(n % order.len() as u64) as usize]
}

/// The engine hooks for one boot.
struct Hooks<'a> {
    scheme: Scheme,
    monitor: bool,
    ck: &'a mut Checkpointer,
    meter: &'a mut WastedWorkMeter,
    model: &'a Model,
    plan: &'a DataflowPlan,
    layer: usize,
    row_acc: Option<u16>,
}

impl Hooks<'_> {
    fn op_kind(&self, seq: u64) -> OpKind {
        match &self.model.layers[self.layer] {
            Layer::Bcm(b) => bcm_op_kind(b.is_freq(), seq),
            _ => OpKind::Mac,
        }
    }

    fn hibernate_if_warned(&mut self, dev: &mut Device) -> Result<(), SimError> {
        if self.scheme == Scheme::Flex && self.monitor && dev.take_warning() {
            return Err(SimError::Hibernate);
        }
        Ok(())
    }
}

impl BcmHook for Hooks<'_> {
    fn op_start(&mut self, dev: &mut Device, layer_seq: u64) {
        let seq = self.plan.op_base[self.layer] + layer_seq;
        self.meter.op_start(seq);
        if dev.events_enabled() {
            let (kind, units) = (self.op_kind(layer_seq), dev.units());
            dev.record(Event::OpStart { kind, seq, units });
        }
    }

    fn op_done(&mut self, dev: &mut Device, layer_seq: u64) {
        let seq = self.plan.op_base[self.layer] + layer_seq;
        self.meter.op_done(seq);
        if dev.events_enabled() {
            let (kind, units) = (self.op_kind(layer_seq), dev.units());
            dev.record(Event::OpDone { kind, seq, units });
        }
    }

    fn stage_done(&mut self, dev: &mut Device, ctx: &BcmLayerCtx, at: &BlockPoint) -> Result<(), SimError> {
        if at.j == 0 && at.stage < Stage::DmaOutDone {
            self.row_acc = None;
        }
        let (k, s) = (ctx.k, ctx.staging);
        let base = CheckpointRecord {
            seq: 0,
            layer: self.layer as u16,
            i: at.i as u16,
            j: at.j as u16,
            stage: at.stage,
            cursor: 0,
            ex: at.ex,
            ew: at.ew,
            refs: Refs { acc: self.row_acc, ..Refs::default() },
        };
        let live = self.ck.latest().map(|r| r.refs).unwrap_or_default();
        match (self.scheme, at.stage) {
            (Scheme::None, _) => {}
            (Scheme::Flex, Stage::Start) => {}
            (Scheme::Flex, Stage::DmaInDone) => {
                self.ck.commit(dev, base, None)?;
            }
            (Scheme::Flex, Stage::FftXDone) => {
                self.ck.commit(dev, base, Some((PayloadKind::X, s.xv(), 2 * k)))?;
            }
            (Scheme::Flex, Stage::FftWDone) => {
                let rec = CheckpointRecord { refs: Refs { x: live.x, ..base.refs }, ..base };
                let payload = (!ctx.freq).then_some((PayloadKind::W, s.wv(), 2 * k));
                self.ck.commit(dev, rec, payload)?;
            }
            (Scheme::Flex, Stage::MpyDone) => {
                self.ck.commit(dev, base, Some((PayloadKind::P, s.pv(), 2 * k)))?;
            }
            (Scheme::Flex, Stage::IfftDone) => {
                self.ck.commit(dev, base, Some((PayloadKind::Y, s.tmp(), k)))?;
            }
            (Scheme::Flex | Scheme::Baseline, Stage::DmaOutDone) => {
                let rec = CheckpointRecord { refs: Refs::default(), ..base };
                self.row_acc = self.ck.commit(dev, rec, Some((PayloadKind::Acc, s.acc(), k)))?;
            }
            (Scheme::Baseline, _) => {}
        }
        self.hibernate_if_warned(dev)
    }
}

impl ExecHook for Hooks<'_> {
    fn enter_layer(&mut self, _dev: &mut Device, layer: usize) {
        self.layer = layer;
        self.meter.set_layer(layer, matches!(self.model.layers[layer], Layer::Bcm(_)));
    }

    fn input_loaded(&mut self, dev: &mut Device) -> Result<(), SimError> {
        if self.scheme != Scheme::None {
            self.ck.commit_layer_start(dev, 0)?;
        }
        self.hibernate_if_warned(dev)
    }

    fn progress(&mut self, dev: &mut Device, done: usize, boundary: bool) -> Result<(), SimError> {
        if self.scheme == Scheme::None {
            return Ok(());
        }
        let warned = self.scheme == Scheme::Flex && self.monitor && dev.warning_pending();
        if boundary || warned {
            self.ck.save_cursor(dev, done)?;
        }
        self.hibernate_if_warned(dev)
    }

    fn layer_done(&mut self, dev: &mut Device, layer: usize) -> Result<(), SimError> {
        if self.scheme != Scheme::None {
            self.ck.commit_layer_start(dev, layer + 1)?;
        }
        self.hibernate_if_warned(dev)
    }
}

/// Piecewise-constant harvest power: sample `n` holds from its time until the
/// next sample's time. There is no power after the last sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerTrace {
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("trace line {line}: expected \"time_us,power_uW\", got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("trace line {line}: time goes backwards")]
    NonMonotone { line: usize },
    #[error("trace line {line}: negative or non-finite value")]
    BadValue { line: usize },
    #[error("trace has no samples")]
    Empty,
}

impl PowerTrace {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, TraceError> {
        if points.is_empty() {
            return Err(TraceError::Empty);
        }
        for (n, w) in points.iter().enumerate() {
            if !(w.0.is_finite() && w.1.is_finite()) || w.0 < 0.0 || w.1 < 0.0 {
                return Err(TraceError::BadValue { line: n + 1 });
            }
            if n > 0 && w.0 < points[n - 1].0 {
                return Err(TraceError::NonMonotone { line: n + 1 });
            }
        }
        Ok(PowerTrace { points })
    }

    /// Constant `power_uw` for `duration_us`.
    pub fn constant(power_uw: f64, duration_us: f64) -> Self {
        PowerTrace { points: vec![(0.0, power_uw), (duration_us, 0.0)] }
    }

    /// Text format: one `time_us,power_uW` pair per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut pts = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = || TraceError::Syntax { line: n + 1, text: line.to_string() };
            let (t, p) = line.split_once(',').ok_or_else(syntax)?;
            let t: f64 = t.trim().parse().map_err(|_| syntax())?;
            let p: f64 = p.trim().parse().map_err(|_| syntax())?;
            if !(t.is_finite() && p.is_finite()) || t < 0.0 || p < 0.0 {
                return Err(TraceError::BadValue { line: n + 1 });
            }
            if pts.last().is_some_and(|&(lt, _)| t < lt) {
                return Err(TraceError::NonMonotone { line: n + 1 });
            }
            pts.push((t, p));
        }
        PowerTrace::new(pts)
    }

    pub fn end_us(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.0)
    }
}

/// Capacitor and monitor parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerConfig {
    pub capacitance_f: f64,
    pub v_max: f64,
    pub v_on: f64,
    pub v_off: f64,
    /// Energy above the off threshold at which the monitor warns.
    pub warning_margin_j: f64,
    pub initial_energy_j: f64,
}

impl PowerConfig {
    /// 100 uF, 3.6 V max, on at 3.0 V, off at 1.8 V, warning two checkpoint
    /// costs above off.
    pub fn for_cost(cfg: &DeviceConfig) -> Self {
        PowerConfig {
            capacitance_f: 100e-6,
            v_max: 3.6,
            v_on: 3.0,
            v_off: 1.8,
            warning_margin_j: 2.0 * cfg.cost.checkpoint_write_cost_fj as f64 * 1e-15,
            initial_energy_j: 0.0,
        }
    }

    pub fn energy_at(&self, v: f64) -> f64 {
        0.5 * self.capacitance_f * v * v
    }

    pub fn voltage_of(&self, e: f64) -> f64 {
        (2.0 * e.max(0.0) / self.capacitance_f).sqrt()
    }

    pub fn warning_voltage(&self) -> f64 {
        self.voltage_of(self.energy_at(self.v_off) + self.warning_margin_j)
    }
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self::for_cost(&DeviceConfig::default())
    }
}

/// Capacitor charged from a harvest trace, with a voltage monitor.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerEnvironment {
    pub config: PowerConfig,
    pub trace: PowerTrace,
    pub stored_j: f64,
    pub time_us: f64,
    pub off_time_us: f64,
    pub harvested_j: f64,
    seg: usize,
}

impl PowerEnvironment {
    pub fn new(config: PowerConfig, trace: PowerTrace) -> Self {
        PowerEnvironment { stored_j: config.initial_energy_j, config, trace, time_us: 0.0, off_time_us: 0.0, harvested_j: 0.0, seg: 0 }
    }

    pub fn e_on(&self) -> f64 {
        self.config.energy_at(self.config.v_on)
    }

    pub fn e_off(&self) -> f64 {
        self.config.energy_at(self.config.v_off)
    }

    pub fn e_warn(&self) -> f64 {
        self.e_off() + self.config.warning_margin_j
    }

    pub fn e_max(&self) -> f64 {
        self.config.energy_at(self.config.v_max)
    }

    pub fn voltage(&self) -> f64 {
        self.config.voltage_of(self.stored_j)
    }

    /// Harvest power (uW) at `t` and the time that value ends.
    fn power_at(&mut self, t: f64) -> (f64, f64) {
        let p = &self.trace.points;
        if t < p[0].0 {
            return (0.0, p[0].0);
        }
        while self.seg + 1 < p.len() && p[self.seg + 1].0 <= t {
            self.seg += 1;
        }
        if self.seg + 1 < p.len() {
            (p[self.seg].1, p[self.seg + 1].0)
        } else {
            (0.0, f64::INFINITY)
        }
    }

    fn harvest(&mut self, elapsed_us: f64) -> f64 {
        let end = self.time_us + elapsed_us;
        let mut t = self.time_us;
        let mut e = 0.0;
        while t < end {
            let (p, until) = self.power_at(t);
            let upto = end.min(until);
            e += p * 1e-6 * (upto - t) * 1e-6;
            t = upto;
        }
        self.time_us = end;
        e
    }

    /// Advances time by `elapsed_us` while the device draws `consumed_nj`.
    pub fn step_power(&mut self, elapsed_us: f64, consumed_nj: f64) -> PowerStatus {
        let h = self.harvest(elapsed_us);
        self.harvested_j += h;
        self.stored_j = (self.stored_j + h).min(self.e_max()) - consumed_nj * 1e-9;
        if self.stored_j < self.e_off() {
            self.stored_j = self.stored_j.max(0.0);
            PowerStatus::Dead
        } else if self.stored_j < self.e_warn() {
            PowerStatus::Warning
        } else {
            PowerStatus::Alive
        }
    }

    /// Charges with the device off until the on threshold. `false` when the
    /// trace ends first.
    pub fn wait_for_on(&mut self) -> bool {
        let target = self.e_on();
        while self.stored_j < target {
            let (p, until) = self.power_at(self.time_us);
            if p <= 0.0 {
                if until.is_infinite() {
                    return false;
                }
                self.off_time_us += until - self.time_us;
                self.time_us = until;
                continue;
            }
            let rate = p * 1e-12;
            let needed = (target - self.stored_j) / rate;
            let dt = needed.min(until - self.time_us);
            let h = rate * dt;
            self.harvested_j += h;
            self.stored_j = if dt >= needed { target } else { self.stored_j + h };
            self.time_us += dt;
            self.off_time_us += dt;
        }
        true
    }
}

/// Free-function form of [`PowerEnvironment::step_power`].
pub fn step_power(env: &mut PowerEnvironment, elapsed_us: f64, consumed_nj: f64) -> PowerStatus {
    env.step_power(elapsed_us, consumed_nj)
}

/// Device supply backed by a [`PowerEnvironment`].
#[derive(Clone, Debug)]
pub struct TraceSupply {
    pub env: PowerEnvironment,
}

impl Supply for TraceSupply {
    fn draw(&mut self, d: &Draw) -> PowerStatus {
        self.env.step_power(d.latency_ns as f64 * 1e-3, d.energy_fj as f64 * 1e-6)
    }
    fn recharge(&mut self) -> bool {
        self.env.wait_for_on()
    }
    fn has_monitor(&self) -> bool {
        true
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Fails the device at fixed cumulative work-unit positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectedFailures {
    points: Vec<u64>,
    next: usize,
    /// Raise a monitor warning this many units ahead of each failure.
    warn_lead: Option<u64>,
    warned: bool,
    pub fired: Vec<u64>,
    /// Points skipped because the device hibernated ahead of them.
    pub averted: Vec<u64>,
}

impl InjectedFailures {
    pub fn new(mut points: Vec<u64>) -> Self {
        points.sort_unstable();
        points.dedup();
        InjectedFailures { points, next: 0, warn_lead: None, warned: false, fired: Vec::new(), averted: Vec::new() }
    }

    pub fn with_warning(mut self, lead_units: u64) -> Self {
        self.warn_lead = Some(lead_units);
        self
    }

    /// Failure positions not reached yet.
    pub fn pending(&self) -> &[u64] {
        &self.points[self.next..]
    }
}

impl Supply for InjectedFailures {
    fn draw(&mut self, d: &Draw) -> PowerStatus {
        while self.next < self.points.len() && self.points[self.next] < d.units_before {
            self.next += 1;
        }
        let end = d.units_before + d.units.max(1);
        match self.points.get(self.next) {
            Some(&p) if p < end => {
                self.next += 1;
                self.warned = false;
                self.fired.push(p);
                PowerStatus::Dead
            }
            Some(&p) if self.warn_lead.is_some_and(|l| p - end < l) => {
                self.warned = true;
                PowerStatus::Warning
            }
            _ => PowerStatus::Alive,
        }
    }
    /// A device that went down after a warning recharged before the brown-out
    /// it was warned about, so that failure point never fires.
    fn recharge(&mut self) -> bool {
        if std::mem::take(&mut self.warned) {
            self.averted.push(self.points[self.next]);
            self.next += 1;
        }
        true
    }
    fn has_monitor(&self) -> bool {
        self.warn_lead.is_some()
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DnfReason {
    /// The harvest trace ended before the device could turn on again.
    TraceExhausted,
    RestartCap { restarts: u32 },
    BootCap { boots: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Completed(Vec<Q15>),
    DidNotFinish(DnfReason),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IntermittentError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("simulation fault: {0}")]
    Sim(SimError),
    #[error("inference did not finish: {0:?}")]
    DidNotFinish(DnfReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntermittentOptions {
    /// Failed attempts tolerated under [`Scheme::None`].
    pub restart_cap: u32,
    pub max_boots: u64,
    /// Use the voltage monitor when the supply has one (FLEX only).
    pub monitor: bool,
    pub events: bool,
}

impl Default for IntermittentOptions {
    fn default() -> Self {
        IntermittentOptions { restart_cap: 100, max_boots: 1_000_000, monitor: true, events: false }
    }
}

#[derive(Debug)]
pub struct IntermittentRun {
    pub scheme: Scheme,
    pub outcome: Outcome,
    pub flag: OverflowFlag,
    pub device: Device,
    pub meter: WastedWorkMeter,
    pub checkpoints: CheckpointStats,
    pub plan: DataflowPlan,
    pub boots: u64,
}

impl IntermittentRun {
    pub fn output(&self) -> Option<&[Q15]> {
        match &self.outcome {
            Outcome::Completed(v) => Some(v),
            Outcome::DidNotFinish(_) => None,
        }
    }

    pub fn into_output(self) -> Result<Vec<Q15>, IntermittentError> {
        match self.outcome {
            Outcome::Completed(v) => Ok(v),
            Outcome::DidNotFinish(r) => Err(IntermittentError::DidNotFinish(r)),
        }
    }

    /// Checkpoint plus restore energy over total run energy.
    pub fn checkpoint_share(&self) -> f64 {
        let total = self.device.ledger.total().energy_fj;
        if total == 0 {
            0.0
        } else {
            self.device.ledger.component(Component::Checkpoint).energy_fj as f64 / total as f64
        }
    }

    pub fn trace_env(&self) -> Option<&PowerEnvironment> {
        self.device.supply().as_any().downcast_ref::<TraceSupply>().map(|s| &s.env)
    }
}

fn boot(
    dev: &mut Device,
    model: &Model,
    plan: &DataflowPlan,
    scheme: Scheme,
    monitor: bool,
    ck: &mut Checkpointer,
    meter: &mut WastedWorkMeter,
) -> Result<(Vec<Q15>, OverflowFlag), SimError> {
    let resume = if scheme == Scheme::None {
        Resume::Fresh
    } else {
        match ck.restore(dev)? {
            None => Resume::Fresh,
            Some(rec) => {
                ck.stats.restores += 1;
                let units = dev.units();
                dev.record(Event::Restore { units });
                ck.resume_point(dev, model, plan, &rec)?
            }
        }
    };
    let row_acc = match (&resume, ck.latest()) {
        (Resume::Block { .. }, Some(r)) => r.refs.acc,
        _ => None,
    };
    let layer = match resume {
        Resume::Fresh => 0,
        Resume::Layer { layer, .. } | Resume::Block { layer, .. } => layer,
    };
    let mut hooks = Hooks { scheme, monitor, ck, meter, model, plan, layer: layer.min(model.layers.len().saturating_sub(1)), row_acc };
    execute(dev, model, plan, resume, &mut hooks)
}

/// Runs `model` on `input` powered by `supply`, restoring after every
/// failure according to `scheme`.
pub fn run_intermittent(
    model: &Model,
    input: &[Q15],
    cfg: &DeviceConfig,
    supply: Box<dyn Supply>,
    scheme: Scheme,
    opts: IntermittentOptions,
) -> Result<IntermittentRun, IntermittentError> {
    let plan = plan(model, cfg)?;
    let mut dev = Device::with_supply(cfg, supply);
    if opts.events {
        dev.enable_events();
    }
    deploy(&mut dev, model, &plan, input)?;
    let monitor = opts.monitor && scheme == Scheme::Flex && dev.supply().has_monitor();
    let mut ck = Checkpointer::new(plan.checkpoint);
    let mut meter = WastedWorkMeter::new();
    let mut boots = 0;
    let mut restarts = 0;
    let finish = |dev: Device, ck: &Checkpointer, meter: WastedWorkMeter, outcome: Outcome, flag: OverflowFlag, boots: u64| IntermittentRun {
        scheme,
        outcome,
        flag,
        device: dev,
        meter,
        checkpoints: ck.stats,
        plan: plan.clone(),
        boots,
    };
    if !dev.supply_mut().recharge() {
        return Ok(finish(dev, &ck, meter, Outcome::DidNotFinish(DnfReason::TraceExhausted), OverflowFlag::CLEAN, 0));
    }
    loop {
        if boots >= opts.max_boots {
            return Ok(finish(dev, &ck, meter, Outcome::DidNotFinish(DnfReason::BootCap { boots }), OverflowFlag::CLEAN, boots));
        }
        boots += 1;
        match boot(&mut dev, model, &plan, scheme, monitor, &mut ck, &mut meter) {
            Ok((out, flag)) => return Ok(finish(dev, &ck, meter, Outcome::Completed(out), flag, boots)),
            Err(SimError::PowerFailure) => {
                meter.interrupt(InterruptKind::Failure, dev.units());
                dev.power_fail_reset();
                if scheme == Scheme::None {
                    restarts += 1;
                    if restarts >= opts.restart_cap {
                        let r = DnfReason::RestartCap { restarts };
                        return Ok(finish(dev, &ck, meter, Outcome::DidNotFinish(r), OverflowFlag::CLEAN, boots));
                    }
                }
            }
            Err(SimError::Hibernate) => {
                meter.interrupt(InterruptKind::Hibernate, dev.units());
                dev.hibernate_reset();
            }
            Err(e) => return Err(IntermittentError::Sim(e)),
        }
        if !dev.supply_mut().recharge() {
            return Ok(finish(dev, &ck, meter, Outcome::DidNotFinish(DnfReason::TraceExhausted), OverflowFlag::CLEAN, boots));
        }
    }
}
