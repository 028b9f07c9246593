//! Simulated vector accelerator, DMA engine and energy accounting.
//!
//! [`Device`] owns the memories, the cost model, the ledger and the power
//! supply. Every memory access and vector op is charged before its effect is
//! applied; if the supply reports a brown-out the op returns
//! [`SimError::PowerFailure`] and nothing further happens.

use std::any::Any;
use std::fmt;
use std::sync::OnceLock;

use serde::Serialize;
use thiserror::Error;

use crate::fxp::{cq15_mul, round_shift, sat_add, saturate_into, OpSite, OverflowFlag, CQ15, Q15};
use crate::memory_sim::{AccessCost, Memory, MemoryError, MemoryKind, DEFAULT_FRAM_BYTES, DEFAULT_SRAM_BYTES};

pub const MIN_FFT_LEN: usize = 4;
pub const MAX_FFT_LEN: usize = 256;
/// LEA-addressable window at the start of SRAM.
pub const DEFAULT_LEA_BYTES: usize = 4 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("power failure")]
    PowerFailure,
    /// Voluntary shutdown after an on-demand checkpoint.
    #[error("hibernating until the capacitor recharges")]
    Hibernate,
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("FFT length {0} is not a power of two in 4..=256")]
    NotPowerOfTwo(usize),
    #[error("operand of {bytes} bytes at SRAM offset {offset} does not fit the {capacity}-byte accelerator region")]
    BufferTooLarge { offset: usize, bytes: usize, capacity: usize },
    #[error("operand lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Fft,
    Ifft,
    Mac,
    Mpy,
    Add,
    DmaCopy,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [OpKind::Fft, OpKind::Ifft, OpKind::Mac, OpKind::Mpy, OpKind::Add, OpKind::DmaCopy];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Fft => "fft",
            OpKind::Ifft => "ifft",
            OpKind::Mac => "mac",
            OpKind::Mpy => "mpy",
            OpKind::Add => "add",
            OpKind::DmaCopy => "dma_copy",
        }
    }
}

/// One vector operation as issued to the accelerator or DMA engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VectorOp {
    pub kind: OpKind,
    pub length: usize,
}

impl VectorOp {
    pub fn validate(&self, lea_bytes: usize) -> Result<(), SimError> {
        match self.kind {
            OpKind::Fft | OpKind::Ifft => {
                check_fft_len(self.length)?;
                let bytes = self.length * 4;
                if bytes > lea_bytes {
                    return Err(SimError::BufferTooLarge { offset: 0, bytes, capacity: lea_bytes });
                }
            }
            OpKind::Mac | OpKind::Add => {
                if self.length * 2 > lea_bytes {
                    return Err(SimError::BufferTooLarge { offset: 0, bytes: self.length * 2, capacity: lea_bytes });
                }
            }
            OpKind::Mpy => {
                if self.length * 4 > lea_bytes {
                    return Err(SimError::BufferTooLarge { offset: 0, bytes: self.length * 4, capacity: lea_bytes });
                }
            }
            OpKind::DmaCopy => {}
        }
        Ok(())
    }
}

pub fn check_fft_len(n: usize) -> Result<(), SimError> {
    if n.is_power_of_two() && (MIN_FFT_LEN..=MAX_FFT_LEN).contains(&n) {
        Ok(())
    } else {
        Err(SimError::NotPowerOfTwo(n))
    }
}

/// Energy in femtojoules and latency in nanoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Price {
    pub energy_fj: u64,
    pub latency_ns: u64,
}

impl Price {
    pub const fn new(energy_fj: u64, latency_ns: u64) -> Self {
        Price { energy_fj, latency_ns }
    }

    pub fn times(self, n: u64) -> Price {
        Price { energy_fj: self.energy_fj * n, latency_ns: self.latency_ns * n }
    }

    pub fn plus(self, o: Price) -> Price {
        Price { energy_fj: self.energy_fj + o.energy_fj, latency_ns: self.latency_ns + o.latency_ns }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct OpCost {
    pub fixed: Price,
    pub per_elem: Price,
}

impl OpCost {
    pub fn for_len(&self, n: usize) -> Price {
        self.fixed.plus(self.per_elem.times(n as u64))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad number `{value}`")]
    BadNumber { line: usize, value: String },
    #[error("cost `{0}` must be strictly positive")]
    NonPositive(String),
    #[error("DMA per-element energy must be below the CPU per-element copy energy")]
    DmaNotCheaper,
}

/// Per-op energy and latency constants. These are calibration values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostModel {
    /// One scalar ALU/load/store instruction group.
    pub cpu_op: Price,
    /// Moving one element with a CPU load/store loop.
    pub cpu_copy: Price,
    pub dma: OpCost,
    pub fft: OpCost,
    pub ifft: OpCost,
    pub mac: OpCost,
    pub mpy: OpCost,
    pub add: OpCost,
    pub fram: AccessCost,
    pub sram: AccessCost,
    /// Budget for one checkpoint, femtojoules.
    pub checkpoint_write_cost_fj: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        let op = |fe: f64, fl: f64, ee: f64, el: f64| OpCost {
            fixed: Price::new(nj(fe), us(fl)),
            per_elem: Price::new(nj(ee), us(el)),
        };
        CostModel {
            cpu_op: Price::new(nj(0.5), us(0.19)),
            cpu_copy: Price::new(nj(3.0), us(0.5)),
            dma: op(20.0, 2.0, 0.2, 0.0625),
            fft: op(10.0, 1.0, 0.4, 0.1),
            ifft: op(10.0, 1.0, 0.4, 0.1),
            mac: op(5.0, 0.5, 0.1, 0.0625),
            mpy: op(5.0, 0.5, 0.15, 0.0625),
            add: op(5.0, 0.5, 0.1, 0.0625),
            fram: AccessCost { read_fj: nj(0.05), write_fj: nj(0.1), read_ns: us(0.03), write_ns: us(0.06) },
            sram: AccessCost { read_fj: nj(0.01), write_fj: nj(0.01), read_ns: us(0.01), write_ns: us(0.01) },
            checkpoint_write_cost_fj: mj(0.033),
        }
    }
}

fn nj(v: f64) -> u64 {
    (v * 1e6).round() as u64
}

fn us(v: f64) -> u64 {
    (v * 1e3).round() as u64
}

fn mj(v: f64) -> u64 {
    (v * 1e12).round() as u64
}

enum Unit {
    Nj,
    Us,
    Mj,
}

impl CostModel {
    const KEYS: [(&'static str, Unit); 37] = [
        ("cpu_op_energy_nj", Unit::Nj),
        ("cpu_op_latency_us", Unit::Us),
        ("cpu_copy_energy_nj", Unit::Nj),
        ("cpu_copy_latency_us", Unit::Us),
        ("dma_fixed_energy_nj", Unit::Nj),
        ("dma_fixed_latency_us", Unit::Us),
        ("dma_elem_energy_nj", Unit::Nj),
        ("dma_elem_latency_us", Unit::Us),
        ("fft_fixed_energy_nj", Unit::Nj),
        ("fft_fixed_latency_us", Unit::Us),
        ("fft_elem_energy_nj", Unit::Nj),
        ("fft_elem_latency_us", Unit::Us),
        ("ifft_fixed_energy_nj", Unit::Nj),
        ("ifft_fixed_latency_us", Unit::Us),
        ("ifft_elem_energy_nj", Unit::Nj),
        ("ifft_elem_latency_us", Unit::Us),
        ("mac_fixed_energy_nj", Unit::Nj),
        ("mac_fixed_latency_us", Unit::Us),
        ("mac_elem_energy_nj", Unit::Nj),
        ("mac_elem_latency_us", Unit::Us),
        ("mpy_fixed_energy_nj", Unit::Nj),
        ("mpy_fixed_latency_us", Unit::Us),
        ("mpy_elem_energy_nj", Unit::Nj),
        ("mpy_elem_latency_us", Unit::Us),
        ("add_fixed_energy_nj", Unit::Nj),
        ("add_fixed_latency_us", Unit::Us),
        ("add_elem_energy_nj", Unit::Nj),
        ("add_elem_latency_us", Unit::Us),
        ("fram_read_energy_nj_per_byte", Unit::Nj),
        ("fram_write_energy_nj_per_byte", Unit::Nj),
        ("fram_read_latency_us_per_byte", Unit::Us),
        ("fram_write_latency_us_per_byte", Unit::Us),
        ("sram_read_energy_nj_per_byte", Unit::Nj),
        ("sram_write_energy_nj_per_byte", Unit::Nj),
        ("sram_read_latency_us_per_byte", Unit::Us),
        ("sram_write_latency_us_per_byte", Unit::Us),
        ("checkpoint_write_cost_mj", Unit::Mj),
    ];

    fn slot(&mut self, key: &str) -> Option<&mut u64> {
        let s = self;
        Some(match key {
            "cpu_op_energy_nj" => &mut s.cpu_op.energy_fj,
            "cpu_op_latency_us" => &mut s.cpu_op.latency_ns,
            "cpu_copy_energy_nj" => &mut s.cpu_copy.energy_fj,
            "cpu_copy_latency_us" => &mut s.cpu_copy.latency_ns,
            "checkpoint_write_cost_mj" => &mut s.checkpoint_write_cost_fj,
            "fram_read_energy_nj_per_byte" => &mut s.fram.read_fj,
            "fram_write_energy_nj_per_byte" => &mut s.fram.write_fj,
            "fram_read_latency_us_per_byte" => &mut s.fram.read_ns,
            "fram_write_latency_us_per_byte" => &mut s.fram.write_ns,
            "sram_read_energy_nj_per_byte" => &mut s.sram.read_fj,
            "sram_write_energy_nj_per_byte" => &mut s.sram.write_fj,
            "sram_read_latency_us_per_byte" => &mut s.sram.read_ns,
            "sram_write_latency_us_per_byte" => &mut s.sram.write_ns,
            _ => {
                let (op, rest) = key.split_once('_')?;
                let cost = match op {
                    "dma" => &mut s.dma,
                    "fft" => &mut s.fft,
                    "ifft" => &mut s.ifft,
                    "mac" => &mut s.mac,
                    "mpy" => &mut s.mpy,
                    "add" => &mut s.add,
                    _ => return None,
                };
                match rest {
                    "fixed_energy_nj" => &mut cost.fixed.energy_fj,
                    "fixed_latency_us" => &mut cost.fixed.latency_ns,
                    "elem_energy_nj" => &mut cost.per_elem.energy_fj,
                    "elem_latency_us" => &mut cost.per_elem.latency_ns,
                    _ => return None,
                }
            }
        })
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<CostModel, CostConfigError> {
        let mut m = CostModel::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or(CostConfigError::Syntax { line })?;
            let (k, v) = (k.trim(), v.trim());
            let unit = Self::KEYS
                .iter()
                .find(|(name, _)| *name == k)
                .map(|(_, u)| u)
                .ok_or_else(|| CostConfigError::UnknownKey { line, key: k.to_string() })?;
            let x: f64 = v.parse().map_err(|_| CostConfigError::BadNumber { line, value: v.to_string() })?;
            if !x.is_finite() {
                return Err(CostConfigError::BadNumber { line, value: v.to_string() });
            }
            let scaled = match unit {
                Unit::Nj => x * 1e6,
                Unit::Us => x * 1e3,
                Unit::Mj => x * 1e12,
            };
            *m.slot(k).expect("key table and slot map agree") = scaled.round().max(0.0) as u64;
        }
        m.validate()?;
        Ok(m)
    }

    /// Renders every key; `parse(to_config_string())` reproduces the model.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut copy = self.clone();
        for (k, unit) in Self::KEYS.iter() {
            let v = *copy.slot(k).unwrap() as f64;
            let shown = match unit {
                Unit::Nj => v / 1e6,
                Unit::Us => v / 1e3,
                Unit::Mj => v / 1e12,
            };
            out.push_str(&format!("{k} = {shown}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), CostConfigError> {
        let mut copy = self.clone();
        for (k, _) in Self::KEYS.iter() {
            if *copy.slot(k).unwrap() == 0 {
                return Err(CostConfigError::NonPositive(k.to_string()));
            }
        }
        if self.dma.per_elem.energy_fj >= self.cpu_copy.energy_fj {
            return Err(CostConfigError::DmaNotCheaper);
        }
        Ok(())
    }

    pub fn op_cost(&self, kind: OpKind) -> &OpCost {
        match kind {
            OpKind::Fft => &self.fft,
            OpKind::Ifft => &self.ifft,
            OpKind::Mac => &self.mac,
            OpKind::Mpy => &self.mpy,
            OpKind::Add => &self.add,
            OpKind::DmaCopy => &self.dma,
        }
    }

    /// Smallest element count for which a DMA transfer is no dearer than a CPU loop.
    pub fn dma_threshold(&self) -> usize {
        let fixed = self.dma.fixed.energy_fj;
        let saving = self.cpu_copy.energy_fj - self.dma.per_elem.energy_fj;
        fixed.div_ceil(saving).max(1) as usize
    }
}

/// Ledger categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Cpu,
    Lea,
    Dma,
    FramRead,
    FramWrite,
    Sram,
    Checkpoint,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Cpu,
        Component::Lea,
        Component::Dma,
        Component::FramRead,
        Component::FramWrite,
        Component::Sram,
        Component::Checkpoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Cpu => "cpu",
            Component::Lea => "lea",
            Component::Dma => "dma",
            Component::FramRead => "fram_read",
            Component::FramWrite => "fram_write",
            Component::Sram => "sram",
            Component::Checkpoint => "checkpoint",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Bucket {
    pub energy_fj: u64,
    pub latency_ns: u64,
}

/// Integer accumulators, so the total equals the sum of components exactly.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EnergyLedger {
    components: [Bucket; 7],
    total: Bucket,
    op_counts: [u64; 6],
    layer: Option<usize>,
    per_layer: Vec<Bucket>,
}

impl EnergyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, c: Component, p: Price) {
        let b = &mut self.components[c as usize];
        b.energy_fj += p.energy_fj;
        b.latency_ns += p.latency_ns;
        self.total.energy_fj += p.energy_fj;
        self.total.latency_ns += p.latency_ns;
        if let Some(l) = self.layer {
            if self.per_layer.len() <= l {
                self.per_layer.resize(l + 1, Bucket::default());
            }
            self.per_layer[l].energy_fj += p.energy_fj;
            self.per_layer[l].latency_ns += p.latency_ns;
        }
        debug_assert_eq!(self.total.energy_fj, self.components.iter().map(|b| b.energy_fj).sum::<u64>());
    }

    pub fn count_op(&mut self, kind: OpKind) {
        self.op_counts[kind.index()] += 1;
    }

    pub fn ops(&self, kind: OpKind) -> u64 {
        self.op_counts[kind.index()]
    }

    pub fn component(&self, c: Component) -> Bucket {
        self.components[c as usize]
    }

    pub fn total(&self) -> Bucket {
        self.total
    }

    pub fn components_sum(&self) -> Bucket {
        let mut s = Bucket::default();
        for b in &self.components {
            s.energy_fj += b.energy_fj;
            s.latency_ns += b.latency_ns;
        }
        s
    }

    /// Routes subsequent charges to a per-layer bucket as well.
    pub fn set_layer(&mut self, layer: Option<usize>) {
        self.layer = layer;
    }

    pub fn per_layer(&self) -> &[Bucket] {
        &self.per_layer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PowerStatus {
    Alive,
    Warning,
    Dead,
}

/// One charge as seen by the power supply.
#[derive(Clone, Copy, Debug)]
pub struct Draw {
    pub energy_fj: u64,
    pub latency_ns: u64,
    /// Cumulative work units before this charge.
    pub units_before: u64,
    pub units: u64,
}

/// Source of energy for a [`Device`].
pub trait Supply: Send {
    fn draw(&mut self, d: &Draw) -> PowerStatus;
    /// Blocks (in simulated time) until execution may start. `false` means never.
    fn recharge(&mut self) -> bool {
        true
    }
    /// Whether a voltage monitor can raise warnings before the brown-out.
    fn has_monitor(&self) -> bool {
        false
    }
    fn as_any(&self) -> &dyn Any;
}

/// Bench supply that never fails.
#[derive(Clone, Copy, Debug, Default)]
pub struct Continuous;

impl Supply for Continuous {
    fn draw(&mut self, _d: &Draw) -> PowerStatus {
        PowerStatus::Alive
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FftDirection {
    Forward,
    Inverse,
}

/// Memory location of an element array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Loc {
    pub kind: MemoryKind,
    pub offset: usize,
}

impl Loc {
    pub const fn sram(offset: usize) -> Self {
        Loc { kind: MemoryKind::Sram, offset }
    }
    pub const fn fram(offset: usize) -> Self {
        Loc { kind: MemoryKind::Fram, offset }
    }
    pub fn add_elems(self, n: usize) -> Self {
        Loc { kind: self.kind, offset: self.offset + 2 * n }
    }
}

/// Instrumentation events, recorded only when enabled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    OpStart { kind: OpKind, seq: u64, units: u64 },
    OpDone { kind: OpKind, seq: u64, units: u64 },
    CheckpointBegin { units: u64 },
    /// Emitted after the commit word is durable.
    Commit { layer: u16, block_i: u16, block_j: u16, stage: u8, units: u64 },
    CursorSaved { layer: u16, cursor: u16, units: u64 },
    PowerFailure { units: u64 },
    Restore { units: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceConfig {
    pub sram_bytes: usize,
    pub fram_bytes: usize,
    pub lea_bytes: usize,
    pub cost: CostModel,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            sram_bytes: DEFAULT_SRAM_BYTES,
            fram_bytes: DEFAULT_FRAM_BYTES,
            lea_bytes: DEFAULT_LEA_BYTES,
            cost: CostModel::default(),
        }
    }
}

impl DeviceConfig {
    /// LEA bytes actually addressable: the configured window clipped to SRAM.
    pub fn lea_capacity(&self) -> usize {
        self.lea_bytes.min(self.sram_bytes)
    }
}

/// The simulated microcontroller.
pub struct Device {
    pub mem: Memory,
    pub cost: CostModel,
    pub ledger: EnergyLedger,
    lea_bytes: usize,
    supply: Box<dyn Supply>,
    warning: bool,
    units: u64,
    attribution: Option<Component>,
    events: Option<Vec<Event>>,
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device").field("units", &self.units).field("ledger", &self.ledger).finish()
    }
}

impl Device {
    pub fn new(cfg: &DeviceConfig) -> Self {
        Self::with_supply(cfg, Box::new(Continuous))
    }

    pub fn with_supply(cfg: &DeviceConfig, supply: Box<dyn Supply>) -> Self {
        Device {
            mem: Memory::new(cfg.sram_bytes, cfg.fram_bytes, cfg.cost.sram, cfg.cost.fram),
            cost: cfg.cost.clone(),
            ledger: EnergyLedger::new(),
            lea_bytes: cfg.lea_capacity(),
            supply,
            warning: false,
            units: 0,
            attribution: None,
            events: None,
        }
    }

    pub fn lea_bytes(&self) -> usize {
        self.lea_bytes
    }

    pub fn units(&self) -> u64 {
        self.units
    }

    pub fn supply(&self) -> &dyn Supply {
        self.supply.as_ref()
    }

    pub fn supply_mut(&mut self) -> &mut dyn Supply {
        self.supply.as_mut()
    }

    pub fn enable_events(&mut self) {
        self.events = Some(Vec::new());
    }

    pub fn events(&self) -> &[Event] {
        self.events.as_deref().unwrap_or(&[])
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        self.events.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn record(&mut self, ev: Event) {
        if let Some(e) = self.events.as_mut() {
            e.push(ev);
        }
    }

    pub fn events_enabled(&self) -> bool {
        self.events.is_some()
    }

    /// Charges made while `Some` are booked to that component instead.
    pub fn set_attribution(&mut self, c: Option<Component>) {
        self.attribution = c;
    }

    pub fn attribution(&self) -> Option<Component> {
        self.attribution
    }

    /// Returns and clears the voltage-monitor warning.
    pub fn take_warning(&mut self) -> bool {
        std::mem::take(&mut self.warning)
    }

    pub fn warning_pending(&self) -> bool {
        self.warning
    }

    /// Books a cost and asks the supply whether the device survived it.
    pub fn charge(&mut self, comp: Component, p: Price, units: u64) -> Result<(), SimError> {
        let comp = self.attribution.unwrap_or(comp);
        self.ledger.charge(comp, p);
        let d = Draw { energy_fj: p.energy_fj, latency_ns: p.latency_ns, units_before: self.units, units };
        self.units += units;
        match self.supply.draw(&d) {
            PowerStatus::Alive => Ok(()),
            PowerStatus::Warning => {
                self.warning = true;
                Ok(())
            }
            PowerStatus::Dead => Err(SimError::PowerFailure),
        }
    }

    /// Voluntary power-down: volatile state is lost as in a failure, but no
    /// failure event is recorded.
    pub fn hibernate_reset(&mut self) {
        self.mem.power_fail_reset();
        self.warning = false;
        self.attribution = None;
    }

    /// Volatile state is lost; FRAM is untouched.
    pub fn power_fail_reset(&mut self) {
        self.mem.power_fail_reset();
        self.warning = false;
        self.attribution = None;
        let units = self.units;
        self.record(Event::PowerFailure { units });
    }

    fn read_price(&self, kind: MemoryKind, bytes: usize) -> (Component, Price) {
        let c = self.mem.region(kind).cost;
        let comp = match kind {
            MemoryKind::Sram => Component::Sram,
            MemoryKind::Fram => Component::FramRead,
        };
        (comp, Price::new(c.read_fj * bytes as u64, c.read_ns * bytes as u64))
    }

    fn charge_read(&mut self, loc: Loc, n: usize) -> Result<(), SimError> {
        if n == 0 {
            return Ok(());
        }
        self.mem.region(loc.kind).check(loc.offset, 2 * n)?;
        let (comp, p) = self.read_price(loc.kind, 2 * n);
        self.charge(comp, p, n as u64)
    }

    /// Writes elements, charging SRAM in one go and FRAM word by word so a
    /// failure can leave a multi-word FRAM write partially applied.
    fn charged_write(&mut self, loc: Loc, vals: &[i16]) -> Result<(), SimError> {
        if vals.is_empty() {
            return Ok(());
        }
        self.mem.region(loc.kind).check(loc.offset, 2 * vals.len())?;
        let c = self.mem.region(loc.kind).cost;
        match loc.kind {
            MemoryKind::Sram => {
                let b = 2 * vals.len() as u64;
                self.charge(Component::Sram, Price::new(c.write_fj * b, c.write_ns * b), vals.len() as u64)?;
                self.mem.sram.write_i16s(loc.offset, vals)?;
            }
            MemoryKind::Fram => {
                let p = Price::new(c.write_fj * 2, c.write_ns * 2);
                for (i, &v) in vals.iter().enumerate() {
                    self.charge(Component::FramWrite, p, 1)?;
                    self.mem.fram.write_i16(loc.offset + 2 * i, v)?;
                }
            }
        }
        Ok(())
    }

    /// Raw bytes written as FRAM words (odd tails padded by the caller).
    pub fn write_bytes(&mut self, loc: Loc, bytes: &[u8]) -> Result<(), SimError> {
        debug_assert!(bytes.len() % 2 == 0);
        let vals: Vec<i16> = bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
        self.cpu_store(loc, &vals)
    }

    pub fn cpu_ops(&mut self, n: usize) -> Result<(), SimError> {
        if n == 0 {
            return Ok(());
        }
        let p = self.cost.cpu_op.times(n as u64);
        self.charge(Component::Cpu, p, n as u64)
    }

    /// CPU loads of `out.len()` elements.
    pub fn cpu_load(&mut self, loc: Loc, out: &mut [i16]) -> Result<(), SimError> {
        self.cpu_ops(out.len())?;
        self.charge_read(loc, out.len())?;
        self.mem.region(loc.kind).read_i16s(loc.offset, out)?;
        Ok(())
    }

    pub fn cpu_load_one(&mut self, loc: Loc) -> Result<i16, SimError> {
        let mut v = [0i16];
        self.cpu_load(loc, &mut v)?;
        Ok(v[0])
    }

    /// CPU stores of `vals`.
    pub fn cpu_store(&mut self, loc: Loc, vals: &[i16]) -> Result<(), SimError> {
        self.cpu_ops(vals.len())?;
        self.charged_write(loc, vals)
    }

    pub fn cpu_store_one(&mut self, loc: Loc, v: i16) -> Result<(), SimError> {
        self.cpu_store(loc, &[v])
    }

    fn load_uncharged(&self, loc: Loc, n: usize) -> Result<Vec<i16>, SimError> {
        let mut v = vec![0i16; n];
        self.mem.region(loc.kind).read_i16s(loc.offset, &mut v)?;
        Ok(v)
    }

    /// Element copy by a CPU loop.
    pub fn cpu_copy(&mut self, src: Loc, dst: Loc, n: usize) -> Result<(), SimError> {
        if n == 0 {
            return Ok(());
        }
        let p = self.cost.cpu_copy.times(n as u64);
        self.charge(Component::Cpu, p, n as u64)?;
        self.charge_read(src, n)?;
        let v = self.load_uncharged(src, n)?;
        self.charged_write(dst, &v)
    }

    /// Element copy by the DMA engine: one fixed cost plus a per-element cost.
    pub fn dma_copy(&mut self, src: Loc, dst: Loc, n: usize) -> Result<(), SimError> {
        if n == 0 {
            return Ok(());
        }
        self.mem.region(src.kind).check(src.offset, 2 * n)?;
        self.mem.region(dst.kind).check(dst.offset, 2 * n)?;
        let p = self.cost.dma.for_len(n);
        self.ledger.count_op(OpKind::DmaCopy);
        self.charge(Component::Dma, p, n as u64)?;
        self.charge_read(src, n)?;
        let v = self.load_uncharged(src, n)?;
        self.charged_write(dst, &v)
    }

    pub fn movement_policy(&self, n: usize) -> Movement {
        movement_policy(&self.cost, n)
    }

    /// Copy using whichever path the movement policy picks.
    pub fn copy(&mut self, src: Loc, dst: Loc, n: usize) -> Result<(), SimError> {
        match self.movement_policy(n) {
            Movement::Dma => self.dma_copy(src, dst, n),
            Movement::Cpu => self.cpu_copy(src, dst, n),
        }
    }

    fn lea_check(&self, offset: usize, bytes: usize) -> Result<(), SimError> {
        if offset.checked_add(bytes).is_none_or(|end| end > self.lea_bytes) {
            return Err(SimError::BufferTooLarge { offset, bytes, capacity: self.lea_bytes });
        }
        Ok(())
    }

    fn lea_charge(&mut self, kind: OpKind, n: usize) -> Result<(), SimError> {
        let p = self.cost.op_cost(kind).for_len(n);
        self.ledger.count_op(kind);
        self.charge(Component::Lea, p, n as u64)
    }

    fn load_complex(&self, off: usize, n: usize) -> Result<Vec<CQ15>, SimError> {
        let raw = self.load_uncharged(Loc::sram(off), 2 * n)?;
        Ok(raw.chunks_exact(2).map(|c| CQ15::new(c[0], c[1])).collect())
    }

    fn store_complex(&mut self, off: usize, v: &[CQ15]) -> Result<(), SimError> {
        let raw: Vec<i16> = v.iter().flat_map(|c| [c.re.0, c.im.0]).collect();
        self.mem.sram.write_i16s(off, &raw)?;
        Ok(())
    }

    /// In-place FFT of `n` interleaved complex values at SRAM offset `off`.
    pub fn lea_fft(&mut self, off: usize, n: usize, dir: FftDirection) -> Result<OverflowFlag, SimError> {
        check_fft_len(n)?;
        self.lea_check(off, 4 * n)?;
        let kind = match dir {
            FftDirection::Forward => OpKind::Fft,
            FftDirection::Inverse => OpKind::Ifft,
        };
        self.lea_charge(kind, n)?;
        let mut buf = self.load_complex(off, n)?;
        let flag = fft_in_place(&mut buf, dir)?;
        self.store_complex(off, &buf)?;
        Ok(flag)
    }

    /// Dot product of two real vectors, returned as the wide Q30 accumulator.
    pub fn lea_mac_wide(&mut self, a_off: usize, b_off: usize, n: usize) -> Result<i64, SimError> {
        self.lea_check(a_off, 2 * n)?;
        self.lea_check(b_off, 2 * n)?;
        self.lea_charge(OpKind::Mac, n)?;
        let a = self.load_uncharged(Loc::sram(a_off), n)?;
        let b = self.load_uncharged(Loc::sram(b_off), n)?;
        Ok(mac_wide(&a, &b))
    }

    /// MAC with the Q15 read-out.
    pub fn lea_mac(&mut self, a_off: usize, b_off: usize, n: usize) -> Result<(Q15, OverflowFlag), SimError> {
        let acc = self.lea_mac_wide(a_off, b_off, n)?;
        Ok(mac_readout(acc, 0))
    }

    /// Element-wise complex product `dst = a * b`.
    pub fn lea_mpy(&mut self, a_off: usize, b_off: usize, dst_off: usize, n: usize) -> Result<OverflowFlag, SimError> {
        for o in [a_off, b_off, dst_off] {
            self.lea_check(o, 4 * n)?;
        }
        self.lea_charge(OpKind::Mpy, n)?;
        let a = self.load_complex(a_off, n)?;
        let b = self.load_complex(b_off, n)?;
        let mut flag = OverflowFlag::CLEAN;
        let out: Vec<CQ15> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                let (p, f) = cq15_mul(*x, *y);
                flag |= f;
                p
            })
            .collect();
        self.store_complex(dst_off, &out)?;
        Ok(flag)
    }

    /// Element-wise saturating real sum `dst = a + b`.
    pub fn lea_add(&mut self, a_off: usize, b_off: usize, dst_off: usize, n: usize) -> Result<OverflowFlag, SimError> {
        for o in [a_off, b_off, dst_off] {
            self.lea_check(o, 2 * n)?;
        }
        self.lea_charge(OpKind::Add, n)?;
        let a = self.load_uncharged(Loc::sram(a_off), n)?;
        let b = self.load_uncharged(Loc::sram(b_off), n)?;
        let mut flag = OverflowFlag::CLEAN;
        let out: Vec<i16> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                let (s, f) = sat_add(Q15(*x), Q15(*y));
                flag |= f;
                s.0
            })
            .collect();
        self.mem.sram.write_i16s(dst_off, &out)?;
        Ok(flag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Movement {
    Dma,
    Cpu,
}

pub fn movement_policy(cost: &CostModel, n: usize) -> Movement {
    if n >= cost.dma_threshold() {
        Movement::Dma
    } else {
        Movement::Cpu
    }
}

/// Sum of raw products (Q30), exact in 64 bits for any supported length.
pub fn mac_wide(a: &[i16], b: &[i16]) -> i64 {
    a.iter().zip(b).map(|(&x, &y)| x as i64 * y as i64).sum()
}

/// Rounds a Q30 accumulator to Q15, dividing by a further `2^extra_shift`.
pub fn mac_readout(acc: i64, extra_shift: u32) -> (Q15, OverflowFlag) {
    let mut f = OverflowFlag::CLEAN;
    let q = saturate_into(round_shift(acc, 15 + extra_shift), OpSite::Mac, &mut f);
    (q, f)
}

/// Twiddles `(cos, sin)` of `2*pi*t/256` scaled by 2^15, t < 128. `cos(0)` is
/// kept as exactly 2^15 so the trivial twiddle is lossless.
fn twiddles() -> &'static [(i64, i64); MAX_FFT_LEN / 2] {
    static T: OnceLock<[(i64, i64); MAX_FFT_LEN / 2]> = OnceLock::new();
    T.get_or_init(|| {
        let mut t = [(0i64, 0i64); MAX_FFT_LEN / 2];
        for (i, w) in t.iter_mut().enumerate() {
            let a = 2.0 * std::f64::consts::PI * i as f64 / MAX_FFT_LEN as f64;
            *w = ((a.cos() * 32768.0).round() as i64, (a.sin() * 32768.0).round() as i64);
        }
        t
    })
}

/// Radix-2 decimation-in-time FFT over Q15 values. The forward transform is
/// unscaled; the inverse halves after every stage (overall 1/n).
pub fn fft_in_place(buf: &mut [CQ15], dir: FftDirection) -> Result<OverflowFlag, SimError> {
    let n = buf.len();
    check_fft_len(n)?;
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let tw = twiddles();
    let shift = match dir {
        FftDirection::Forward => 15,
        FftDirection::Inverse => 16,
    };
    let sign: i64 = match dir {
        FftDirection::Forward => -1,
        FftDirection::Inverse => 1,
    };
    let mut flag = OverflowFlag::CLEAN;
    let mut half = 1;
    while half < n {
        let stride = MAX_FFT_LEN / (2 * half);
        for start in (0..n).step_by(2 * half) {
            for j in 0..half {
                let (c, s) = tw[j * stride];
                let s = sign * s;
                let a = buf[start + j];
                let b = buf[start + j + half];
                let (br, bi) = (b.re.0 as i64, b.im.0 as i64);
                let tr = br * c - bi * s;
                let ti = br * s + bi * c;
                let ar = (a.re.0 as i64) << 15;
                let ai = (a.im.0 as i64) << 15;
                buf[start + j] = CQ15 {
                    re: saturate_into(round_shift(ar + tr, shift), OpSite::FftStage, &mut flag),
                    im: saturate_into(round_shift(ai + ti, shift), OpSite::FftStage, &mut flag),
                };
                buf[start + j + half] = CQ15 {
                    re: saturate_into(round_shift(ar - tr, shift), OpSite::FftStage, &mut flag),
                    im: saturate_into(round_shift(ai - ti, shift), OpSite::FftStage, &mut flag),
                };
            }
        }
        half *= 2;
    }
    Ok(flag)
}
