//! Volatile SRAM and non-volatile FRAM byte stores.
//!
//! Regions only hold bytes and per-byte prices; charging happens in
//! [`crate::accel_sim::Device`], which owns the memory together with the ledger.

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_SRAM_BYTES: usize = 8 * 1024;
pub const DEFAULT_FRAM_BYTES: usize = 256 * 1024;
/// Fill byte for SRAM after a power failure.
pub const POISON: u8 = 0xDE;
/// FRAM write atomicity (one Q15 element).
pub const FRAM_WORD: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryKind {
    Sram,
    Fram,
}

impl MemoryKind {
    pub fn is_volatile(self) -> bool {
        self == MemoryKind::Sram
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("{kind:?} access [{offset}, {offset}+{len}) exceeds capacity {capacity}")]
    OutOfBounds { kind: MemoryKind, offset: usize, len: usize, capacity: usize },
    #[error("FRAM allocation of {requested} bytes exceeds the {available} bytes left")]
    FramFull { requested: usize, available: usize },
}

/// Per-byte access prices in femtojoules and nanoseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AccessCost {
    pub read_fj: u64,
    pub write_fj: u64,
    pub read_ns: u64,
    pub write_ns: u64,
}

#[derive(Clone, Debug)]
pub struct MemoryRegion {
    kind: MemoryKind,
    contents: Vec<u8>,
    pub cost: AccessCost,
}

impl MemoryRegion {
    pub fn new(kind: MemoryKind, capacity: usize, cost: AccessCost) -> Self {
        let fill = if kind.is_volatile() { POISON } else { 0 };
        MemoryRegion { kind, contents: vec![fill; capacity], cost }
    }

    pub fn kind(&self) -> MemoryKind {
        self.kind
    }

    pub fn capacity(&self) -> usize {
        self.contents.len()
    }

    pub fn check(&self, offset: usize, len: usize) -> Result<(), MemoryError> {
        match offset.checked_add(len) {
            Some(end) if end <= self.contents.len() => Ok(()),
            _ => Err(MemoryError::OutOfBounds {
                kind: self.kind,
                offset,
                len,
                capacity: self.contents.len(),
            }),
        }
    }

    pub fn read(&self, offset: usize, len: usize) -> Result<&[u8], MemoryError> {
        self.check(offset, len)?;
        Ok(&self.contents[offset..offset + len])
    }

    pub fn write(&mut self, offset: usize, bytes: &[u8]) -> Result<(), MemoryError> {
        self.check(offset, bytes.len())?;
        self.contents[offset..offset + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub fn read_i16(&self, offset: usize) -> Result<i16, MemoryError> {
        let b = self.read(offset, 2)?;
        Ok(i16::from_le_bytes([b[0], b[1]]))
    }

    pub fn write_i16(&mut self, offset: usize, v: i16) -> Result<(), MemoryError> {
        self.write(offset, &v.to_le_bytes())
    }

    pub fn read_i16s(&self, offset: usize, out: &mut [i16]) -> Result<(), MemoryError> {
        let b = self.read(offset, out.len() * 2)?;
        for (o, c) in out.iter_mut().zip(b.chunks_exact(2)) {
            *o = i16::from_le_bytes([c[0], c[1]]);
        }
        Ok(())
    }

    pub fn write_i16s(&mut self, offset: usize, vals: &[i16]) -> Result<(), MemoryError> {
        self.check(offset, vals.len() * 2)?;
        for (i, v) in vals.iter().enumerate() {
            self.contents[offset + 2 * i..offset + 2 * i + 2].copy_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    /// Poisons volatile contents; non-volatile regions are untouched.
    pub fn power_fail_reset(&mut self) {
        if self.kind.is_volatile() {
            self.contents.fill(POISON);
        }
    }
}

/// The device's two memories.
#[derive(Clone, Debug)]
pub struct Memory {
    pub sram: MemoryRegion,
    pub fram: MemoryRegion,
}

impl Memory {
    pub fn new(sram_bytes: usize, fram_bytes: usize, sram: AccessCost, fram: AccessCost) -> Self {
        Memory {
            sram: MemoryRegion::new(MemoryKind::Sram, sram_bytes, sram),
            fram: MemoryRegion::new(MemoryKind::Fram, fram_bytes, fram),
        }
    }

    pub fn region(&self, kind: MemoryKind) -> &MemoryRegion {
        match kind {
            MemoryKind::Sram => &self.sram,
            MemoryKind::Fram => &self.fram,
        }
    }

    pub fn region_mut(&mut self, kind: MemoryKind) -> &mut MemoryRegion {
        match kind {
            MemoryKind::Sram => &mut self.sram,
            MemoryKind::Fram => &mut self.fram,
        }
    }

    pub fn power_fail_reset(&mut self) {
        self.sram.power_fail_reset();
        self.fram.power_fail_reset();
    }
}

/// What an FRAM allocation holds; activation buffers are tracked separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocTag {
    Model,
    Input,
    Activation,
    Checkpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Allocation {
    pub offset: usize,
    pub len: usize,
    pub tag: AllocTag,
}

/// Bump allocator over FRAM with an activation high-water mark.
#[derive(Clone, Debug)]
pub struct FramAllocator {
    capacity: usize,
    cursor: usize,
    activation_bytes: usize,
    activation_high_water: usize,
    allocations: Vec<Allocation>,
}

impl FramAllocator {
    pub fn new(capacity: usize) -> Self {
        FramAllocator {
            capacity,
            cursor: 0,
            activation_bytes: 0,
            activation_high_water: 0,
            allocations: Vec::new(),
        }
    }

    /// Allocates `len` bytes, word aligned.
    pub fn alloc(&mut self, len: usize, tag: AllocTag) -> Result<Allocation, MemoryError> {
        let offset = self.cursor.next_multiple_of(FRAM_WORD);
        let available = self.capacity.saturating_sub(offset);
        if len > available {
            return Err(MemoryError::FramFull { requested: len, available });
        }
        self.cursor = offset + len;
        if tag == AllocTag::Activation {
            self.activation_bytes += len;
            self.activation_high_water = self.activation_high_water.max(self.activation_bytes);
        }
        let a = Allocation { offset, len, tag };
        self.allocations.push(a);
        Ok(a)
    }

    pub fn used(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.cursor
    }

    pub fn activation_high_water(&self) -> usize {
        self.activation_high_water
    }

    pub fn allocations(&self) -> &[Allocation] {
        &self.allocations
    }
}
