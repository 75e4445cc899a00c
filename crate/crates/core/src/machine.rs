// SPDX-License-Identifier: Apache-2.0

//! Physical memory, privilege modes and the per-hart PMP unit.
//!
//! Every access issued from U-mode goes through [`PmpUnit::check`]. M-mode
//! bypasses the PMP entirely (the lock bit is not modelled). All multi-byte
//! values in memory are little-endian.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of PMP entries per hart.
pub const PMP_ENTRIES: usize = 16;

/// Smallest NAPOT region in bytes.
pub const NAPOT_MIN: u64 = 8;

/// Size of the 32-bit physical address space.
pub const ADDRESS_SPACE: u64 = 1 << 32;

/// A byte address in the 32-bit physical address space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhysAddr(pub u32);

impl PhysAddr {
    pub const fn new(value: u32) -> Self {
        Self(value)
    }

    pub const fn value(self) -> u32 {
        self.0
    }

    pub const fn as_u64(self) -> u64 {
        self.0 as u64
    }

    /// Adds `offset`, returning `None` if the result leaves the address space.
    pub fn checked_add(self, offset: u64) -> Option<Self> {
        let end = self.as_u64().checked_add(offset)?;
        u32::try_from(end).ok().map(Self)
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

impl From<u32> for PhysAddr {
    fn from(value: u32) -> Self {
        Self(value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrivilegeMode {
    Machine,
    User,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

impl AccessKind {
    pub const ALL: [AccessKind; 3] = [AccessKind::Read, AccessKind::Write, AccessKind::Execute];
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Execute => "execute",
        })
    }
}

/// A half-open byte range `[base, base + size)`.
///
/// `size` is 64-bit so that a region may end exactly at the top of the
/// 32-bit address space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub base: PhysAddr,
    pub size: u64,
}

impl Region {
    pub const fn new(base: u32, size: u64) -> Self {
        Self { base: PhysAddr(base), size }
    }

    pub fn end(&self) -> u64 {
        self.base.as_u64() + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base.as_u64() && addr < self.end()
    }

    /// True iff the whole span `[addr, addr + len)` lies inside the region.
    pub fn contains_span(&self, addr: u64, len: u64) -> bool {
        match addr.checked_add(len) {
            Some(end) => addr >= self.base.as_u64() && end <= self.end(),
            None => false,
        }
    }

    pub fn overlaps_span(&self, addr: u64, len: u64) -> bool {
        len > 0 && addr < self.end() && addr.saturating_add(len) > self.base.as_u64()
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        other.overlaps_span(self.base.as_u64(), self.size)
    }

    /// True iff the region can be described by a single NAPOT entry.
    pub fn is_napot(&self) -> bool {
        self.size >= NAPOT_MIN && self.size.is_power_of_two() && self.base.as_u64().is_multiple_of(self.size)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {:#x})", self.base, self.end())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchMode {
    #[default]
    Off,
    Tor,
    Napot,
}

/// One PMP address/configuration register pair.
///
/// `addr_reg` holds physical address bits `[33:2]`, i.e. the byte address
/// divided by four.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PmpEntry {
    pub addr_reg: u32,
    pub r: bool,
    pub w: bool,
    pub x: bool,
    pub mode: MatchMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum PmpError {
    #[error("TOR entry has base {base:#x} above limit {limit:#x}")]
    MalformedEntry { base: u64, limit: u64 },
    #[error("region {0} cannot be NAPOT-encoded")]
    NotNapot(Region),
}

impl PmpEntry {
    pub const OFF: PmpEntry = PmpEntry { addr_reg: 0, r: false, w: false, x: false, mode: MatchMode::Off };

    /// Builds a NAPOT entry covering exactly `region`.
    pub fn napot(region: Region, r: bool, w: bool, x: bool) -> Result<Self, PmpError> {
        let addr_reg = encode_napot(region)?;
        Ok(Self { addr_reg, r, w, x, mode: MatchMode::Napot })
    }

    /// Builds a TOR entry whose top is `limit`; the base comes from the
    /// preceding entry's address register.
    pub fn tor(limit: u64, r: bool, w: bool, x: bool) -> Self {
        Self { addr_reg: (limit >> 2) as u32, r, w, x, mode: MatchMode::Tor }
    }

    pub fn grants(&self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.r,
            AccessKind::Write => self.w,
            AccessKind::Execute => self.x,
        }
    }
}

/// Encodes a naturally aligned power-of-two region as a NAPOT address
/// register value.
pub fn encode_napot(region: Region) -> Result<u32, PmpError> {
    if !region.is_napot() {
        return Err(PmpError::NotNapot(region));
    }
    let value = (region.base.as_u64() >> 2) | ((region.size >> 3) - 1);
    u32::try_from(value).map_err(|_| PmpError::NotNapot(region))
}

/// Decodes the byte range matched by `entry`.
///
/// `prev_addr_reg` is the address register of the preceding entry (zero for
/// entry 0) and is only consulted in TOR mode. Returns `Ok(None)` for `Off`.
pub fn decode_region(entry: &PmpEntry, prev_addr_reg: u32) -> Result<Option<Region>, PmpError> {
    match entry.mode {
        MatchMode::Off => Ok(None),
        MatchMode::Tor => {
            let base = u64::from(prev_addr_reg) << 2;
            let limit = u64::from(entry.addr_reg) << 2;
            if base > limit {
                return Err(PmpError::MalformedEntry { base, limit });
            }
            // The address space is 32 bits wide; anything above is unreachable.
            if base >= ADDRESS_SPACE {
                return Ok(Some(Region { base: PhysAddr(u32::MAX), size: 0 }));
            }
            Ok(Some(Region { base: PhysAddr(base as u32), size: limit.min(ADDRESS_SPACE) - base }))
        }
        MatchMode::Napot => {
            let ones = entry.addr_reg.trailing_ones();
            let size = 1u64 << (ones + 3);
            let base = (u64::from(entry.addr_reg) << 2) & !(size - 1);
            if base >= ADDRESS_SPACE {
                return Ok(Some(Region { base: PhysAddr(u32::MAX), size: 0 }));
            }
            Ok(Some(Region { base: PhysAddr(base as u32), size: size.min(ADDRESS_SPACE - base) }))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DenyReason {
    /// The matching entry does not grant the requested access kind.
    PermissionMissing,
    /// The lowest-index overlapping entry does not cover the whole access.
    StraddlesBoundary,
    /// No entry matches any byte of the access.
    NoMatchingEntry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PmpVerdict {
    Allow,
    Deny(DenyReason),
}

impl PmpVerdict {
    pub fn is_allow(self) -> bool {
        matches!(self, PmpVerdict::Allow)
    }
}

/// The 16-entry PMP register file of one hart.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct PmpUnit {
    entries: [PmpEntry; PMP_ENTRIES],
}

impl PmpUnit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[PmpEntry; PMP_ENTRIES] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &PmpEntry {
        &self.entries[index]
    }

    pub fn set(&mut self, index: usize, entry: PmpEntry) {
        self.entries[index] = entry;
    }

    /// Decoded region of entry `index`; malformed TOR entries match nothing.
    pub fn region(&self, index: usize) -> Option<Region> {
        let prev = if index == 0 { 0 } else { self.entries[index - 1].addr_reg };
        decode_region(&self.entries[index], prev).ok().flatten()
    }

    /// Index of the lowest entry matching the single byte at `addr`.
    pub fn matching_entry(&self, addr: u64) -> Option<usize> {
        (0..PMP_ENTRIES).find(|&i| self.region(i).is_some_and(|r| r.contains(addr)))
    }

    /// Adjudicates an access of `len` bytes at `addr`.
    ///
    /// M-mode is always allowed. In U-mode the lowest-index entry that
    /// matches any byte of the access must cover all of it and grant `kind`.
    pub fn check(&self, mode: PrivilegeMode, addr: PhysAddr, len: u64, kind: AccessKind) -> PmpVerdict {
        debug_assert!(len >= 1, "PMP check of an empty access");
        if mode == PrivilegeMode::Machine {
            return PmpVerdict::Allow;
        }
        let start = addr.as_u64();
        for index in 0..PMP_ENTRIES {
            let Some(region) = self.region(index) else { continue };
            if !region.overlaps_span(start, len) {
                continue;
            }
            if !region.contains_span(start, len) {
                return PmpVerdict::Deny(DenyReason::StraddlesBoundary);
            }
            return if self.entries[index].grants(kind) {
                PmpVerdict::Allow
            } else {
                PmpVerdict::Deny(DenyReason::PermissionMissing)
            };
        }
        PmpVerdict::Deny(DenyReason::NoMatchingEntry)
    }
}

/// Free-function form of [`PmpUnit::check`].
pub fn pmp_check(unit: &PmpUnit, mode: PrivilegeMode, addr: PhysAddr, len: u64, kind: AccessKind) -> PmpVerdict {
    unit.check(mode, addr, len, kind)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionKind {
    Flash,
    Ram,
    MailboxMmio,
    DmaMmio,
}

impl RegionKind {
    pub fn is_storage(self) -> bool {
        matches!(self, RegionKind::Flash | RegionKind::Ram)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemRegion {
    pub label: String,
    pub kind: RegionKind,
    pub region: Region,
    data: Vec<u8>,
}

impl MemRegion {
    pub fn new(label: impl Into<String>, kind: RegionKind, region: Region) -> Self {
        Self { label: label.into(), kind, region, data: vec![0; region.size as usize] }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrapReason {
    PmpViolation(DenyReason),
    UnmappedAddress,
}

/// A synchronous access fault, delivered to the M-mode trap handler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Error)]
#[error("{kind} trap at {addr}: {reason:?}")]
pub struct Trap {
    pub addr: PhysAddr,
    pub kind: AccessKind,
    pub reason: TrapReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum AccessError {
    #[error("zero-length access")]
    ZeroLength,
    #[error(transparent)]
    Trap(#[from] Trap),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum MemoryMapError {
    #[error("memory regions {0} and {1} overlap")]
    Overlap(String, String),
    #[error("memory region {0} is empty or leaves the address space")]
    BadRegion(String),
}

/// The SoC physical memory map: disjoint, byte-backed regions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Memory {
    regions: Vec<MemRegion>,
}

impl Memory {
    pub fn new(regions: Vec<MemRegion>) -> Result<Self, MemoryMapError> {
        for r in &regions {
            if r.region.size == 0 || r.region.end() > ADDRESS_SPACE {
                return Err(MemoryMapError::BadRegion(r.label.clone()));
            }
        }
        for (i, a) in regions.iter().enumerate() {
            for b in &regions[i + 1..] {
                if a.region.overlaps(&b.region) {
                    return Err(MemoryMapError::Overlap(a.label.clone(), b.label.clone()));
                }
            }
        }
        Ok(Self { regions })
    }

    pub fn regions(&self) -> &[MemRegion] {
        &self.regions
    }

    pub fn find_kind(&self, kind: RegionKind) -> Option<&MemRegion> {
        self.regions.iter().find(|r| r.kind == kind)
    }

    /// The memory region holding the whole span, if any.
    pub fn region_for(&self, addr: u64, len: u64) -> Option<&MemRegion> {
        self.regions.iter().find(|r| r.region.contains_span(addr, len))
    }

    fn locate(&self, addr: PhysAddr, len: u64, kind: AccessKind) -> Result<(usize, usize), Trap> {
        self.regions
            .iter()
            .position(|r| r.region.contains_span(addr.as_u64(), len))
            .map(|i| (i, (addr.as_u64() - self.regions[i].region.base.as_u64()) as usize))
            .ok_or(Trap { addr, kind, reason: TrapReason::UnmappedAddress })
    }

    fn gate(unit: &PmpUnit, mode: PrivilegeMode, addr: PhysAddr, len: u64, kind: AccessKind) -> Result<(), AccessError> {
        if len == 0 {
            return Err(AccessError::ZeroLength);
        }
        match unit.check(mode, addr, len, kind) {
            PmpVerdict::Allow => Ok(()),
            PmpVerdict::Deny(reason) => Err(Trap { addr, kind, reason: TrapReason::PmpViolation(reason) }.into()),
        }
    }

    /// PMP-checked read of `len` bytes.
    pub fn read(&self, unit: &PmpUnit, mode: PrivilegeMode, addr: PhysAddr, len: u64) -> Result<Vec<u8>, AccessError> {
        Self::gate(unit, mode, addr, len, AccessKind::Read)?;
        let (i, off) = self.locate(addr, len, AccessKind::Read)?;
        Ok(self.regions[i].data[off..off + len as usize].to_vec())
    }

    /// PMP-checked write.
    pub fn write(&mut self, unit: &PmpUnit, mode: PrivilegeMode, addr: PhysAddr, bytes: &[u8]) -> Result<(), AccessError> {
        let len = bytes.len() as u64;
        Self::gate(unit, mode, addr, len, AccessKind::Write)?;
        let (i, off) = self.locate(addr, len, AccessKind::Write)?;
        self.regions[i].data[off..off + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Instruction-fetch check of `len` bytes; returns nothing on success.
    pub fn fetch(&self, unit: &PmpUnit, mode: PrivilegeMode, addr: PhysAddr, len: u64) -> Result<(), AccessError> {
        Self::gate(unit, mode, addr, len, AccessKind::Execute)?;
        self.locate(addr, len, AccessKind::Execute)?;
        Ok(())
    }

    /// Bus-master access that bypasses the hart's PMP (M-mode firmware,
    /// DMA engine, SE core).
    pub fn read_phys(&self, addr: PhysAddr, len: u64) -> Result<Vec<u8>, AccessError> {
        self.read(&PmpUnit::new(), PrivilegeMode::Machine, addr, len)
    }

    pub fn write_phys(&mut self, addr: PhysAddr, bytes: &[u8]) -> Result<(), AccessError> {
        self.write(&PmpUnit::new(), PrivilegeMode::Machine, addr, bytes)
    }

    /// Zero-fills a span; used to scrub killed enclaves and consumed frames.
    pub fn scrub(&mut self, region: Region) -> Result<(), AccessError> {
        self.write_phys(region.base, &vec![0; region.size as usize])
    }

    /// Snapshot of the bytes backing `region`, for audits.
    pub fn snapshot(&self, region: Region) -> Option<Vec<u8>> {
        self.read_phys(region.base, region.size).ok()
    }
}

/// `mem_read` in free-function form.
pub fn mem_read(mem: &Memory, unit: &PmpUnit, mode: PrivilegeMode, addr: PhysAddr, len: u64) -> Result<Vec<u8>, AccessError> {
    mem.read(unit, mode, addr, len)
}

/// `mem_write` in free-function form.
pub fn mem_write(mem: &mut Memory, unit: &PmpUnit, mode: PrivilegeMode, addr: PhysAddr, bytes: &[u8]) -> Result<(), AccessError> {
    mem.write(unit, mode, addr, bytes)
}
