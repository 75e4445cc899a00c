// SPDX-License-Identifier: Apache-2.0

//! Enclave descriptors and the PMP programming policy.
//!
//! Every scheduled enclave gets a PMP unit with a fixed slot layout:
//!
//! | slot | grant                                   | who              |
//! |------|-----------------------------------------|------------------|
//! | 0    | own region, RWX                         | everyone         |
//! | 1    | runtime enclave region, X only          | app enclaves     |
//! | 2    | requesting app enclave's region, RW     | crypto, serving  |
//! | 3    | mailbox MMIO, RW                        | crypto           |
//! | 4..  | off                                     |                  |
//!
//! App enclaves submit DMA requests through an ecall, so slot 4 (DMA MMIO)
//! is never granted and an app enclave can touch nothing beyond its own
//! region and the runtime's execute window.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Digest;
use crate::epa::LifecycleState;
use crate::machine::{Memory, PhysAddr, PmpEntry, PmpUnit, Region, RegionKind, PMP_ENTRIES};
use crate::workload::MicroProgram;

pub const SLOT_OWN: usize = 0;
pub const SLOT_RUNTIME: usize = 1;
pub const SLOT_REQUESTER: usize = 2;
pub const SLOT_MAILBOX: usize = 3;
pub const SLOT_DMA: usize = 4;

/// Entries reserved beyond one per enclave: the runtime execute window and
/// the MMIO window.
pub const RESERVED_ENTRIES: usize = 2;

/// Largest number of enclaves the 16-entry budget admits.
pub const MAX_ENCLAVES: usize = PMP_ENTRIES - RESERVED_ENTRIES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnclaveId(pub u8);

impl EnclaveId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EnclaveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnclaveKind {
    App,
    Crypto,
    Runtime,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnclaveDescriptor {
    pub id: EnclaveId,
    pub name: String,
    pub kind: EnclaveKind,
    pub region: Region,
    pub entry_point: PhysAddr,
    pub measurement: Digest,
    pub state: LifecycleState,
    /// Absent for the crypto enclave (whose service routine is built in)
    /// and the runtime enclave (which is called, never scheduled).
    pub program: Option<MicroProgram>,
    /// Span re-declared free in the availability table on every exit.
    pub receive_buffer: Option<Region>,
}

impl EnclaveDescriptor {
    pub fn new(id: EnclaveId, name: impl Into<String>, kind: EnclaveKind, region: Region) -> Self {
        Self {
            id,
            name: name.into(),
            kind,
            region,
            entry_point: region.base,
            measurement: [0; 32],
            state: LifecycleState::Sleeping,
            program: None,
            receive_buffer: None,
        }
    }

    pub fn with_program(mut self, program: MicroProgram) -> Self {
        self.program = Some(program);
        self
    }

    pub fn with_receive_buffer(mut self, buffer: Region) -> Self {
        self.receive_buffer = Some(buffer);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("service context {0} does not name an app enclave")]
    InvalidServiceContext(EnclaveId),
    #[error("unknown enclave {0}")]
    UnknownEnclave(EnclaveId),
    #[error("region of enclave {0} is not NAPOT-encodable")]
    Unencodable(EnclaveId),
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize)]
pub enum LayoutError {
    #[error("regions of {0} and {1} overlap")]
    Overlap(EnclaveId, EnclaveId),
    #[error("region of {0} is not inside mapped flash or RAM")]
    Unmapped(EnclaveId),
    #[error("need exactly one crypto and one runtime enclave, found {crypto} and {runtime}")]
    KindCount { crypto: usize, runtime: usize },
    #[error("layout needs {required} PMP entries, only {available} exist")]
    EntryBudgetExceeded { required: usize, available: usize },
    #[error("region of {0} is not a naturally aligned power of two")]
    NotNapot(EnclaveId),
    #[error("entry point of {0} lies outside its region")]
    EntryOutsideRegion(EnclaveId),
    #[error("enclave ids are not dense 0..N-1 (found {0} at position {1})")]
    SparseId(EnclaveId, usize),
    #[error("receive buffer of {0} lies outside its region")]
    ReceiveBufferOutsideRegion(EnclaveId),
    #[error("app enclave {0} has no program")]
    MissingProgram(EnclaveId),
    #[error("no usable {0:?} region in the memory map")]
    MissingMmio(RegionKind),
}

/// Collects every layout problem rather than stopping at the first.
pub fn layout_errors(descriptors: &[EnclaveDescriptor], memory: &Memory) -> Vec<LayoutError> {
    let mut errors = Vec::new();
    for (position, d) in descriptors.iter().enumerate() {
        if d.id.index() != position {
            errors.push(LayoutError::SparseId(d.id, position));
        }
        if !d.region.is_napot() {
            errors.push(LayoutError::NotNapot(d.id));
        }
        let mapped = memory
            .region_for(d.region.base.as_u64(), d.region.size)
            .is_some_and(|m| m.kind.is_storage());
        if !mapped {
            errors.push(LayoutError::Unmapped(d.id));
        }
        if !d.region.contains(d.entry_point.as_u64()) {
            errors.push(LayoutError::EntryOutsideRegion(d.id));
        }
        if let Some(buf) = d.receive_buffer {
            if buf.size == 0 || !d.region.contains_span(buf.base.as_u64(), buf.size) {
                errors.push(LayoutError::ReceiveBufferOutsideRegion(d.id));
            }
        }
        if d.kind == EnclaveKind::App && d.program.is_none() {
            errors.push(LayoutError::MissingProgram(d.id));
        }
    }
    for (i, a) in descriptors.iter().enumerate() {
        for b in &descriptors[i + 1..] {
            if a.region.overlaps(&b.region) {
                errors.push(LayoutError::Overlap(a.id, b.id));
            }
        }
    }
    let crypto = descriptors.iter().filter(|d| d.kind == EnclaveKind::Crypto).count();
    let runtime = descriptors.iter().filter(|d| d.kind == EnclaveKind::Runtime).count();
    if crypto != 1 || runtime != 1 {
        errors.push(LayoutError::KindCount { crypto, runtime });
    }
    let required = descriptors.len() + RESERVED_ENTRIES;
    if required > PMP_ENTRIES {
        errors.push(LayoutError::EntryBudgetExceeded { required, available: PMP_ENTRIES });
    }
    for kind in [RegionKind::MailboxMmio, RegionKind::DmaMmio] {
        if !memory.find_kind(kind).is_some_and(|m| m.region.is_napot()) {
            errors.push(LayoutError::MissingMmio(kind));
        }
    }
    errors
}

/// First layout problem, if any.
pub fn validate_layout(descriptors: &[EnclaveDescriptor], memory: &Memory) -> Result<(), LayoutError> {
    match layout_errors(descriptors, memory).into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// The validated enclave set plus the MMIO windows the policy refers to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnclaveSet {
    enclaves: Vec<EnclaveDescriptor>,
    mailbox: Region,
    dma: Region,
}

impl EnclaveSet {
    pub fn new(enclaves: Vec<EnclaveDescriptor>, memory: &Memory) -> Result<Self, Vec<LayoutError>> {
        let errors = layout_errors(&enclaves, memory);
        if !errors.is_empty() {
            return Err(errors);
        }
        let mailbox = memory.find_kind(RegionKind::MailboxMmio).expect("validated").region;
        let dma = memory.find_kind(RegionKind::DmaMmio).expect("validated").region;
        Ok(Self { enclaves, mailbox, dma })
    }

    pub fn len(&self) -> usize {
        self.enclaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enclaves.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EnclaveDescriptor> {
        self.enclaves.iter()
    }

    pub fn get(&self, id: EnclaveId) -> Option<&EnclaveDescriptor> {
        self.enclaves.get(id.index())
    }

    pub(crate) fn get_mut(&mut self, id: EnclaveId) -> Option<&mut EnclaveDescriptor> {
        self.enclaves.get_mut(id.index())
    }

    pub fn by_name(&self, name: &str) -> Option<&EnclaveDescriptor> {
        self.enclaves.iter().find(|d| d.name == name)
    }

    pub fn crypto(&self) -> &EnclaveDescriptor {
        self.enclaves.iter().find(|d| d.kind == EnclaveKind::Crypto).expect("validated")
    }

    pub fn runtime(&self) -> &EnclaveDescriptor {
        self.enclaves.iter().find(|d| d.kind == EnclaveKind::Runtime).expect("validated")
    }

    pub fn apps(&self) -> impl Iterator<Item = &EnclaveDescriptor> {
        self.enclaves.iter().filter(|d| d.kind == EnclaveKind::App)
    }

    pub fn mailbox(&self) -> Region {
        self.mailbox
    }

    pub fn dma_window(&self) -> Region {
        self.dma
    }

    /// Enclave whose region contains `addr`.
    pub fn owner_of(&self, addr: u64) -> Option<&EnclaveDescriptor> {
        self.enclaves.iter().find(|d| d.region.contains(addr))
    }

    /// PMP unit to install while `id` runs.
    ///
    /// `service_ctx` names the app enclave a serving crypto enclave acts
    /// for; it must be `None` for every other kind.
    pub fn pmp_program_for(&self, id: EnclaveId, service_ctx: Option<EnclaveId>) -> Result<PmpUnit, PolicyError> {
        let enclave = self.get(id).ok_or(PolicyError::UnknownEnclave(id))?;
        let napot = |region: Region, r, w, x| PmpEntry::napot(region, r, w, x).map_err(|_| PolicyError::Unencodable(id));
        let mut unit = PmpUnit::new();
        unit.set(SLOT_OWN, napot(enclave.region, true, true, true)?);
        match enclave.kind {
            EnclaveKind::App => {
                if let Some(ctx) = service_ctx {
                    return Err(PolicyError::InvalidServiceContext(ctx));
                }
                unit.set(SLOT_RUNTIME, napot(self.runtime().region, false, false, true)?);
            }
            EnclaveKind::Crypto => {
                if let Some(ctx) = service_ctx {
                    let requester = self.get(ctx).ok_or(PolicyError::InvalidServiceContext(ctx))?;
                    if requester.kind != EnclaveKind::App {
                        return Err(PolicyError::InvalidServiceContext(ctx));
                    }
                    unit.set(SLOT_REQUESTER, napot(requester.region, true, true, false)?);
                }
                unit.set(SLOT_MAILBOX, napot(self.mailbox, true, true, false)?);
            }
            EnclaveKind::Runtime => {
                if let Some(ctx) = service_ctx {
                    return Err(PolicyError::InvalidServiceContext(ctx));
                }
            }
        }
        Ok(unit)
    }
}
